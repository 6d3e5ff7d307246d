import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from gtmp import autodiff as ad
from gtmp.encoder import EncoderConfig, encode, init_model, predict
from gtmp.errors import ConfigError, ContractError
from gtmp.geometry import apply_rigid, random_rigid
from gtmp.nn import max_relative_grad_error
from gtmp.objectives import (
    OrderLossConfig,
    RadialBasisConfig,
    RadialHistogram,
    ancestor_context,
    child_distance_histogram,
    emd_1d,
    generative_loss,
    generative_targets,
    order_loss,
    order_violation_rate,
    rbf_expand,
    sample_order_pairs,
    ssl_loss,
    supervised_loss,
    _emd_rows,
    _normalize_mass,
)
from gtmp.synthetic import GeneratorConfig, generate_synthetic

from conftest import make_tree, random_trees

BASIS = RadialBasisConfig.from_range(3.0, 6)


def emd_lp_oracle(p, q, mu):
    """Exhaustive transport LP with ground cost |mu_a - mu_b|."""
    p = _normalize_mass(np.asarray(p, dtype=float))
    q = _normalize_mass(np.asarray(q, dtype=float))
    k = len(mu)
    cost = np.abs(np.subtract.outer(mu, mu)).ravel()
    a_eq = []
    b_eq = []
    for a in range(k):  # row sums = p
        row = np.zeros(k * k)
        row[a * k:(a + 1) * k] = 1.0
        a_eq.append(row)
        b_eq.append(p[a])
    for b in range(k):  # column sums = q
        col = np.zeros(k * k)
        col[b::k] = 1.0
        a_eq.append(col)
        b_eq.append(q[b])
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


# -- radial basis ---------------------------------------------------------------

def test_basis_validation():
    with pytest.raises(ConfigError):
        RadialBasisConfig(mu=(0.0,), gamma=1.0)
    with pytest.raises(ConfigError):
        RadialBasisConfig(mu=(0.0, 0.0), gamma=1.0)
    with pytest.raises(ConfigError):
        RadialBasisConfig(mu=(0.0, 1.0), gamma=0.0)
    cfg = RadialBasisConfig.from_range(4.0, 5)
    assert cfg.k == 5
    assert cfg.mu[0] == 0.0 and cfg.mu[-1] == 4.0


def test_rbf_single_distance_at_center():
    hist = rbf_expand([BASIS.mu[3]], BASIS)
    assert hist.weights[3] == pytest.approx(1.0)
    delta = BASIS.mu[3] - BASIS.mu[2]
    assert hist.weights[2] == pytest.approx(math.exp(-BASIS.gamma * delta ** 2))


def test_rbf_empty_list():
    assert np.array_equal(rbf_expand([], BASIS).weights, np.zeros(6))


def test_rbf_matches_direct_evaluation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = rng.uniform(0, 4, size=20)
        got = rbf_expand(d, BASIS).weights
        expect = np.zeros(BASIS.k)
        for dist in d:
            for k, mu in enumerate(BASIS.mu):
                expect[k] += math.exp(-BASIS.gamma * (dist - mu) ** 2)
        assert np.abs(got - expect).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), max_size=12),
       st.lists(st.floats(0, 5), max_size=12))
def test_rbf_permutation_invariant_and_additive(d1, d2):
    a = rbf_expand(d1, BASIS).weights
    b = rbf_expand(d2, BASIS).weights
    both = rbf_expand(d1 + d2, BASIS).weights
    perm = rbf_expand(list(reversed(d1)), BASIS).weights
    assert np.allclose(a + b, both, atol=1e-12)
    assert np.allclose(a, perm, atol=1e-12)


def test_child_distance_histogram():
    tree = make_tree([None, 0, 0, 1],
                     [(0, 0, 0), (1, 0, 0), (0, 2, 0), (1, 0, 1.5)])
    leaf = child_distance_histogram(tree, 3, BASIS)
    assert np.array_equal(leaf.weights, np.zeros(6))
    root = child_distance_histogram(tree, 0, BASIS)
    assert np.allclose(root.weights, rbf_expand([1.0, 2.0], BASIS).weights)
    single = child_distance_histogram(tree, 1, BASIS)
    assert np.allclose(single.weights, rbf_expand([1.5], BASIS).weights)


def test_ancestor_context_small_cases():
    tree = make_tree([None, 0, 1], [(0, 0, 0), (1, 0, 0), (1, 1, 0)])
    root_ctx = ancestor_context(tree, 0, BASIS)
    assert np.array_equal(root_ctx.weights,
                          child_distance_histogram(tree, 0, BASIS).weights)
    mid_ctx = ancestor_context(tree, 1, BASIS)
    assert np.allclose(
        mid_ctx.weights,
        child_distance_histogram(tree, 0, BASIS).weights
        + child_distance_histogram(tree, 1, BASIS).weights)


def test_ancestor_context_path_walk_oracle():
    for tree in random_trees(3, seed=71, depth_min=5, depth_max=7, max_nodes=30):
        basis = RadialBasisConfig.fit([tree], 8)
        for nid in tree.ids():
            total = child_distance_histogram(tree, nid, basis).weights.copy()
            cur = tree.parent_of(nid)
            while cur is not None:
                total += child_distance_histogram(tree, cur, basis).weights
                cur = tree.parent_of(cur)
            assert np.allclose(ancestor_context(tree, nid, basis).weights,
                               total, atol=1e-12)


def test_generative_targets_agree_with_direct_ops():
    tree = random_trees(1, seed=72, depth_min=5, depth_max=6, max_nodes=25)[0]
    basis = RadialBasisConfig.fit([tree], 8)
    rows, truth, context = generative_targets(tree, basis)
    for row, t_row, c_row in zip(rows, truth, context):
        nid = tree.nodes[row].id
        assert np.allclose(
            c_row, ancestor_context(tree, nid, basis).weights, atol=1e-12)
        own = child_distance_histogram(tree, nid, basis).weights
        assert np.allclose(t_row, own / own.sum(), atol=1e-12)


# -- EMD --------------------------------------------------------------------------

def test_emd_identical_is_zero():
    h = RadialHistogram(np.array([1.0, 2, 0, 0.5, 0, 3]))
    assert emd_1d(h, h, BASIS) == 0.0


def test_emd_one_bin_shift():
    p = np.zeros(6)
    q = np.zeros(6)
    p[0] = 1.0
    q[1] = 1.0
    delta = BASIS.mu[1] - BASIS.mu[0]
    assert emd_1d(p, q, BASIS) == pytest.approx(delta, abs=1e-12)


def test_emd_zero_mass_is_uniform():
    zero = np.zeros(6)
    uniform = np.full(6, 1 / 6)
    assert emd_1d(zero, uniform, BASIS) == pytest.approx(0.0, abs=1e-15)


def test_emd_matches_lp_oracle():
    rng = np.random.default_rng(4)
    for trial in range(120):
        k = int(rng.integers(2, 7))
        mu = np.sort(rng.uniform(0, 5, size=k))
        while np.any(np.diff(mu) < 1e-3):
            mu = np.sort(rng.uniform(0, 5, size=k))
        basis = RadialBasisConfig(mu=tuple(mu), gamma=1.0)
        p = rng.uniform(0, 1, size=k) * (rng.uniform(size=k) > 0.2)
        q = rng.uniform(0, 1, size=k) * (rng.uniform(size=k) > 0.2)
        got = emd_1d(p, q, basis)
        expect = emd_lp_oracle(p, q, mu)
        assert abs(got - expect) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=5, max_size=5),
       st.lists(st.floats(0.0, 10.0), min_size=5, max_size=5),
       st.lists(st.floats(0.0, 10.0), min_size=5, max_size=5))
def test_emd_is_a_metric(wa, wb, wc):
    basis = RadialBasisConfig.from_range(2.0, 5)
    a, b, c = (np.asarray(w) for w in (wa, wb, wc))
    dab = emd_1d(a, b, basis)
    dba = emd_1d(b, a, basis)
    assert dab >= 0
    assert dab == pytest.approx(dba, abs=1e-12)
    # identity of indiscernibles on normalized inputs
    if dab < 1e-12:
        assert np.allclose(_normalize_mass(a), _normalize_mass(b), atol=1e-9)
    # triangle inequality
    assert dab <= emd_1d(a, c, basis) + emd_1d(c, b, basis) + 1e-12


def test_emd_rows_matches_public_emd():
    rng = np.random.default_rng(9)
    pred = rng.dirichlet(np.ones(6), size=4)
    truth = rng.dirichlet(np.ones(6), size=4)
    rows = _emd_rows(ad.constant(pred), np.cumsum(truth, axis=-1), BASIS)
    for r in range(4):
        assert float(rows.value[r]) == pytest.approx(
            emd_1d(pred[r], truth[r], BASIS), abs=1e-12)


# -- generative loss --------------------------------------------------------------

def _small_model(tree, k=6, seed=0):
    cfg = EncoderConfig(num_layers=1, hidden_dim=3)
    return init_model(cfg, tree.attr_dim, seed=seed, head_out=2, gen_k=k)


def test_generative_loss_zero_when_prediction_equals_truth():
    tree = random_trees(1, seed=73, depth_min=4, depth_max=5, max_nodes=15)[0]
    basis = RadialBasisConfig.fit([tree], 6)
    rows, truth, _ = generative_targets(tree, basis)
    pred = ad.constant(truth)
    per_node = _emd_rows(pred, np.cumsum(truth, axis=-1), basis)
    assert float(ad.reduce_mean(per_node).value) == pytest.approx(0.0, abs=1e-12)


def test_generative_loss_single_node_tree():
    tree = make_tree([None], [(0, 0, 0)])
    params = _small_model(tree)
    hs, _ = encode(tree, params)
    result = generative_loss(tree, hs[-1], params, BASIS)
    assert result.empty
    assert float(result.loss.value) == 0.0
    assert result.num_nodes == 0


def test_generative_loss_positive_and_differentiable():
    tree = random_trees(1, seed=74, depth_min=4, depth_max=4, max_nodes=10)[0]
    basis = RadialBasisConfig.fit([tree], 6)
    params = _small_model(tree)

    def build():
        hs, _ = encode(tree, params)
        return generative_loss(tree, hs[-1], params, basis).loss

    assert float(build().value) > 0
    assert max_relative_grad_error(build, params.tensors) < 1e-4


def test_generative_loss_rigid_invariance():
    tree = random_trees(1, seed=75, depth_min=5, depth_max=6, max_nodes=20)[0]
    basis = RadialBasisConfig.fit([tree], 8)
    params = _small_model(tree, k=8, seed=3)

    def value(t):
        hs, _ = encode(t, params)
        return float(generative_loss(t, hs[-1], params, basis).loss.value)

    moved = apply_rigid(tree, random_rigid(11, translation=8.0))
    assert abs(value(tree) - value(moved)) < 1e-9


# -- order pairs and loss ------------------------------------------------------------

def test_sample_order_pairs_path_tree():
    tree = make_tree([None, 0, 1], [(0, 0, 0), (1, 0, 0), (2, 0.5, 0)])
    cfg = OrderLossConfig(pairs_per_tree=16)
    positives, negatives = sample_order_pairs(tree, cfg, seed=1)
    allowed = {(0, 1), (0, 2), (1, 2)}  # rows == ids here
    assert positives and set(positives) <= allowed
    # negatives: only non-descendant ordered pairs
    for a, b in negatives:
        assert (a, b) not in allowed and a != b


def test_sample_order_pairs_star_tree():
    tree = make_tree([None, 0, 0, 0],
                     [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)])
    cfg = OrderLossConfig(pairs_per_tree=32)
    positives, negatives = sample_order_pairs(tree, cfg, seed=2)
    assert set(positives) <= {(0, 1), (0, 2), (0, 3)}
    leaf_pairs = {(a, b) for a in (1, 2, 3) for b in (1, 2, 3) if a != b}
    reversed_pairs = {(a, 0) for a in (1, 2, 3)}
    assert set(negatives) <= leaf_pairs | reversed_pairs
    assert set(negatives) & reversed_pairs or set(negatives) & leaf_pairs


def test_sampled_positives_satisfy_reachability_oracle():
    for tree in random_trees(4, seed=76, depth_min=5, depth_max=7, max_nodes=40):
        cfg = OrderLossConfig(pairs_per_tree=64)
        positives, negatives = sample_order_pairs(tree, cfg, seed=3)

        def descendants(rid):
            out = set()
            stack = [tree.nodes[rid].id]
            while stack:
                for c in tree.children_of(stack.pop()):
                    out.add(tree.index_of(c))
                    stack.append(c)
            return out

        for a, d in positives:
            assert d in descendants(a)
        for a, b in negatives:
            assert b not in descendants(a)


def test_sample_order_pairs_deterministic():
    tree = random_trees(1, seed=77, depth_min=5, depth_max=6, max_nodes=30)[0]
    cfg = OrderLossConfig(pairs_per_tree=8)
    assert sample_order_pairs(tree, cfg, 5) == sample_order_pairs(tree, cfg, 5)
    assert sample_order_pairs(tree, cfg, 5) != sample_order_pairs(tree, cfg, 6)


def test_order_loss_hand_case():
    emb = ad.constant(np.array([[1.0, 0.0], [2.0, -1.0]]))
    res = order_loss(emb, [(0, 1)], [], OrderLossConfig())
    assert float(res.positive.value) == pytest.approx(1.0)  # max(0,1)+max(0,-1)
    assert float(res.total.value) == pytest.approx(1.0)


def test_order_loss_containment_is_zero():
    anc = np.array([[2.0, 3.0, 1.0]])
    desc = anc - np.array([[0.5, 0.0, 1.0]])  # componentwise below
    emb = ad.constant(np.vstack([anc, desc]))
    res = order_loss(emb, [(0, 1)], [], OrderLossConfig())
    assert float(res.positive.value) == 0.0


def test_order_loss_single_component_violation_positive():
    anc = np.array([[2.0, 3.0, 1.0]])
    for comp in range(3):
        desc = anc - 0.5
        desc[0, comp] = anc[0, comp] + 1e-3
        emb = ad.constant(np.vstack([anc, desc]))
        res = order_loss(emb, [(0, 1)], [], OrderLossConfig())
        assert float(res.positive.value) > 0


def test_order_loss_negative_beyond_margin_is_zero():
    emb = ad.constant(np.array([[0.0, 0.0], [2.0, 0.0]]))  # sq dist 4
    res = order_loss(emb, [], [(0, 1)], OrderLossConfig(margin=1.0))
    assert float(res.negative.value) == 0.0
    near = ad.constant(np.array([[0.0, 0.0], [0.5, 0.0]]))  # sq dist 0.25
    res2 = order_loss(near, [], [(0, 1)], OrderLossConfig(margin=1.0))
    assert float(res2.negative.value) == pytest.approx(0.75)


def test_order_loss_sqnorm_reduction():
    emb = ad.constant(np.array([[1.0, 0.0], [2.0, -1.0]]))
    res = order_loss(emb, [(0, 1)], [],
                     OrderLossConfig(reduction="sqnorm"))
    assert float(res.positive.value) == pytest.approx(1.0)  # 1^2 + 0^2


def test_order_violation_rate():
    emb = np.array([[1.0, 1.0], [0.5, 0.5], [2.0, 0.0]])
    # pair (0,1): no component violates; pair (0,2): one of two does
    assert order_violation_rate(emb, [(0, 1), (0, 2)]) == 0.25
    assert order_violation_rate(emb, []) == 0.0


# -- combined SSL loss ------------------------------------------------------------------

def test_ssl_loss_is_sum_of_terms():
    tree = random_trees(1, seed=78, depth_min=4, depth_max=5, max_nodes=15)[0]
    basis = RadialBasisConfig.fit([tree], 6)
    params = _small_model(tree, k=6, seed=4)
    res = ssl_loss(tree, params, basis, OrderLossConfig(pairs_per_tree=8), seed=9)
    assert float(res.total.value) == pytest.approx(
        float(res.generative.value) + float(res.order.value), abs=1e-12)


def test_ssl_loss_gradcheck():
    tree = random_trees(1, seed=79, depth_min=4, depth_max=4, max_nodes=10)[0]
    basis = RadialBasisConfig.fit([tree], 5)
    params = _small_model(tree, k=5, seed=5)

    def build():
        return ssl_loss(tree, params, basis,
                        OrderLossConfig(pairs_per_tree=6), seed=13).total

    assert max_relative_grad_error(build, params.tensors) < 1e-4


# -- supervised losses ---------------------------------------------------------------------

def test_cross_entropy_perfect_prediction():
    scores = ad.constant(np.array([-30.0, 30.0]))
    loss = supervised_loss(scores, 1, "classification")
    assert float(loss.value) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_formula():
    rng = np.random.default_rng(6)
    for _ in range(25):
        c = int(rng.integers(2, 5))
        logits = rng.normal(size=c) * 3
        label = int(rng.integers(c))
        got = float(supervised_loss(ad.constant(logits), label,
                                    "classification").value)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        assert got == pytest.approx(-math.log(probs[label]), abs=1e-12)


def test_regression_loss():
    assert float(supervised_loss(ad.constant([2.5]), 2.5, "regression").value) == 0.0
    rng = np.random.default_rng(7)
    for _ in range(25):
        pred, target = rng.normal(size=2) * 5
        got = float(supervised_loss(ad.constant([pred]), target, "regression").value)
        assert got == pytest.approx(abs(pred - target), abs=1e-12)


def test_supervised_loss_contracts():
    with pytest.raises(ContractError):
        supervised_loss(ad.constant([1.0, 2.0]), 5, "classification")
    with pytest.raises(ContractError):
        supervised_loss(ad.constant([1.0, 2.0]), 1.0, "regression")
    with pytest.raises(ContractError):
        supervised_loss(ad.constant([1.0]), 1, "ranking")


def test_supervised_gradcheck_through_encoder():
    tree = random_trees(1, seed=80, depth_min=4, depth_max=4, max_nodes=10)[0]
    params = _small_model(tree, seed=6)

    def build():
        _, vec = encode(tree, params)
        return supervised_loss(predict(vec, params, "classification"), 1,
                               "classification")

    assert max_relative_grad_error(build, params.tensors) < 1e-4
