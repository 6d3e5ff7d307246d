"""Self-supervised objectives (partial ordering + subtree growth) and
supervised losses.

The generative objective predicts, for every internal node, the radial-
basis histogram of its child distances from the node's embedding and the
accumulated histogram context of its ancestors; prediction and ground truth
are compared as unit-mass histograms under the 1-D Earth Mover's Distance.
The ordering objective penalizes descendant embeddings that escape the
componentwise "lower-left" region of their ancestor, and pushes unrelated
pairs at least a margin apart.  The combined self-supervised loss is the
plain sum of the two terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .encoder import ModelParams, TreeBatch, _gen_spec, encode
from .errors import ConfigError, ContractError
from .nn import mlp_forward, mlp_layers
from .tree import GeometricTree


@dataclass(frozen=True)
class RadialBasisConfig:
    """Gaussian radial bases: K centers ``mu`` with shared width ``gamma``."""

    mu: tuple[float, ...]
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        if len(self.mu) < 2:
            raise ConfigError("need at least 2 radial bases")
        if any(b <= a for a, b in zip(self.mu, self.mu[1:])):
            raise ConfigError("centers must be strictly increasing")
        if not (self.gamma > 0):
            raise ConfigError("gamma must be positive")

    @property
    def k(self) -> int:
        return len(self.mu)

    def centers(self) -> np.ndarray:
        return np.asarray(self.mu)

    def spacing(self) -> np.ndarray:
        """Ground distance between adjacent centers (K-1 gaps)."""
        c = self.centers()
        return c[1:] - c[:-1]

    def to_dict(self) -> dict:
        return {"mu": list(self.mu), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, obj: dict) -> "RadialBasisConfig":
        return cls(mu=tuple(obj["mu"]), gamma=float(obj["gamma"]))

    @classmethod
    def from_range(cls, d_max: float, k: int = 16) -> "RadialBasisConfig":
        """Evenly spaced centers on [0, d_max], width 1/(2*spacing^2)."""
        if not (d_max > 0) or k < 2:
            raise ConfigError("need d_max > 0 and k >= 2")
        mu = np.linspace(0.0, d_max, k)
        spacing = mu[1] - mu[0]
        return cls(mu=tuple(mu), gamma=1.0 / (2.0 * spacing * spacing))

    @classmethod
    def fit(cls, trees: Sequence[GeometricTree], k: int = 16) -> "RadialBasisConfig":
        """Centers spanning the 95th percentile of parent-child distances."""
        dists = []
        for tree in trees:
            for node in tree.nodes:
                if node.parent_id is not None:
                    dists.append(float(np.linalg.norm(
                        node.position - tree.node(node.parent_id).position)))
        if not dists:
            raise ConfigError("no edges to fit a radial basis to")
        return cls.from_range(float(np.percentile(dists, 95.0)), k)


@dataclass
class RadialHistogram:
    """Nonnegative per-basis weights (not normalized)."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise ContractError("histogram weights must be a flat vector")
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise ContractError("histogram weights must be finite and >= 0")


def rbf_expand(distances: Sequence[float], basis: RadialBasisConfig
               ) -> RadialHistogram:
    """weights[k] = sum_d exp(-gamma (d - mu_k)^2); empty input -> zeros."""
    d = np.asarray(list(distances), dtype=np.float64)
    if d.size == 0:
        return RadialHistogram(np.zeros(basis.k))
    diff = d[:, None] - basis.centers()[None, :]
    return RadialHistogram(np.exp(-basis.gamma * diff * diff).sum(axis=0))


def child_distances(tree: GeometricTree, node_id: int) -> list[float]:
    pos = tree.node(node_id).position
    return [float(np.linalg.norm(tree.node(c).position - pos))
            for c in tree.children_of(node_id)]


def child_distance_histogram(tree: GeometricTree, node_id: int,
                             basis: RadialBasisConfig) -> RadialHistogram:
    """RBF expansion of the node's child distances; leaves give zeros."""
    return rbf_expand(child_distances(tree, node_id), basis)


def ancestor_context(tree: GeometricTree, node_id: int,
                     basis: RadialBasisConfig) -> RadialHistogram:
    """Sum of child-distance histograms over the node and its ancestors."""
    total = child_distance_histogram(tree, node_id, basis).weights.copy()
    for anc in tree.ancestors_of(node_id):
        total += child_distance_histogram(tree, anc, basis).weights
    return RadialHistogram(total)


# -- Earth Mover's Distance ---------------------------------------------------

def _normalize_mass(w: np.ndarray) -> np.ndarray:
    """Unit-mass copy; an (exactly) empty histogram becomes uniform."""
    total = float(w.sum())
    if total <= 0.0:
        return np.full(w.shape, 1.0 / w.shape[-1])
    return w / total


def emd_1d(p: Union[RadialHistogram, np.ndarray],
           q: Union[RadialHistogram, np.ndarray],
           basis: RadialBasisConfig) -> float:
    """Optimal-transport cost between unit-mass histograms on the centers.

    With ground distance |mu_a - mu_b| this is the CDF formula:
    sum_k |CDF_p(k) - CDF_q(k)| * (mu_{k+1} - mu_k).
    """
    pw = p.weights if isinstance(p, RadialHistogram) else np.asarray(p, dtype=np.float64)
    qw = q.weights if isinstance(q, RadialHistogram) else np.asarray(q, dtype=np.float64)
    if pw.shape != (basis.k,) or qw.shape != (basis.k,):
        raise ContractError("histogram length must match the basis size")
    cdf_diff = np.cumsum(_normalize_mass(pw) - _normalize_mass(qw))
    return float(np.abs(cdf_diff[:-1]) @ basis.spacing())


def _emd_rows(pred: ad.Tensor, truth_cdf: np.ndarray,
              basis: RadialBasisConfig) -> ad.Tensor:
    """Differentiable row-wise EMD of unit-mass predictions vs constants.

    ``pred`` rows must already be simplices (softmax output).  The final CDF
    bin carries zero ground distance, so no slicing is needed.
    """
    cdf = ad.cumsum(pred, axis=-1)
    dmu = np.zeros(basis.k)
    dmu[:-1] = basis.spacing()
    costs = ad.mul(ad.abs_(ad.sub(cdf, ad.constant(truth_cdf))),
                   ad.constant(dmu))
    return ad.reduce_sum(costs, axis=-1)


# -- generative (subtree growth) objective -------------------------------------

@dataclass
class GenerativeLossResult:
    loss: ad.Tensor
    num_nodes: int
    empty: bool  # True when the tree has no internal nodes (loss is 0)


def generative_targets(tree: GeometricTree, basis: RadialBasisConfig
                       ) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Internal-node rows, normalized child histograms, ancestor contexts.

    Contexts accumulate top-down (context = own histogram + parent context),
    which equals the direct ancestor walk in O(N*K).
    """
    own: dict[int, np.ndarray] = {}
    ctx: dict[int, np.ndarray] = {}
    for nid in tree.bfs_ids():
        own[nid] = child_distance_histogram(tree, nid, basis).weights
        parent = tree.parent_of(nid)
        ctx[nid] = own[nid] + (ctx[parent] if parent is not None else 0.0)

    rows, truth, context = [], [], []
    for node in tree.nodes:
        if not tree.children_of(node.id):
            continue
        rows.append(tree.index_of(node.id))
        truth.append(_normalize_mass(own[node.id]))
        context.append(ctx[node.id])
    if not rows:
        return [], np.zeros((0, basis.k)), np.zeros((0, basis.k))
    return rows, np.stack(truth), np.stack(context)


def generative_predictions(node_embeddings: ad.Tensor, context: np.ndarray,
                           rows: Sequence[int], params: ModelParams
                           ) -> ad.Tensor:
    """Per-node predicted child-distance distributions (rows on the simplex)."""
    if params.gen_k is None:
        raise ContractError("model has no generative head")
    h = ad.gather_rows(node_embeddings, np.asarray(rows, dtype=np.int64))
    inputs = ad.concat([h, ad.constant(context)], axis=1)
    gen = mlp_layers(params.tensors, "gen", 2)
    logits = mlp_forward(_gen_spec(params.config, params.gen_k), gen, inputs)
    return ad.softmax(logits, axis=-1)


def generative_loss(tree: GeometricTree, node_embeddings: ad.Tensor,
                    params: ModelParams, basis: RadialBasisConfig,
                    targets: Optional[tuple] = None) -> GenerativeLossResult:
    """Mean EMD between predicted and observed child-distance histograms.

    ``targets`` may pass a precomputed ``generative_targets`` result (they
    are constants of the tree, so training loops cache them).
    """
    rows, truth, context = targets if targets is not None \
        else generative_targets(tree, basis)
    if not len(rows):
        return GenerativeLossResult(ad.constant(0.0), 0, True)
    pred = generative_predictions(node_embeddings, context, rows, params)
    truth_cdf = np.cumsum(truth, axis=-1)
    per_node = _emd_rows(pred, truth_cdf, basis)
    return GenerativeLossResult(ad.reduce_mean(per_node), len(rows), False)


# -- partial ordering objective -------------------------------------------------

@dataclass(frozen=True)
class OrderLossConfig:
    margin: float = 1.0
    pairs_per_tree: int = 32
    reduction: str = "sum"  # positive-pair hinge reduction: "sum" | "sqnorm"

    def __post_init__(self):
        if not (self.margin > 0):
            raise ConfigError("margin must be positive")
        if self.pairs_per_tree < 1:
            raise ConfigError("pairs_per_tree must be >= 1")
        if self.reduction not in ("sum", "sqnorm"):
            raise ConfigError("reduction must be 'sum' or 'sqnorm'")

    def to_dict(self) -> dict:
        return {"margin": self.margin, "pairs_per_tree": self.pairs_per_tree,
                "reduction": self.reduction}

    @classmethod
    def from_dict(cls, obj: dict) -> "OrderLossConfig":
        return cls(margin=float(obj.get("margin", 1.0)),
                   pairs_per_tree=int(obj.get("pairs_per_tree", 32)),
                   reduction=obj.get("reduction", "sum"))


def sample_order_pairs(tree: GeometricTree, config: OrderLossConfig, seed: int
                       ) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Sample (ancestor, descendant) positives and unrelated negatives.

    Pairs are ROW indices into the tree's node order.  Positives are uniform
    over all proper ancestor/descendant pairs (choose the descendant with
    probability proportional to its depth, then an ancestor uniformly along
    its chain); negatives are rejection-sampled uniformly over ordered pairs
    (i, j), i != j, where j is not a descendant of i.
    """
    if len(tree) < 2:
        raise ContractError("order pairs need at least 2 nodes")
    rng = np.random.default_rng(seed)
    m = config.pairs_per_tree
    depths = tree.depths().astype(np.float64)
    ids = tree.ids()

    total_pairs = depths.sum()
    positives: list[tuple[int, int]] = []
    if total_pairs > 0:
        probs = depths / total_pairs
        desc_rows = rng.choice(len(ids), size=m, p=probs)
        for row in desc_rows:
            chain = tree.ancestors_of(ids[row])
            anc = chain[rng.integers(len(chain))]
            positives.append((tree.index_of(anc), int(row)))

    negatives: list[tuple[int, int]] = []
    guard = 0
    while len(negatives) < m and guard < 200 * m:
        guard += 1
        a, b = rng.integers(len(ids), size=2)
        if a == b:
            continue
        if tree.is_ancestor(ids[a], ids[b]):
            continue
        negatives.append((int(a), int(b)))
    return positives, negatives


@dataclass
class OrderLossResult:
    total: ad.Tensor
    positive: ad.Tensor
    negative: ad.Tensor


def order_loss(embeddings: ad.Tensor,
               positives: Sequence[tuple[int, int]],
               negatives: Sequence[tuple[int, int]],
               config: OrderLossConfig) -> OrderLossResult:
    """Max-margin partial ordering loss over embedding row pairs.

    Positive pairs (ancestor a, descendant d) pay the componentwise hinge
    max(0, h_d - h_a); negative pairs pay max(0, margin - ||h_a - h_d||^2).
    The total is the sum of both terms divided by the pair count.
    """
    zero = ad.constant(0.0)
    pos_term = zero
    if positives:
        anc = np.array([a for a, _ in positives], dtype=np.int64)
        desc = np.array([d for _, d in positives], dtype=np.int64)
        gap = ad.relu(ad.sub(ad.gather_rows(embeddings, desc),
                             ad.gather_rows(embeddings, anc)))
        if config.reduction == "sqnorm":
            gap = ad.mul(gap, gap)
        pos_term = ad.reduce_sum(gap)
    neg_term = zero
    if negatives:
        a = np.array([i for i, _ in negatives], dtype=np.int64)
        b = np.array([j for _, j in negatives], dtype=np.int64)
        diff = ad.sub(ad.gather_rows(embeddings, a), ad.gather_rows(embeddings, b))
        sq = ad.reduce_sum(ad.mul(diff, diff), axis=1)
        neg_term = ad.reduce_sum(ad.relu(ad.sub(config.margin, sq)))
    count = max(len(positives) + len(negatives), 1)
    total = ad.mul(ad.add(pos_term, neg_term), 1.0 / count)
    return OrderLossResult(total, pos_term, neg_term)


def order_violation_rate(embeddings: np.ndarray,
                         positives: Sequence[tuple[int, int]]) -> float:
    """Fraction of (pair, component) slots breaking the containment.

    Averaged over components rather than whole pairs: with wide embeddings
    the all-components event is too rare to move early in training, while
    this fraction tracks ordering progress smoothly.
    """
    if not positives:
        return 0.0
    fracs = [float((embeddings[d] > embeddings[a]).mean())
             for a, d in positives]
    return float(np.mean(fracs))


# -- combined SSL loss -----------------------------------------------------------

@dataclass
class SslLossResult:
    total: ad.Tensor
    generative: ad.Tensor
    order: ad.Tensor
    order_positive: ad.Tensor
    order_negative: ad.Tensor
    generative_empty: bool


def ssl_loss(tree: GeometricTree, params: ModelParams,
             basis: RadialBasisConfig, order_config: OrderLossConfig,
             seed: int, batch: Optional[TreeBatch] = None,
             targets: Optional[tuple] = None,
             generative_weight: float = 1.0,
             order_weight: float = 1.0) -> SslLossResult:
    """Subtree-growth plus partial-ordering loss (unit weights by default)."""
    hs, _ = encode(batch if batch is not None else tree, params)
    final = hs[-1]
    gen = generative_loss(tree, final, params, basis, targets=targets)
    if len(tree) >= 2:
        pos, neg = sample_order_pairs(tree, order_config, seed)
        order = order_loss(final, pos, neg, order_config)
    else:
        zero = ad.constant(0.0)
        order = OrderLossResult(zero, zero, zero)
    total = ad.add(ad.mul(gen.loss, generative_weight),
                   ad.mul(order.total, order_weight))
    return SslLossResult(total, gen.loss, order.total,
                         order.positive, order.negative, gen.empty)


# -- supervised losses ------------------------------------------------------------

def supervised_loss(scores: ad.Tensor, target, task_kind: str) -> ad.Tensor:
    """Cross-entropy for classification, absolute error for regression."""
    if task_kind == "classification":
        if scores.value.ndim != 1 or scores.value.shape[0] < 2:
            raise ContractError("classification expects a logit vector")
        label = int(target)
        if not 0 <= label < scores.value.shape[0]:
            raise ContractError(
                f"label {label} out of range for {scores.value.shape[0]} classes")
        onehot = np.zeros(scores.value.shape[0])
        onehot[label] = 1.0
        picked = ad.matmul(ad.constant(onehot), scores)
        return ad.sub(ad.logsumexp(scores), picked)
    if task_kind == "regression":
        if scores.value.size != 1:
            raise ContractError("regression expects a single score")
        return ad.reduce_mean(ad.abs_(ad.sub(scores, float(target))))
    raise ContractError(f"unknown task_kind {task_kind!r}")
