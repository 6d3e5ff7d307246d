import numpy as np
import pytest

from gtmp.encoder import EncoderConfig, init_model, encode
from gtmp.errors import CheckpointError, ConfigError, MetricError
from gtmp.objectives import OrderLossConfig, sample_order_pairs, order_violation_rate
from gtmp.synthetic import GeneratorConfig, generate_synthetic
from gtmp.train import (
    LrSchedule,
    TrainConfig,
    auc,
    bench_scaling,
    finetune,
    invariance_test,
    mae,
    pretrain_ssl,
    split_indices,
    train_supervised,
)

SMALL_ENC = EncoderConfig(num_layers=2, hidden_dim=16)


def small_config(**kw):
    base = dict(epochs=10, seed=0, split_seed=77, encoder=SMALL_ENC,
                batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


def test_split_indices_disjoint_cover_deterministic():
    train, val, test = split_indices(200, (0.8, 0.1, 0.1), seed=3)
    assert len(train) == 160 and len(val) == 20 and len(test) == 20
    allidx = np.concatenate([train, val, test])
    assert sorted(allidx) == list(range(200))
    train2, val2, test2 = split_indices(200, (0.8, 0.1, 0.1), seed=3)
    assert np.array_equal(train, train2)
    assert not np.array_equal(train, split_indices(200, (0.8, 0.1, 0.1), 4)[0])


def test_auc_trivia():
    assert auc([0.1, 0.4, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.4, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1])


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        wins = half = total = 0
        for i in np.where(labels == 1)[0]:
            for j in np.where(labels == 0)[0]:
                total += 1
                if scores[i] > scores[j]:
                    wins += 1
                elif scores[i] == scores[j]:
                    half += 1
        expect = (wins + 0.5 * half) / total
        assert auc(scores, labels) == pytest.approx(expect, abs=1e-12)


def test_mae_trivia_and_oracle():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([2.0, 3.0], [1.0, 2.0]) == 1.0
    rng = np.random.default_rng(6)
    p, t = rng.normal(size=50), rng.normal(size=50)
    assert mae(p, t) == pytest.approx(float(np.abs(p - t).mean()), abs=1e-12)
    with pytest.raises(MetricError):
        mae([1.0], [1.0, 2.0])


def test_lr_schedule_constant_validation_decays():
    sched = LrSchedule(lr=1e-3, decay_ratio=0.9, patience=10)
    lr_seen = [sched.update(1.0) for _ in range(11)]
    # first update sets best; ten stalls later the rate drops once
    assert lr_seen[:10] == [1e-3] * 10
    assert lr_seen[10] == pytest.approx(9e-4)


def test_lr_schedule_improvement_resets_stall():
    sched = LrSchedule(lr=1.0, decay_ratio=0.5, patience=3)
    for loss in (5.0, 4.0, 4.0, 4.0, 3.0, 3.0, 3.0):
        sched.update(loss)
    assert sched.lr == 1.0  # stall never reached patience
    sched.update(3.0)
    assert sched.lr == 0.5


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(split_ratios=(0.9, 0.1, 0.1))
    with pytest.raises(ConfigError):
        TrainConfig(label_fraction=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(task_kind="ranking")
    cfg = TrainConfig()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_train_supervised_loss_decreases(classification_dataset):
    config = small_config(epochs=10)
    params, report = train_supervised(classification_dataset, config)
    losses = report.train_losses
    assert len(losses) == 10
    for a, b in zip(losses, losses[1:]):
        assert b < a  # smooth separable task: strict decrease early on
    assert report.metric_name == "auc"
    assert report.test_metric is not None


def test_train_supervised_determinism(classification_dataset):
    config = small_config(epochs=4)
    _, r1 = train_supervised(classification_dataset, config)
    _, r2 = train_supervised(classification_dataset, config)
    assert r1.train_losses == r2.train_losses
    assert r1.val_losses == r2.val_losses
    assert r1.test_metric == r2.test_metric
    _, r3 = train_supervised(classification_dataset, small_config(epochs=4, seed=9))
    assert r3.train_losses != r1.train_losses


def test_lr_history_consistent_with_schedule(classification_dataset):
    config = small_config(epochs=12, patience=2, lr=5e-3)
    _, report = train_supervised(classification_dataset, config)
    sched = LrSchedule(config.lr, config.decay_ratio, config.patience)
    expect, lr = [], config.lr
    for val in report.val_losses:
        expect.append(lr)
        lr = sched.update(val)
    assert report.lr_history == expect


def test_train_supervised_empty_split_raises():
    data = [(t, tg["class"]) for t, tg in generate_synthetic(
        GeneratorConfig(count=5, depth_min=4, depth_max=5, max_nodes=15), 0)]
    with pytest.raises(ConfigError):
        train_supervised(data, small_config())


def test_label_fraction_shrinks_train_split(classification_dataset):
    config = small_config(epochs=2, label_fraction=0.25)
    _, report = train_supervised(classification_dataset, config)
    full = int(len(classification_dataset) * 0.8)
    assert report.sizes["train"] == max(1, round(full * 0.25))


def test_regression_training_smoke():
    data = generate_synthetic(
        GeneratorConfig(count=30, task="regression", depth_min=5, depth_max=6,
                        max_nodes=25), seed=3)
    dataset = [(t, tg["diameter"]) for t, tg in data]
    config = small_config(epochs=4, task_kind="regression")
    _, report = train_supervised(dataset, config)
    assert report.metric_name == "mae"
    assert report.test_metric >= 0


def test_pretrain_ssl_components_decrease_and_strip_heads():
    trees = [t for t, _ in generate_synthetic(
        GeneratorConfig(count=50, depth_min=6, depth_max=8, max_nodes=30), 5)]
    config = small_config(epochs=12, mode="pretrain", basis_k=8)
    encoder, report = pretrain_ssl(trees, config)
    gen = report.extra["generative_curve"]
    ordc = report.extra["order_curve"]
    assert gen[-1] < gen[0]
    assert ordc[-1] < ordc[0]
    names = set(encoder.tensors)
    assert all(n.startswith(("embed.", "layer")) for n in names)
    assert encoder.head_out is None and encoder.gen_k is None


def test_pretrain_reduces_order_violations():
    trees = [t for t, _ in generate_synthetic(
        GeneratorConfig(count=40, depth_min=6, depth_max=8, max_nodes=30), 6)]
    config = small_config(epochs=12, mode="pretrain", basis_k=8, lr=3e-3)
    encoder, _ = pretrain_ssl(trees, config)
    held_out = [t for t, _ in generate_synthetic(
        GeneratorConfig(count=10, depth_min=6, depth_max=8, max_nodes=30), 99)]
    fresh = init_model(SMALL_ENC, 0, seed=config.seed)

    def rate(params):
        rates = []
        for idx, tree in enumerate(held_out):
            pos, _ = sample_order_pairs(tree, OrderLossConfig(pairs_per_tree=32),
                                        seed=idx)
            hs, _ = encode(tree, params)
            rates.append(order_violation_rate(hs[-1].value, pos))
        return float(np.mean(rates))

    trained = init_model(SMALL_ENC, 0, seed=config.seed)
    trained.load_values(encoder.encoder_values())
    assert rate(trained) < rate(fresh)


def test_pretrain_deterministic():
    trees = [t for t, _ in generate_synthetic(
        GeneratorConfig(count=20, depth_min=5, depth_max=6, max_nodes=20), 7)]
    config = small_config(epochs=3, mode="pretrain", basis_k=6)
    _, r1 = pretrain_ssl(trees, config)
    _, r2 = pretrain_ssl(trees, config)
    assert r1.train_losses == r2.train_losses
    assert r1.val_losses == r2.val_losses


def test_pretrain_rejects_edgeless_dataset():
    from conftest import make_tree
    singles = [make_tree([None], [(float(i), 0, 0)]) for i in range(10)]
    with pytest.raises(ConfigError):
        pretrain_ssl(singles, small_config(mode="pretrain"))


def test_finetune_pathway(classification_dataset):
    trees = [t for t, _ in classification_dataset]
    encoder, _ = pretrain_ssl(trees, small_config(epochs=3, mode="pretrain",
                                                  basis_k=6))
    config = small_config(epochs=3, mode="finetune")
    params, report = finetune(encoder, classification_dataset, config)
    assert report.test_metric is not None
    assert "head.0.W" in params.tensors


def test_finetune_frozen_encoder_keeps_weights(classification_dataset):
    trees = [t for t, _ in classification_dataset]
    encoder, _ = pretrain_ssl(trees, small_config(epochs=2, mode="pretrain",
                                                  basis_k=6))
    config = small_config(epochs=3, mode="finetune", freeze_encoder=True)
    params, _ = finetune(encoder, classification_dataset, config)
    for name, value in encoder.encoder_values().items():
        assert np.array_equal(params.tensors[name].value, value)


def test_finetune_transfers_across_datasets(classification_dataset):
    # pretrain on one dataset, finetune on a differently seeded one
    source = [t for t, _ in generate_synthetic(
        GeneratorConfig(count=30, depth_min=5, depth_max=6, max_nodes=30), 555)]
    encoder, _ = pretrain_ssl(source, small_config(epochs=2, mode="pretrain",
                                                   basis_k=6))
    config = small_config(epochs=2, mode="finetune")
    _, report = finetune(encoder, classification_dataset, config)
    assert report.test_metric is not None


def test_head_warmup_freezes_encoder_during_warmup(classification_dataset):
    trees = [t for t, _ in classification_dataset]
    encoder, _ = pretrain_ssl(trees, small_config(epochs=2, mode="pretrain",
                                                  basis_k=6))
    # run consisting entirely of warmup epochs: encoder never moves
    config = small_config(epochs=3, mode="finetune", head_warmup_epochs=3)
    params, _ = finetune(encoder, classification_dataset, config)
    for name, value in encoder.encoder_values().items():
        assert np.array_equal(params.tensors[name].value, value)
    # after the warmup window the encoder trains again
    config2 = small_config(epochs=6, mode="finetune", head_warmup_epochs=1)
    params2, report2 = finetune(encoder, classification_dataset, config2)
    moved = any(
        not np.array_equal(params2.tensors[n].value, v)
        for n, v in encoder.encoder_values().items())
    assert moved or report2.best_epoch == 0


def test_finetune_config_mismatch(classification_dataset):
    trees = [t for t, _ in classification_dataset]
    encoder, _ = pretrain_ssl(trees, small_config(epochs=2, mode="pretrain",
                                                  basis_k=6))
    bad = small_config(epochs=2, encoder=EncoderConfig(num_layers=1,
                                                       hidden_dim=16))
    with pytest.raises(CheckpointError):
        finetune(encoder, classification_dataset, bad)


def test_invariance_identity_is_zero(classification_dataset):
    params = init_model(SMALL_ENC, 0, seed=1, head_out=2)
    report = invariance_test(params, classification_dataset[:6],
                             n_transforms=1, seed=0,
                             rotation_magnitudes=[0.0],
                             translation_magnitudes=[0.0])
    assert report.max_deviation == 0.0


def test_invariance_trained_model_flat(classification_dataset):
    config = small_config(epochs=3)
    params, _ = train_supervised(classification_dataset, config)
    report = invariance_test(params, classification_dataset[:8],
                             n_transforms=2, seed=1)
    assert report.max_deviation < 1e-6
    mags = {(r["kind"], r["magnitude"]) for r in report.rows}
    assert ("rotation", 0.0) in mags
    aucs = [r["metric"] for r in report.rows]
    assert all(a is not None for a in aucs)


def test_invariance_negative_control_detects_leak(classification_dataset):
    params = init_model(SMALL_ENC, 0, seed=1, head_out=2)
    from gtmp.encoder import score_tree

    def leaky(tree):
        return score_tree(tree, params, "classification") + \
            float(tree.positions().sum())

    report = invariance_test(None, classification_dataset[:6],
                             n_transforms=1, seed=2, score_fn=leaky)
    assert report.max_deviation > 1e-3


def test_bench_scaling_smoke():
    config = TrainConfig(encoder=EncoderConfig(num_layers=1, hidden_dim=8))
    report = bench_scaling([100, 200, 400], trees_per_point=1, config=config,
                           seed=0)
    assert [r["n_nodes"] for r in report.rows] == [100, 200, 400]
    assert all(r["seconds_mean"] > 0 for r in report.rows)
    assert -1.0 <= report.pearson_r <= 1.0
    with pytest.raises(ConfigError):
        bench_scaling([400, 100], 1, config, 0)


def test_bench_doubling_trees_doubles_time():
    config = TrainConfig(encoder=EncoderConfig(num_layers=2, hidden_dim=32))
    one = bench_scaling([800, 1600], trees_per_point=2, config=config, seed=0,
                        repeats=3)
    two = bench_scaling([800, 1600], trees_per_point=4, config=config, seed=0,
                        repeats=3)
    t1 = sum(r["seconds_mean"] for r in one.rows)
    t2 = sum(r["seconds_mean"] for r in two.rows)
    assert 1.4 <= t2 / t1 <= 2.6  # doubling the trees doubles the epoch +-30%
