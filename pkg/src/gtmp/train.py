"""Training loops, metrics, the invariance robustness sweep, and the
linear-scaling benchmark.

Every run is a pure function of (dataset, config): parameter init, splits,
shuffling, and pair sampling all derive from explicit seeds, so repeated
runs reproduce metrics bit-exactly.  Learning-rate decay follows the
validation-stall rule: when the validation loss has not improved for
``patience`` consecutive epochs, the rate is multiplied by ``decay_ratio``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .encoder import (
    EncoderConfig,
    ModelParams,
    TreeBatch,
    decision_score,
    encode,
    init_model,
    predict,
)
from .errors import CheckpointError, ConfigError, ContractError, MetricError
from .geometry import apply_rigid, random_rigid
from .nn import AdamState, adam_step, grads_by_name
from .objectives import (
    OrderLossConfig,
    RadialBasisConfig,
    generative_targets,
    sample_order_pairs,
    order_violation_rate,
    ssl_loss,
    supervised_loss,
)
from .synthetic import generate_sized_tree
from .tree import GeometricTree

Dataset = Sequence[tuple[GeometricTree, Union[int, float]]]

MODES = ("supervised", "pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    decay_ratio: float = 0.9
    patience: int = 10
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    split_seed: Optional[int] = None
    task_kind: str = "classification"
    mode: str = "supervised"
    label_fraction: float = 1.0
    freeze_encoder: bool = False
    # Finetune protocol: keep the encoder frozen for this many initial
    # epochs so a fresh head aligns before gradients reach pretrained
    # weights.  0 disables the warmup.
    head_warmup_epochs: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    order: OrderLossConfig = field(default_factory=OrderLossConfig)
    basis: Optional[RadialBasisConfig] = None  # None: fit on the train split
    basis_k: int = 16

    def __post_init__(self):
        object.__setattr__(self, "split_ratios",
                           tuple(float(r) for r in self.split_ratios))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (self.lr >= 0):
            raise ConfigError("lr must be >= 0")
        if not (0 < self.decay_ratio <= 1):
            raise ConfigError("decay_ratio must be in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise ConfigError("split_ratios must be three positive reals")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split_ratios must sum to 1")
        if self.task_kind not in ("classification", "regression"):
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not (0 < self.label_fraction <= 1):
            raise ConfigError("label_fraction must be in (0, 1]")
        if self.head_warmup_epochs < 0:
            raise ConfigError("head_warmup_epochs must be >= 0")
        if self.basis_k < 2:
            raise ConfigError("basis_k must be >= 2")

    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def to_dict(self) -> dict:
        out = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "decay_ratio": self.decay_ratio,
            "patience": self.patience,
            "split_ratios": list(self.split_ratios),
            "seed": self.seed,
            "split_seed": self.split_seed,
            "task_kind": self.task_kind,
            "mode": self.mode,
            "label_fraction": self.label_fraction,
            "freeze_encoder": self.freeze_encoder,
            "head_warmup_epochs": self.head_warmup_epochs,
            "encoder": self.encoder.to_dict(),
            "order": self.order.to_dict(),
            "basis": self.basis.to_dict() if self.basis else None,
            "basis_k": self.basis_k,
        }
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        if "encoder" in kwargs and kwargs["encoder"] is not None:
            kwargs["encoder"] = EncoderConfig.from_dict(kwargs["encoder"])
        if "order" in kwargs and kwargs["order"] is not None:
            kwargs["order"] = OrderLossConfig.from_dict(kwargs["order"])
        if kwargs.get("basis") is not None:
            kwargs["basis"] = RadialBasisConfig.from_dict(kwargs["basis"])
        if "split_ratios" in kwargs:
            kwargs["split_ratios"] = tuple(kwargs["split_ratios"])
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in kwargs.items() if k in known})


@dataclass
class RunReport:
    mode: str
    seed: int
    config: dict
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    metric_name: Optional[str] = None
    test_metric: Optional[float] = None
    sizes: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "lr_history": self.lr_history,
            "epoch_seconds": self.epoch_seconds,
            "best_epoch": self.best_epoch,
            "metric_name": self.metric_name,
            "test_metric": self.test_metric,
            "sizes": self.sizes,
            "extra": self.extra,
        }


class LrSchedule:
    """Stall-triggered decay: lr *= ratio after `patience` epochs without a
    strictly better validation loss."""

    def __init__(self, lr: float, decay_ratio: float, patience: int):
        self.lr = lr
        self.decay_ratio = decay_ratio
        self.patience = patience
        self.best = np.inf
        self.stall = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr *= self.decay_ratio
                self.stall = 0
        return self.lr


def split_indices(n: int, ratios: Sequence[float], seed: int
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic disjoint train/val/test index split covering 0..n-1."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


# -- metrics -------------------------------------------------------------------

def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with tie correction (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError("scores and labels must have equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC requires both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mae(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise MetricError("preds and targets must have equal length")
    return float(np.abs(p - t).mean())


# -- shared supervised machinery -------------------------------------------------

def _infer_head_out(dataset: Dataset, task_kind: str) -> int:
    if task_kind == "regression":
        return 1
    labels = {int(t) for _, t in dataset}
    return max(2, max(labels) + 1)


def _check_attr_dim(dataset: Sequence[GeometricTree]) -> int:
    dims = {t.attr_dim for t in dataset}
    if len(dims) != 1:
        raise ContractError(f"trees disagree on attr width: {sorted(dims)}")
    return dims.pop()


def _tree_scores(batches: Sequence[TreeBatch], params: ModelParams,
                 task_kind: str) -> np.ndarray:
    out = np.zeros(len(batches))
    for idx, batch in enumerate(batches):
        _, vec = encode(batch, params)
        out[idx] = decision_score(predict(vec, params, task_kind).value, task_kind)
    return out


def _supervised_epoch(params: ModelParams, batches, targets, train_idx,
                      task_kind, lr, batch_size, state, rng,
                      trainable: Optional[set] = None) -> float:
    order = rng.permutation(train_idx)
    losses = []
    for start in range(0, len(order), batch_size):
        group = order[start:start + batch_size]
        acc: dict[str, np.ndarray] = {}
        for idx in group:
            _, vec = encode(batches[idx], params)
            loss = supervised_loss(predict(vec, params, task_kind),
                                   targets[idx], task_kind)
            losses.append(float(loss.value))
            for name, g in grads_by_name(params.tensors,
                                         ad.backward(loss)).items():
                if trainable is not None and name not in trainable:
                    continue
                acc[name] = acc.get(name, 0.0) + g
        for name in acc:
            acc[name] /= len(group)
        step_params = {n: params.tensors[n] for n in
                       (trainable if trainable is not None else params.tensors)}
        adam_step(step_params, acc, state, lr)
    return float(np.mean(losses)) if losses else 0.0


def _supervised_eval(params: ModelParams, batches, targets, idx, task_kind
                     ) -> float:
    losses = []
    for i in idx:
        _, vec = encode(batches[i], params)
        loss = supervised_loss(predict(vec, params, task_kind),
                               targets[i], task_kind)
        losses.append(float(loss.value))
    return float(np.mean(losses)) if losses else 0.0


def _test_metric(params: ModelParams, batches, targets, test_idx, task_kind
                 ) -> tuple[str, float]:
    scores = _tree_scores([batches[i] for i in test_idx], params, task_kind)
    t = [targets[i] for i in test_idx]
    if task_kind == "classification":
        return "auc", auc(scores, [int(v) for v in t])
    return "mae", mae(scores, [float(v) for v in t])


def _run_supervised(dataset: Dataset, config: TrainConfig,
                    params: ModelParams,
                    trainable: Optional[set] = None
                    ) -> tuple[ModelParams, RunReport]:
    trees = [t for t, _ in dataset]
    targets = [v for _, v in dataset]
    train_idx, val_idx, test_idx = split_indices(
        len(dataset), config.split_ratios, config.effective_split_seed())
    if min(len(train_idx), len(val_idx), len(test_idx)) == 0:
        raise ConfigError("every split must be non-empty")
    if config.label_fraction < 1.0:
        keep = max(1, int(round(config.label_fraction * len(train_idx))))
        train_idx = train_idx[:keep]

    batches = [TreeBatch(t) for t in trees]
    rng = np.random.default_rng(config.seed + 1)
    state = AdamState.for_params(params.tensors)
    schedule = LrSchedule(config.lr, config.decay_ratio, config.patience)
    report = RunReport(mode=config.mode, seed=config.seed,
                       config=config.to_dict(),
                       sizes={"train": len(train_idx), "val": len(val_idx),
                              "test": len(test_idx)})

    head_names = {n for n in params.tensors if n.startswith("head")}
    best_val, best_params = np.inf, params.copy()
    lr = schedule.lr
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        epoch_trainable = trainable
        if epoch < config.head_warmup_epochs:
            epoch_trainable = head_names if trainable is None \
                else trainable & head_names
        train_loss = _supervised_epoch(
            params, batches, targets, train_idx, config.task_kind,
            lr, config.batch_size, state, rng, epoch_trainable)
        val_loss = _supervised_eval(params, batches, targets, val_idx,
                                    config.task_kind)
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        report.lr_history.append(lr)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            report.best_epoch = epoch
        lr = schedule.update(val_loss)

    name, value = _test_metric(best_params, batches, targets, test_idx,
                               config.task_kind)
    report.metric_name, report.test_metric = name, value
    return best_params, report


def train_supervised(dataset: Dataset, config: TrainConfig
                     ) -> tuple[ModelParams, RunReport]:
    """Minibatch Adam on the supervised loss; returns the best-validation
    checkpoint and the run report."""
    if not dataset:
        raise ConfigError("dataset is empty")
    attr_dim = _check_attr_dim([t for t, _ in dataset])
    head_out = _infer_head_out(dataset, config.task_kind)
    params = init_model(config.encoder, attr_dim, config.seed,
                        head_out=head_out)
    return _run_supervised(dataset, config, params)


# -- self-supervised pretraining ---------------------------------------------------

def pretrain_ssl(trees: Sequence[GeometricTree], config: TrainConfig
                 ) -> tuple[ModelParams, RunReport]:
    """Optimize the combined SSL loss; returns encoder weights only."""
    trees = [t[0] if isinstance(t, tuple) else t for t in trees]
    if not trees:
        raise ConfigError("dataset is empty")
    if all(len(t) < 2 for t in trees):
        raise ConfigError("dataset has no edges: SSL objectives are vacuous")
    attr_dim = _check_attr_dim(trees)

    train_idx, val_idx, test_idx = split_indices(
        len(trees), config.split_ratios, config.effective_split_seed())
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigError("train and validation splits must be non-empty")

    basis = config.basis or RadialBasisConfig.fit(
        [trees[i] for i in train_idx], config.basis_k)
    params = init_model(config.encoder, attr_dim, config.seed,
                        gen_k=basis.k)
    batches = [TreeBatch(t) for t in trees]
    targets = [generative_targets(t, basis) for t in trees]

    rng = np.random.default_rng(config.seed + 1)
    state = AdamState.for_params(params.tensors)
    schedule = LrSchedule(config.lr, config.decay_ratio, config.patience)
    report = RunReport(mode="pretrain", seed=config.seed,
                       config=config.to_dict(),
                       sizes={"train": len(train_idx), "val": len(val_idx),
                              "test": len(test_idx)})
    report.extra["basis"] = basis.to_dict()
    gen_curve, order_curve = [], []

    def tree_loss(idx: int, pair_seed: int):
        return ssl_loss(trees[idx], params, basis, config.order,
                        seed=pair_seed, batch=batches[idx],
                        targets=targets[idx])

    best_val, best_params = np.inf, params.copy()
    lr = schedule.lr
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        epoch_tot, epoch_gen, epoch_ord = [], [], []
        for start in range(0, len(order), config.batch_size):
            group = order[start:start + config.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in group:
                pair_seed = config.seed * 1_000_003 + epoch * 8191 + int(idx)
                result = tree_loss(int(idx), pair_seed)
                epoch_tot.append(float(result.total.value))
                epoch_gen.append(float(result.generative.value))
                epoch_ord.append(float(result.order.value))
                for name, g in grads_by_name(params.tensors,
                                             ad.backward(result.total)).items():
                    acc[name] = acc.get(name, 0.0) + g
            for name in acc:
                acc[name] /= len(group)
            adam_step(params.tensors, acc, state, lr)

        val_losses = [float(tree_loss(int(i), config.seed * 31 + int(i)).total.value)
                      for i in val_idx]
        val_loss = float(np.mean(val_losses))
        report.train_losses.append(float(np.mean(epoch_tot)))
        report.val_losses.append(val_loss)
        gen_curve.append(float(np.mean(epoch_gen)))
        order_curve.append(float(np.mean(epoch_ord)))
        report.lr_history.append(lr)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            report.best_epoch = epoch
        lr = schedule.update(val_loss)

    report.extra["generative_curve"] = gen_curve
    report.extra["order_curve"] = order_curve
    encoder_only = ModelParams(
        config=best_params.config,
        attr_dim=best_params.attr_dim,
        tensors={n: best_params.tensors[n] for n in best_params.encoder_names()},
        head_out=None,
        gen_k=None,
    )
    return encoder_only, report


def finetune(encoder: ModelParams, dataset: Dataset, config: TrainConfig
             ) -> tuple[ModelParams, RunReport]:
    """Fresh task head on pretrained encoder weights; optionally frozen."""
    if not dataset:
        raise ConfigError("dataset is empty")
    if encoder.config != config.encoder:
        raise CheckpointError(
            f"encoder config {encoder.config} != requested {config.encoder}")
    attr_dim = _check_attr_dim([t for t, _ in dataset])
    if encoder.attr_dim != attr_dim:
        raise CheckpointError(
            f"encoder attr width {encoder.attr_dim} != dataset {attr_dim}")
    head_out = _infer_head_out(dataset, config.task_kind)
    params = init_model(config.encoder, attr_dim, config.seed,
                        head_out=head_out)
    params.load_values(encoder.encoder_values())
    trainable = None
    if config.freeze_encoder:
        trainable = {n for n in params.tensors if n.startswith("head")}
    return _run_supervised(dataset, config, params, trainable)


# -- invariance robustness test ------------------------------------------------------

@dataclass
class InvarianceReport:
    max_deviation: float
    base_metric: Optional[float]
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"max_deviation": self.max_deviation,
                "base_metric": self.base_metric, "rows": self.rows}


def invariance_test(params: Optional[ModelParams], dataset: Dataset,
                    n_transforms: int, seed: int,
                    task_kind: str = "classification",
                    rotation_magnitudes: Optional[Sequence[float]] = None,
                    translation_magnitudes: Optional[Sequence[float]] = None,
                    score_fn: Optional[Callable[[GeometricTree], float]] = None
                    ) -> InvarianceReport:
    """Score deviation under rigid transforms of increasing magnitude.

    For each magnitude, ``n_transforms`` random transforms hit every tree;
    the report records the max absolute score change and (for labeled
    classification data) the AUC under transformation.  ``score_fn``
    overrides the model score, which lets tests plug in a deliberately
    non-invariant scorer as a negative control.
    """
    from .encoder import score_tree  # local import avoids cycle at module load

    if score_fn is None:
        if params is None:
            raise ContractError("need either params or score_fn")

        def score_fn(tree: GeometricTree) -> float:
            return score_tree(tree, params, task_kind)

    if rotation_magnitudes is None:
        rotation_magnitudes = [0.0] + list(np.linspace(np.pi / 4, 2 * np.pi, 8))
    if translation_magnitudes is None:
        translation_magnitudes = [0.0, 2.5, 5.0, 7.5, 10.0]

    trees = [t for t, _ in dataset]
    labels = [v for _, v in dataset]
    base_scores = np.array([score_fn(t) for t in trees])
    can_auc = task_kind == "classification" and len(set(labels)) == 2
    base_metric = auc(base_scores, labels) if can_auc else None

    rows = []
    max_dev = 0.0
    plans = [("rotation", m) for m in rotation_magnitudes] + \
            [("translation", m) for m in translation_magnitudes]
    counter = 0
    for kind, mag in plans:
        kind_dev = 0.0
        aucs = []
        for draw in range(n_transforms):
            scores = np.zeros(len(trees))
            for t_idx, tree in enumerate(trees):
                counter += 1
                if kind == "rotation":
                    tf = random_rigid(seed + counter, rotation_angle=mag,
                                      translation=0.0)
                else:
                    tf = random_rigid(seed + counter, rotation_angle=0.0,
                                      translation=mag)
                scores[t_idx] = score_fn(apply_rigid(tree, tf))
            kind_dev = max(kind_dev, float(np.abs(scores - base_scores).max()))
            if can_auc:
                aucs.append(auc(scores, labels))
        rows.append({
            "kind": kind,
            "magnitude": float(mag),
            "max_deviation": kind_dev,
            "metric": float(np.mean(aucs)) if aucs else None,
        })
        max_dev = max(max_dev, kind_dev)
    return InvarianceReport(max_dev, base_metric, rows)


# -- scaling benchmark -----------------------------------------------------------------

@dataclass
class BenchReport:
    rows: list[dict]
    pearson_r: float
    trees_per_point: int
    repeats: int

    def to_dict(self) -> dict:
        return {"rows": self.rows, "pearson_r": self.pearson_r,
                "trees_per_point": self.trees_per_point,
                "repeats": self.repeats}


def bench_scaling(node_counts: Sequence[int], trees_per_point: int,
                  config: TrainConfig, seed: int,
                  repeats: int = 1) -> BenchReport:
    """Epoch wall time per tree size, plus the node-count/time correlation.

    One epoch = forward, backward, and an Adam step over ``trees_per_point``
    synthetic trees of the given size (branch preprocessing excluded, it is
    dataset preparation).  Pearson r is computed over the mean epoch times.
    """
    counts = [int(n) for n in node_counts]
    if counts != sorted(counts) or len(counts) < 2:
        raise ConfigError("node_counts must be ascending with >= 2 entries")
    rows = []
    means = []
    for size_idx, n in enumerate(counts):
        trees = [generate_sized_tree(n, seed + 97 * size_idx + i)
                 for i in range(trees_per_point)]
        batches = [TreeBatch(t) for t in trees]
        targets = [i % 2 for i in range(trees_per_point)]
        params = init_model(config.encoder, 0, config.seed, head_out=2)
        state = AdamState.for_params(params.tensors)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for batch, target in zip(batches, targets):
                _, vec = encode(batch, params)
                loss = supervised_loss(predict(vec, params, "classification"),
                                       target, "classification")
                grads = grads_by_name(params.tensors, ad.backward(loss))
                adam_step(params.tensors, grads, state, config.lr)
            times.append(time.perf_counter() - t0)
        mean_t = float(np.mean(times))
        rows.append({"n_nodes": n, "seconds_mean": mean_t,
                     "seconds_std": float(np.std(times)),
                     "total_seconds": float(np.sum(times))})
        means.append(mean_t)
    r = float(np.corrcoef(np.asarray(counts, dtype=np.float64),
                          np.asarray(means))[0, 1])
    return BenchReport(rows, r, trees_per_point, repeats)
