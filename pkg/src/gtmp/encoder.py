"""Branch message-passing encoder, readout, and prediction heads.

Per layer, every branch ``i -> j -> k -> p`` emits a message::

    m = phi([h_i, a1*h_j, a2*h_k, a3*h_p, psi([features, mask])])

and each node updates via ``h_i' = sigma(AGG over its branches of m)``.
Padded branch slots contribute zero embeddings and masked features; nodes
with no branches (leaves) update from the zero vector.  The per-tree vector
is a mean (or sum) readout over the final node embeddings.

All geometry enters as constants, so the encoder inherits the rigid-motion
invariance of the branch features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ContractError
from .geometry import extract_branch_arrays
from .nn import (
    MlpSpec,
    init_affine,
    load_checkpoint,
    mlp_forward,
    mlp_init,
    mlp_layers,
    mlp_named,
    save_checkpoint,
)
from .tree import PAD, GeometricTree, enumerate_branches

AGG_KINDS = ("sum", "mean", "max")
READOUT_KINDS = ("mean", "sum")

PSI_IN = 12  # six features + six mask bits


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3
    hidden_dim: int = 64
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    agg: str = "mean"
    readout: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if len(self.alpha) != 3 or not all(np.isfinite(self.alpha)):
            raise ConfigError("alpha must be three finite reals")
        if self.agg not in AGG_KINDS:
            raise ConfigError(f"agg must be one of {AGG_KINDS}")
        if self.readout not in READOUT_KINDS:
            raise ConfigError(f"readout must be one of {READOUT_KINDS}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "alpha": list(self.alpha),
            "agg": self.agg,
            "readout": self.readout,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(
            num_layers=int(obj.get("num_layers", 3)),
            hidden_dim=int(obj.get("hidden_dim", 64)),
            alpha=tuple(obj.get("alpha", (1.0, 1.0, 1.0))),
            agg=obj.get("agg", "mean"),
            readout=obj.get("readout", "mean"),
        )


class TreeBatch:
    """Per-tree constants for the forward pass (computed once, reused)."""

    def __init__(self, tree: GeometricTree):
        self.n_nodes = len(tree)
        self.attrs = tree.attrs_matrix()
        branches = enumerate_branches(tree)
        flat, values, mask = extract_branch_arrays(tree, branches)
        self.n_branches = len(flat)
        self.psi_in = np.concatenate([values, mask.astype(np.float64)], axis=1)

        def rows(ids):
            return np.array([tree.index_of(n) if n != PAD else 0 for n in ids],
                            dtype=np.int64)

        self.origin = rows([b.i for b in flat])
        self.idx_i = self.origin
        self.idx_j = rows([b.j for b in flat])
        self.idx_k = rows([b.k for b in flat])
        self.idx_p = rows([b.p for b in flat])
        vl = np.array([b.valid_len for b in flat])
        self.mask_j = np.ones((self.n_branches, 1))
        self.mask_k = (vl >= 2).astype(np.float64)[:, None]
        self.mask_p = (vl >= 3).astype(np.float64)[:, None]


def as_batch(tree: Union[GeometricTree, TreeBatch]) -> TreeBatch:
    return tree if isinstance(tree, TreeBatch) else TreeBatch(tree)


def _psi_spec(cfg: EncoderConfig) -> MlpSpec:
    return MlpSpec((PSI_IN, cfg.hidden_dim, cfg.hidden_dim))


def _phi_spec(cfg: EncoderConfig) -> MlpSpec:
    return MlpSpec((5 * cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim))


def _sigma_spec(cfg: EncoderConfig) -> MlpSpec:
    return MlpSpec((cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim))


def _head_spec(cfg: EncoderConfig, out: int) -> MlpSpec:
    return MlpSpec((cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim, out))


def _gen_spec(cfg: EncoderConfig, k: int) -> MlpSpec:
    return MlpSpec((cfg.hidden_dim + k, cfg.hidden_dim, k))


@dataclass
class ModelParams:
    """All learnable tensors plus the structural metadata to rebuild them."""

    config: EncoderConfig
    attr_dim: int
    tensors: dict[str, ad.Tensor]
    head_out: Optional[int] = None
    gen_k: Optional[int] = None

    def encoder_names(self) -> list[str]:
        return [n for n in self.tensors
                if n.startswith("embed.") or n.startswith("layer")]

    def encoder_values(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].value.copy() for n in self.encoder_names()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            attr_dim=self.attr_dim,
            tensors={n: ad.param(t.value.copy()) for n, t in self.tensors.items()},
            head_out=self.head_out,
            gen_k=self.gen_k,
        )

    def load_values(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            if name not in self.tensors:
                raise CheckpointError(f"unexpected tensor {name!r}")
            if self.tensors[name].value.shape != arr.shape:
                raise CheckpointError(
                    f"tensor {name!r} shape {arr.shape} != "
                    f"{self.tensors[name].value.shape}")
            self.tensors[name].value = arr.copy()

    def meta(self) -> dict:
        return {
            "encoder_config": self.config.to_dict(),
            "attr_dim": self.attr_dim,
            "head_out": self.head_out,
            "gen_k": self.gen_k,
        }

    def save(self, path):
        save_checkpoint(path, self.tensors, self.meta())

    @classmethod
    def load(cls, path) -> "ModelParams":
        values, meta = load_checkpoint(path)
        if "encoder_config" not in meta:
            raise CheckpointError("checkpoint lacks encoder metadata")
        model = init_model(
            EncoderConfig.from_dict(meta["encoder_config"]),
            attr_dim=int(meta["attr_dim"]),
            seed=0,
            head_out=meta.get("head_out"),
            gen_k=meta.get("gen_k"),
        )
        model.load_values(values)
        return model


def init_model(config: EncoderConfig, attr_dim: int, seed: int,
               head_out: Optional[int] = None,
               gen_k: Optional[int] = None) -> ModelParams:
    """Seeded parameter initialization for embedder, layers, and heads."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, ad.Tensor] = {}
    w, b = init_affine(rng, attr_dim, config.hidden_dim)
    tensors["embed.W"] = w
    tensors["embed.b"] = b
    for layer in range(config.num_layers):
        tensors.update(mlp_named(mlp_init(_psi_spec(config), rng),
                                 f"layer{layer}.psi"))
        tensors.update(mlp_named(mlp_init(_phi_spec(config), rng),
                                 f"layer{layer}.phi"))
        tensors.update(mlp_named(mlp_init(_sigma_spec(config), rng),
                                 f"layer{layer}.sigma"))
    if head_out is not None:
        tensors.update(mlp_named(mlp_init(_head_spec(config, head_out), rng),
                                 "head"))
    if gen_k is not None:
        tensors.update(mlp_named(mlp_init(_gen_spec(config, gen_k), rng),
                                 "gen"))
    return ModelParams(config, attr_dim, tensors, head_out, gen_k)


def _segment_agg(kind: str, x: ad.Tensor, seg: np.ndarray, n: int) -> ad.Tensor:
    if kind == "sum":
        return ad.segment_sum(x, seg, n)
    if kind == "mean":
        return ad.segment_mean(x, seg, n)
    return ad.segment_max(x, seg, n)


def layer_forward(batch: TreeBatch, h: ad.Tensor, params: ModelParams,
                  layer: int) -> ad.Tensor:
    """One round of branch messages and node updates."""
    cfg = params.config
    sigma = mlp_layers(params.tensors, f"layer{layer}.sigma", 2)
    if batch.n_branches == 0:
        zero = ad.constant(np.zeros((batch.n_nodes, cfg.hidden_dim)))
        return mlp_forward(_sigma_spec(cfg), sigma, zero)

    psi = mlp_layers(params.tensors, f"layer{layer}.psi", 2)
    phi = mlp_layers(params.tensors, f"layer{layer}.phi", 2)
    a1, a2, a3 = cfg.alpha

    geo = mlp_forward(_psi_spec(cfg), psi, ad.constant(batch.psi_in))
    h_i = ad.gather_rows(h, batch.idx_i)
    h_j = ad.mul(ad.gather_rows(h, batch.idx_j), ad.constant(a1 * batch.mask_j))
    h_k = ad.mul(ad.gather_rows(h, batch.idx_k), ad.constant(a2 * batch.mask_k))
    h_p = ad.mul(ad.gather_rows(h, batch.idx_p), ad.constant(a3 * batch.mask_p))
    fused = ad.concat([h_i, h_j, h_k, h_p, geo], axis=1)
    messages = mlp_forward(_phi_spec(cfg), phi, fused)
    agg = _segment_agg(cfg.agg, messages, batch.origin, batch.n_nodes)
    return mlp_forward(_sigma_spec(cfg), sigma, agg)


def embed_inputs(batch: TreeBatch, params: ModelParams) -> ad.Tensor:
    """Layer-0 embeddings: a single affine map of the node attrs.

    Trees with no attrs (attr_dim 0) receive the learned bias row.
    """
    x = ad.constant(batch.attrs)
    return ad.add(ad.matmul(x, params.tensors["embed.W"]),
                  params.tensors["embed.b"])


def encode(tree: Union[GeometricTree, TreeBatch], params: ModelParams
           ) -> tuple[list[ad.Tensor], ad.Tensor]:
    """All per-layer node embeddings and the pooled tree vector."""
    batch = as_batch(tree)
    if batch.attrs.shape[1] != params.attr_dim:
        raise ContractError(
            f"tree attr width {batch.attrs.shape[1]} != model {params.attr_dim}")
    hs = [embed_inputs(batch, params)]
    for layer in range(params.config.num_layers):
        hs.append(layer_forward(batch, hs[-1], params, layer))
    if params.config.readout == "mean":
        tree_vec = ad.reduce_mean(hs[-1], axis=0)
    else:
        tree_vec = ad.reduce_sum(hs[-1], axis=0)
    return hs, tree_vec


def predict(tree_vec: ad.Tensor, params: ModelParams, task_kind: str) -> ad.Tensor:
    """Task-head scores: one logit per class, or a single real."""
    if params.head_out is None:
        raise ContractError("model has no task head")
    if task_kind == "classification":
        if params.head_out < 2:
            raise ContractError("classification head needs >= 2 outputs")
    elif task_kind == "regression":
        if params.head_out != 1:
            raise ContractError("regression head needs exactly 1 output")
    else:
        raise ContractError(f"unknown task_kind {task_kind!r}")
    head = mlp_layers(params.tensors, "head", 3)
    return mlp_forward(_head_spec(params.config, params.head_out), head, tree_vec)


def decision_score(scores: np.ndarray, task_kind: str) -> float:
    """Scalar ranking score: regression value, or binary logit margin."""
    if task_kind == "regression":
        return float(scores[0])
    return float(scores[1] - scores[0])


def score_tree(tree: Union[GeometricTree, TreeBatch], params: ModelParams,
               task_kind: str) -> float:
    _, vec = encode(tree, params)
    return decision_score(predict(vec, params, task_kind).value, task_kind)
