"""MLP building blocks, the Adam optimizer, and checkpoint IO."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, ShapeError

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Affine stack description; ``widths`` includes the input width.

    The final layer is linear; every earlier layer applies ``activation``.
    """

    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ConfigError("MlpSpec needs an input width and >= 1 layer")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int
                ) -> tuple[ad.Tensor, ad.Tensor]:
    """Weights and bias drawn uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = (1.0 / max(fan_in, 1)) ** 0.5
    weight = ad.param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    bias = ad.param(rng.uniform(-bound, bound, size=(fan_out,)))
    return weight, bias


def mlp_init(spec: MlpSpec, rng: np.random.Generator
             ) -> list[tuple[ad.Tensor, ad.Tensor]]:
    return [init_affine(rng, spec.widths[i], spec.widths[i + 1])
            for i in range(spec.n_layers)]


def mlp_forward(spec: MlpSpec, layers: list[tuple[ad.Tensor, ad.Tensor]],
                x: ad.Tensor) -> ad.Tensor:
    """Affine+activation stack with a linear final layer."""
    if x.shape[-1] != spec.widths[0]:
        raise ShapeError(
            f"mlp expects last dim {spec.widths[0]}, got {x.shape[-1]}")
    if len(layers) != spec.n_layers:
        raise ShapeError(f"expected {spec.n_layers} layers, got {len(layers)}")
    act = ACTIVATIONS[spec.activation]
    out = x
    for idx, (weight, bias) in enumerate(layers):
        out = ad.add(ad.matmul(out, weight), bias)
        if idx < len(layers) - 1:
            out = act(out)
    return out


def mlp_named(layers: list[tuple[ad.Tensor, ad.Tensor]], prefix: str
              ) -> dict[str, ad.Tensor]:
    out = {}
    for idx, (weight, bias) in enumerate(layers):
        out[f"{prefix}.{idx}.W"] = weight
        out[f"{prefix}.{idx}.b"] = bias
    return out


def mlp_layers(tensors: dict[str, ad.Tensor], prefix: str, n_layers: int
               ) -> list[tuple[ad.Tensor, ad.Tensor]]:
    return [(tensors[f"{prefix}.{idx}.W"], tensors[f"{prefix}.{idx}.b"])
            for idx in range(n_layers)]


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, ad.Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
        )


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place.  Missing grads count as 0."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def grads_by_name(params: dict[str, ad.Tensor],
                  tensor_grads: dict[ad.Tensor, np.ndarray]
                  ) -> dict[str, np.ndarray]:
    """Re-key a backward() result by parameter name; absent means zero."""
    out = {}
    for name, p in params.items():
        g = tensor_grads.get(p)
        if g is not None:
            out[name] = g
    return out


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: Union[str, os.PathLike],
                    params: dict[str, ad.Tensor],
                    meta: Optional[dict] = None):
    """JSON checkpoint; float repr round-trips bit-exactly."""
    obj = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(p.value.shape),
                   "data": [float(v) for v in p.value.ravel()]}
            for name, p in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, allow_nan=False)


def load_checkpoint(path: Union[str, os.PathLike]
                    ) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid checkpoint JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.get("version") != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version")
    tensors = {}
    for name, entry in obj["tensors"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        tensors[name] = arr.reshape(entry["shape"])
    return tensors, obj.get("meta", {})


# -- gradient checking ----------------------------------------------------------

def finite_difference_grads(loss_fn: Callable[[], float],
                            params: dict[str, ad.Tensor],
                            h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` w.r.t. every element."""
    out = {}
    for name, p in params.items():
        grad = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = grad.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_fn()
            flat[idx] = orig - h
            down = loss_fn()
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * h)
        out[name] = grad
    return out


def max_relative_grad_error(loss_builder: Callable[[], ad.Tensor],
                            params: dict[str, ad.Tensor],
                            h: float = 1e-5) -> float:
    """Worst-case |autodiff - central difference| / max(1, |fd|).

    Coordinates whose one-sided differences disagree are skipped: there the
    probe interval straddles a hinge kink (relu/abs) and central differences
    do not estimate a derivative.  Losses here are piecewise smooth, so such
    coordinates are rare and the remaining ones still cover every parameter
    path; a wrong vector-Jacobian product shows up on smooth coordinates.
    """
    loss = loss_builder()
    auto = grads_by_name(params, ad.backward(loss))

    def eval_loss():
        return float(loss_builder().value)

    f0 = eval_loss()
    worst = 0.0
    for name, p in params.items():
        a = auto.get(name, np.zeros_like(p.value))
        aflat = a.ravel()
        flat = p.value.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = eval_loss()
            flat[idx] = orig - h
            down = eval_loss()
            flat[idx] = orig
            central = (up - down) / (2.0 * h)
            one_sided_gap = abs((up - f0) / h - (f0 - down) / h)
            if one_sided_gap > 5e-5 * max(1.0, abs(central)):
                continue  # kink inside the probe interval
            rel = abs(aflat[idx] - central) / max(1.0, abs(central))
            worst = max(worst, rel)
    return worst
