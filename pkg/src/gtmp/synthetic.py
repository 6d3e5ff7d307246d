"""Synthetic geometric-tree generation and exact geometric targets.

The generator produces desk-scale stand-ins for real morphology data.  In
classification mode the two classes differ in how branch curvature varies
with depth: class 0 ("A") bends strongly near the root and straightens out
toward the leaves, class 1 ("B") bends uniformly at the matched average
angle, so only the depth trend separates the classes.  Regression mode
attaches exact spatial diameter / radius targets.

Trees are grown from a single stem of configurable length, which also makes
them coordinate-recoverable from branch features (the propagation in
``geometry.reconstruct_tree`` needs unique nodes at depths 1 and 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .errors import ConfigError
from .tree import GeometricTree, NodeRecord

Targets = dict[str, Union[int, float]]


@dataclass(frozen=True)
class GeneratorConfig:
    count: int = 100
    task: str = "classification"         # or "regression"
    depth_min: int = 9
    depth_max: int = 11
    branching: tuple[float, ...] = (0.3, 0.5, 0.2)  # P(1), P(2), ... children
    step_min: float = 0.8
    step_max: float = 1.2
    stem_depth: int = 3
    max_nodes: int = 110
    bend_near_deg: float = 50.0          # class-A bend at the root end
    bend_far_deg: float = 8.0            # class-A bend at the leaf end
    bend_noise_deg: float = 7.0
    class_coupled: bool = True
    ssl_ready: bool = True               # require depth >= 3 (branch features need it)

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.depth_min > self.depth_max:
            raise ConfigError("depth_min must be <= depth_max")
        if self.depth_min < 1:
            raise ConfigError("depth_min must be >= 1")
        if self.ssl_ready and self.depth_min < 3:
            raise ConfigError("depth_min < 3 leaves no full-length branches")
        if not self.branching or any(p < 0 for p in self.branching):
            raise ConfigError("branching must be nonnegative probabilities")
        if abs(sum(self.branching) - 1.0) > 1e-9:
            raise ConfigError("branching probabilities must sum to 1")
        if not (0 < self.step_min <= self.step_max):
            raise ConfigError("need 0 < step_min <= step_max")
        if self.stem_depth < 1:
            raise ConfigError("stem_depth must be >= 1")
        if self.max_nodes < self.depth_max + 1:
            raise ConfigError("max_nodes too small for depth_max")


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n


def _bend_direction(rng: np.random.Generator, direction: np.ndarray,
                    bend_rad: float) -> np.ndarray:
    """Rotate ``direction`` by ``bend_rad`` about a random perpendicular axis."""
    while True:
        r = rng.normal(size=3)
        perp = r - np.dot(r, direction) * direction
        n = np.linalg.norm(perp)
        if n > 1e-8:
            perp /= n
            break
    out = math.cos(bend_rad) * direction + math.sin(bend_rad) * perp
    return out / np.linalg.norm(out)


def _bend_angle(rng: np.random.Generator, cfg: GeneratorConfig,
                depth_frac: float, class_b: bool) -> float:
    if class_b:
        mean = 0.5 * (cfg.bend_near_deg + cfg.bend_far_deg)
    else:
        mean = cfg.bend_near_deg + (cfg.bend_far_deg - cfg.bend_near_deg) * depth_frac
    ang = mean + rng.normal(0.0, cfg.bend_noise_deg)
    return math.radians(min(max(ang, 1.0), 170.0))


def _grow_tree(rng: np.random.Generator, cfg: GeneratorConfig,
               depth_target: int, class_b: bool,
               exact_nodes: Optional[int] = None) -> GeometricTree:
    """Grow one tree; ``exact_nodes`` overrides the depth/max_nodes caps."""
    positions = [np.zeros(3)]
    parents: list[Optional[int]] = [None]
    dirs = [_random_unit(rng)]
    depths = [0]

    def add_child(parent: int) -> int:
        frac = depths[parent] / max(depth_target, 1)
        bend = _bend_angle(rng, cfg, frac, class_b)
        d = _bend_direction(rng, dirs[parent], bend)
        step = rng.uniform(cfg.step_min, cfg.step_max)
        positions.append(positions[parent] + step * d)
        parents.append(parent)
        dirs.append(d)
        depths.append(depths[parent] + 1)
        return len(parents) - 1

    def full() -> bool:
        if exact_nodes is not None:
            return len(parents) >= exact_nodes
        return len(parents) >= cfg.max_nodes

    # Single stem below the root.
    cur = 0
    stem = min(cfg.stem_depth, depth_target)
    for _ in range(stem):
        if full():
            break
        cur = add_child(cur)

    # Breadth-first branching.  The spine node always continues so the tree
    # reaches depth_target even when max_nodes bites first.
    spine = cur
    frontier = [cur]
    while frontier:
        nxt = []
        for nid in frontier:
            if exact_nodes is None and depths[nid] >= depth_target:
                continue
            want = 1 + int(rng.choice(len(cfg.branching), p=cfg.branching))
            for c in range(want):
                is_spine_child = nid == spine and c == 0
                if full() and not (is_spine_child and exact_nodes is None):
                    break
                child = add_child(nid)
                nxt.append(child)
                if is_spine_child:
                    spine = child
        frontier = nxt
        if exact_nodes is not None and len(parents) >= exact_nodes:
            break

    # Exact-size mode may stop mid-level; top up along a path if short.
    if exact_nodes is not None:
        while len(parents) < exact_nodes:
            cur = add_child(len(parents) - 1)

    nodes = [NodeRecord(i, parents[i], positions[i]) for i in range(len(parents))]
    return GeometricTree(nodes)


def generate_synthetic(config: GeneratorConfig, seed: int
                       ) -> list[tuple[GeometricTree, Targets]]:
    """Deterministic synthetic dataset: ``count`` trees with targets."""
    rng = np.random.default_rng(seed)
    out = []
    for t in range(config.count):
        depth_target = int(rng.integers(config.depth_min, config.depth_max + 1))
        if config.task == "classification":
            label = t % 2
            class_b = bool(label) if config.class_coupled else True
            tree = _grow_tree(rng, config, depth_target, class_b).with_label(label)
            targets: Targets = {"class": label}
        else:
            tree = _grow_tree(rng, config, depth_target, class_b=True)
            diameter, radius = compute_targets(tree)
            targets = {"diameter": diameter, "radius": radius}
        out.append((tree, targets))
    return out


def generate_sized_tree(n_nodes: int, seed: int,
                        config: Optional[GeneratorConfig] = None) -> GeometricTree:
    """One tree with exactly ``n_nodes`` nodes (for scaling benchmarks)."""
    if n_nodes < 1:
        raise ConfigError("n_nodes must be >= 1")
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    if n_nodes <= 3:
        cfg = replace(cfg, ssl_ready=False, depth_min=1, depth_max=n_nodes)
    return _grow_tree(rng, cfg, depth_target=n_nodes, class_b=True,
                      exact_nodes=n_nodes)


def compute_targets(tree: GeometricTree) -> tuple[float, float]:
    """Spatial diameter and radius over straight-line node distances.

    diameter = max over node pairs of Euclidean distance; radius = min over
    nodes of their eccentricity (max distance to any other node).  Both are
    0 for a single-node tree.
    """
    pos = tree.positions()
    n = len(pos)
    if n == 1:
        return 0.0, 0.0
    sq = (pos ** 2).sum(axis=1)
    ecc = np.zeros(n)
    block = 1024
    for s in range(0, n, block):
        chunk = pos[s:s + block]
        d2 = sq[s:s + block, None] + sq[None, :] - 2.0 * (chunk @ pos.T)
        np.maximum(d2, 0.0, out=d2)
        ecc[s:s + block] = np.sqrt(d2.max(axis=1))
    return float(ecc.max()), float(ecc.min())
