import numpy as np
import pytest

from gtmp.synthetic import GeneratorConfig, generate_synthetic
from gtmp.tree import GeometricTree, NodeRecord


def make_tree(parents, positions, attrs=None, label=None):
    """Direct tree construction from parallel parent/position lists."""
    nodes = []
    for idx, (parent, pos) in enumerate(zip(parents, positions)):
        a = np.zeros(0) if attrs is None else np.asarray(attrs[idx], dtype=float)
        nodes.append(NodeRecord(idx, parent, np.asarray(pos, dtype=float), a))
    return GeometricTree(nodes, label=label)


def random_trees(count, seed, **cfg_kwargs):
    cfg = GeneratorConfig(count=count, **cfg_kwargs)
    return [tree for tree, _ in generate_synthetic(cfg, seed)]


@pytest.fixture
def small_tree():
    """Ten nodes, depth 4, generic geometry."""
    return random_trees(1, seed=42, depth_min=4, depth_max=4, max_nodes=10)[0]


@pytest.fixture
def classification_dataset():
    """Forty small labeled trees for harness smoke tests."""
    cfg = GeneratorConfig(count=40, max_nodes=40, depth_min=5, depth_max=6)
    return [(tree, targets["class"]) for tree, targets in
            generate_synthetic(cfg, seed=7)]
