"""Geometric-tree data model, validation, and branch enumeration.

A geometric tree is a rooted tree whose nodes carry 3D coordinates.  Parent
links define the hierarchy; every node except the root has exactly one
parent, so the edge count is always ``len(nodes) - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    CycleError,
    DegenerateEdgeError,
    FormatError,
    MultiRootError,
    NumericError,
)

# Edges shorter than this are rejected at validation time: downstream
# geometric features divide by edge lengths.
MIN_EDGE_LENGTH = 1e-9

# Sentinel id used for unused slots of a Branch3.
PAD = -1

Label = Union[int, float, str, None]


@dataclass(eq=False)
class NodeRecord:
    """One node: identifier, optional parent, position, and feature vector."""

    id: int
    parent_id: Optional[int]
    position: np.ndarray
    attrs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.attrs = np.asarray(self.attrs, dtype=np.float64)
        if self.position.shape != (3,):
            raise FormatError(f"node {self.id}: position must be a 3-vector")
        if self.attrs.ndim != 1:
            raise FormatError(f"node {self.id}: attrs must be a flat vector")


@dataclass(frozen=True)
class Branch3:
    """A maximal descending path of up to three edges starting at node ``i``.

    ``valid_len`` counts how many of the descendant slots ``j, k, p`` are
    real; the rest hold the PAD sentinel.
    """

    i: int
    j: int
    k: int = PAD
    p: int = PAD
    valid_len: int = 3

    def __post_init__(self):
        if self.valid_len not in (1, 2, 3):
            raise FormatError(f"valid_len must be 1..3, got {self.valid_len}")

    def ids(self) -> tuple[int, int, int, int]:
        return (self.i, self.j, self.k, self.p)


class GeometricTree:
    """Validated rooted tree with 3D node positions.

    Instances are immutable in practice: all derived structure (children
    lists, depths, position matrix) is computed once at construction, and
    every operation in this package returns new trees instead of mutating.
    """

    def __init__(self, nodes: Sequence[NodeRecord], label: Label = None):
        if not nodes:
            raise FormatError("tree must contain at least one node")
        self.nodes: tuple[NodeRecord, ...] = tuple(nodes)
        self.label = label
        self._index: dict[int, int] = {}
        for row, node in enumerate(self.nodes):
            if node.id in self._index:
                raise FormatError(f"duplicate node id {node.id}")
            self._index[node.id] = row
        self._validate_and_build()

    # -- construction-time validation --------------------------------------

    def _validate_and_build(self):
        roots = [n.id for n in self.nodes if n.parent_id is None]
        if len(roots) > 1:
            raise MultiRootError(f"multiple roots: {roots}")
        if not roots:
            raise CycleError("no root: every node has a parent")
        self.root_id: int = roots[0]

        for node in self.nodes:
            if node.parent_id is not None and node.parent_id not in self._index:
                raise FormatError(
                    f"node {node.id} references missing parent {node.parent_id}"
                )
            if not np.isfinite(node.position).all():
                raise NumericError(f"node {node.id}: non-finite position")
            if not np.isfinite(node.attrs).all():
                raise NumericError(f"node {node.id}: non-finite attrs")

        widths = {n.attrs.shape[0] for n in self.nodes}
        if len(widths) > 1:
            raise FormatError(f"inconsistent attr widths: {sorted(widths)}")
        self.attr_dim: int = widths.pop()

        children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for node in self.nodes:
            if node.parent_id is not None:
                children[node.parent_id].append(node.id)
        self._children = children

        # BFS from the root assigns depths and proves acyclicity: with
        # |E| = |V| - 1, unreachable nodes can only sit on parent cycles.
        depths = {self.root_id: 0}
        frontier = [self.root_id]
        order = [self.root_id]
        while frontier:
            nxt = []
            for nid in frontier:
                for cid in children[nid]:
                    depths[cid] = depths[nid] + 1
                    nxt.append(cid)
                    order.append(cid)
            frontier = nxt
        if len(depths) != len(self.nodes):
            missing = [n.id for n in self.nodes if n.id not in depths]
            raise CycleError(f"nodes unreachable from root (cycle): {missing}")
        self._depth_by_id = depths
        self._bfs_order = order

        pos = np.stack([n.position for n in self.nodes])
        self._positions = pos
        for node in self.nodes:
            if node.parent_id is None:
                continue
            d = np.linalg.norm(node.position - self.node(node.parent_id).position)
            if d < MIN_EDGE_LENGTH:
                raise DegenerateEdgeError(
                    f"edge {node.parent_id}->{node.id} has length {d!r}"
                )

        self._tin: Optional[np.ndarray] = None
        self._tout: Optional[np.ndarray] = None

    # -- basic accessors ----------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def index_of(self, node_id: int) -> int:
        return self._index[node_id]

    def node(self, node_id: int) -> NodeRecord:
        return self.nodes[self._index[node_id]]

    def parent_of(self, node_id: int) -> Optional[int]:
        return self.node(node_id).parent_id

    def children_of(self, node_id: int) -> list[int]:
        return self._children[node_id]

    def depth_of(self, node_id: int) -> int:
        return self._depth_by_id[node_id]

    def depths(self) -> np.ndarray:
        """Depth of each node, in ``self.nodes`` order."""
        return np.array([self._depth_by_id[n.id] for n in self.nodes])

    def max_depth(self) -> int:
        return int(self.depths().max())

    def positions(self) -> np.ndarray:
        """``(N, 3)`` position matrix in ``self.nodes`` order (copy)."""
        return self._positions.copy()

    def attrs_matrix(self) -> np.ndarray:
        """``(N, attr_dim)`` node attribute matrix in ``self.nodes`` order."""
        if self.attr_dim == 0:
            return np.zeros((len(self.nodes), 0))
        return np.stack([n.attrs for n in self.nodes])

    def bfs_ids(self) -> list[int]:
        return list(self._bfs_order)

    # -- hierarchy queries --------------------------------------------------

    def _euler(self) -> tuple[np.ndarray, np.ndarray]:
        if self._tin is None:
            tin = np.zeros(len(self.nodes), dtype=np.int64)
            tout = np.zeros(len(self.nodes), dtype=np.int64)
            clock = 0
            stack: list[tuple[int, bool]] = [(self.root_id, False)]
            while stack:
                nid, done = stack.pop()
                row = self._index[nid]
                if done:
                    # largest tin inside the subtree: interval test is
                    # tin[a] < tin[d] <= tout[a]
                    tout[row] = clock - 1
                    continue
                tin[row] = clock
                clock += 1
                stack.append((nid, True))
                for cid in self._children[nid]:
                    stack.append((cid, False))
            self._tin, self._tout = tin, tout
        return self._tin, self._tout

    def is_ancestor(self, anc_id: int, desc_id: int) -> bool:
        """True iff ``anc_id`` is a proper ancestor of ``desc_id``."""
        if anc_id == desc_id:
            return False
        tin, tout = self._euler()
        a, d = self._index[anc_id], self._index[desc_id]
        return bool(tin[a] < tin[d] and tin[d] <= tout[a])

    def ancestors_of(self, node_id: int) -> list[int]:
        """Ancestor chain from parent up to the root."""
        out = []
        cur = self.parent_of(node_id)
        while cur is not None:
            out.append(cur)
            cur = self.parent_of(cur)
        return out

    # -- derived trees ------------------------------------------------------

    def with_positions(self, positions: np.ndarray) -> "GeometricTree":
        """Same topology, attrs, and label with replaced coordinates."""
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (len(self.nodes), 3):
            raise FormatError(f"expected {(len(self.nodes), 3)} positions")
        nodes = [
            NodeRecord(n.id, n.parent_id, positions[row], n.attrs.copy())
            for row, n in enumerate(self.nodes)
        ]
        return GeometricTree(nodes, label=self.label)

    def with_label(self, label: Label) -> "GeometricTree":
        nodes = [
            NodeRecord(n.id, n.parent_id, n.position.copy(), n.attrs.copy())
            for n in self.nodes
        ]
        return GeometricTree(nodes, label=label)


def enumerate_branches(tree: GeometricTree) -> dict[int, list[Branch3]]:
    """All maximal descending paths of length <= 3 from each node.

    A path shorter than three edges is emitted only when its last node is a
    leaf, so the total number of full-length branches equals the number of
    nodes at depth >= 3.  Leaves map to an empty list.
    """
    out: dict[int, list[Branch3]] = {}
    for node in tree.nodes:
        i = node.id
        branches: list[Branch3] = []
        for j in tree.children_of(i):
            kids_j = tree.children_of(j)
            if not kids_j:
                branches.append(Branch3(i, j, PAD, PAD, 1))
                continue
            for k in kids_j:
                kids_k = tree.children_of(k)
                if not kids_k:
                    branches.append(Branch3(i, j, k, PAD, 2))
                    continue
                for p in kids_k:
                    branches.append(Branch3(i, j, k, p, 3))
        out[i] = branches
    return out


def count_full_branches(branches: dict[int, list[Branch3]]) -> int:
    return sum(1 for lst in branches.values() for b in lst if b.valid_len == 3)


def path_tree(positions: Iterable[Sequence[float]], label: Label = None,
              attrs: Optional[np.ndarray] = None) -> GeometricTree:
    """Convenience constructor: a single path 0 -> 1 -> ... -> n-1."""
    pts = [np.asarray(p, dtype=np.float64) for p in positions]
    nodes = []
    for idx, p in enumerate(pts):
        a = np.zeros(0) if attrs is None else attrs[idx]
        nodes.append(NodeRecord(idx, None if idx == 0 else idx - 1, p, a))
    return GeometricTree(nodes, label=label)
