"""Ingestion and serialization: SWC import, portable tree JSON, manifests.

The portable JSON format is the canonical on-disk form::

    {"root": 0, "label": 1, "nodes": [
        {"id": 0, "parent": null, "xyz": [0.0, 0.0, 0.0], "attrs": []},
        ...]}

Canonical form sorts nodes by id and relies on Python's shortest
round-trip float repr, so ``serialize -> parse -> serialize`` is the
identity on strings.  SWC is import-only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, FormatError, MultiRootError
from .tree import GeometricTree, Label, NodeRecord

# SWC structure codes 1..7 get their own one-hot slot; everything else
# (including 0 = undefined) falls into the trailing "other" slot.
SWC_TYPE_SLOTS = 8
SWC_ATTR_DIM = SWC_TYPE_SLOTS + 1  # one-hot + radius


def _swc_attrs(type_code: int, radius: float) -> np.ndarray:
    attrs = np.zeros(SWC_ATTR_DIM)
    slot = type_code - 1 if 1 <= type_code <= 7 else SWC_TYPE_SLOTS - 1
    attrs[slot] = 1.0
    attrs[SWC_TYPE_SLOTS] = radius
    return attrs


def parse_swc(text: str, label: Label = None) -> GeometricTree:
    """Parse SWC text ("index type x y z radius parent" per line).

    Node ids are remapped to dense 0..N-1 preserving file order; node attrs
    are the one-hot structure type concatenated with the radius.
    """
    rows: list[tuple[int, int, float, float, float, float, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise FormatError(f"SWC line {lineno}: expected 7 fields, got {len(fields)}")
        try:
            idx = int(fields[0])
            type_code = int(fields[1])
            x, y, z, radius = (float(f) for f in fields[2:6])
            parent = int(fields[6])
        except ValueError as exc:
            raise FormatError(f"SWC line {lineno}: {exc}") from None
        rows.append((idx, type_code, x, y, z, radius, parent))

    if not rows:
        raise FormatError("SWC input contains no data lines")

    remap: dict[int, int] = {}
    for idx, *_ in rows:
        if idx in remap:
            raise FormatError(f"duplicate SWC index {idx}")
        remap[idx] = len(remap)

    roots = [idx for idx, *rest in rows if rest[-1] == -1]
    if len(roots) > 1:
        raise MultiRootError(f"SWC declares {len(roots)} roots")

    nodes = []
    for idx, type_code, x, y, z, radius, parent in rows:
        if parent == -1:
            parent_id = None
        elif parent in remap:
            parent_id = remap[parent]
        else:
            raise FormatError(f"SWC node {idx} references missing parent {parent}")
        nodes.append(
            NodeRecord(remap[idx], parent_id, np.array([x, y, z]),
                       _swc_attrs(type_code, radius))
        )
    return GeometricTree(nodes, label=label)


def load_swc(path: Union[str, os.PathLike], label: Label = None) -> GeometricTree:
    with open(path) as fh:
        return parse_swc(fh.read(), label=label)


# -- portable tree JSON -----------------------------------------------------

def _require(cond: bool, msg: str):
    if not cond:
        raise FormatError(msg)


def parse_tree_json(text: str) -> GeometricTree:
    """Parse the portable tree JSON format."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from None

    _require(isinstance(obj, dict), "top-level value must be an object")
    _require("root" in obj, "missing 'root' field")
    _require("nodes" in obj and isinstance(obj["nodes"], list), "missing 'nodes' list")
    label = obj.get("label")
    _require(label is None or isinstance(label, (int, float, str)),
             "'label' must be number, string, or null")

    nodes = []
    for entry in obj["nodes"]:
        _require(isinstance(entry, dict), "each node must be an object")
        _require(isinstance(entry.get("id"), int), "node 'id' must be an integer")
        parent = entry.get("parent")
        _require(parent is None or isinstance(parent, int),
                 f"node {entry['id']}: 'parent' must be int or null")
        xyz = entry.get("xyz")
        _require(isinstance(xyz, list) and len(xyz) == 3
                 and all(isinstance(v, (int, float)) for v in xyz),
                 f"node {entry['id']}: 'xyz' must be a 3-number list")
        attrs = entry.get("attrs", [])
        _require(isinstance(attrs, list)
                 and all(isinstance(v, (int, float)) for v in attrs),
                 f"node {entry['id']}: 'attrs' must be a number list")
        nodes.append(NodeRecord(entry["id"], parent, np.array(xyz, dtype=np.float64),
                                np.array(attrs, dtype=np.float64)))

    tree = GeometricTree(nodes, label=label)
    _require(obj["root"] == tree.root_id,
             f"'root' field is {obj['root']} but parent links give {tree.root_id}")
    return tree


def serialize_tree_json(tree: GeometricTree) -> str:
    """Canonical JSON form: nodes sorted by id, compact separators."""
    nodes = []
    for node in sorted(tree.nodes, key=lambda n: n.id):
        nodes.append({
            "id": node.id,
            "parent": node.parent_id,
            "xyz": [float(v) for v in node.position],
            "attrs": [float(v) for v in node.attrs],
        })
    label = tree.label
    if isinstance(label, (np.integer,)):
        label = int(label)
    elif isinstance(label, (np.floating,)):
        label = float(label)
    obj = {"root": tree.root_id, "label": label, "nodes": nodes}
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def canonicalize_tree_json(text: str) -> str:
    return serialize_tree_json(parse_tree_json(text))


def load_tree_json(path: Union[str, os.PathLike]) -> GeometricTree:
    with open(path) as fh:
        return parse_tree_json(fh.read())


def save_tree_json(tree: GeometricTree, path: Union[str, os.PathLike]):
    with open(path, "w") as fh:
        fh.write(serialize_tree_json(tree))
        fh.write("\n")


# -- dataset manifests ------------------------------------------------------

TASK_KINDS = ("classification", "regression")


@dataclass
class DatasetManifest:
    """Listing of tree files with targets, plus split bookkeeping."""

    entries: list[tuple[str, Union[int, float]]]
    task_kind: str
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}")
        ratios = tuple(float(r) for r in self.split_ratios)
        if len(ratios) != 3 or any(r <= 0 for r in ratios):
            raise ConfigError("split_ratios must be three positive reals")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratios must sum to 1, got {sum(ratios)}")
        self.split_ratios = ratios

    def to_json(self) -> str:
        obj = {
            "task_kind": self.task_kind,
            "split_seed": self.split_seed,
            "split_ratios": list(self.split_ratios),
            "entries": [{"path": p, "target": t} for p, t in self.entries],
        }
        return json.dumps(obj, indent=2, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid manifest JSON: {exc}") from None
        _require(isinstance(obj, dict), "manifest must be an object")
        for key in ("task_kind", "entries"):
            _require(key in obj, f"manifest missing '{key}'")
        entries = []
        for e in obj["entries"]:
            _require(isinstance(e, dict) and "path" in e and "target" in e,
                     "each entry needs 'path' and 'target'")
            entries.append((str(e["path"]), e["target"]))
        return cls(
            entries=entries,
            task_kind=obj["task_kind"],
            split_seed=int(obj.get("split_seed", 0)),
            split_ratios=tuple(obj.get("split_ratios", (0.8, 0.1, 0.1))),
        )


def save_manifest(manifest: DatasetManifest, path: Union[str, os.PathLike]):
    with open(path, "w") as fh:
        fh.write(manifest.to_json())
        fh.write("\n")


def load_manifest(path: Union[str, os.PathLike]) -> DatasetManifest:
    with open(path) as fh:
        return DatasetManifest.from_json(fh.read())


def load_dataset(manifest_path: Union[str, os.PathLike]
                 ) -> tuple[list[tuple[GeometricTree, Union[int, float]]], DatasetManifest]:
    """Load every tree listed in a manifest; paths resolve relative to it."""
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.fspath(manifest_path))
    dataset = []
    for rel, target in manifest.entries:
        tree = load_tree_json(os.path.join(base, rel))
        dataset.append((tree, target))
    return dataset, manifest
