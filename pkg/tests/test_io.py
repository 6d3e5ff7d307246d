import json

import numpy as np
import pytest

from gtmp.errors import ConfigError, CycleError, FormatError
from gtmp.io import (
    DatasetManifest,
    canonicalize_tree_json,
    load_dataset,
    parse_tree_json,
    save_manifest,
    save_tree_json,
    serialize_tree_json,
)

from conftest import make_tree, random_trees


def test_parse_single_node():
    tree = parse_tree_json('{"root":0,"nodes":[{"id":0,"xyz":[0,0,0]}]}')
    assert len(tree) == 1
    assert tree.root_id == 0
    assert tree.label is None
    assert tree.attr_dim == 0


def test_parse_self_parent_cycle():
    text = ('{"root":0,"nodes":[{"id":0,"xyz":[0,0,0]},'
            '{"id":1,"parent":1,"xyz":[1,0,0]}]}')
    with pytest.raises(CycleError):
        parse_tree_json(text)


@pytest.mark.parametrize("text", [
    '[1,2,3]',
    '{"nodes":[]}',
    '{"root":0}',
    '{"root":0,"nodes":[{"id":0,"xyz":[0,0]}]}',
    '{"root":0,"nodes":[{"id":"a","xyz":[0,0,0]}]}',
    '{"root":0,"nodes":[{"id":0,"xyz":[0,0,0],"attrs":"x"}]}',
    '{"root":1,"nodes":[{"id":0,"xyz":[0,0,0]}]}',
    'not json',
])
def test_parse_schema_violations(text):
    with pytest.raises(FormatError):
        parse_tree_json(text)


def test_round_trip_is_identity_on_canonical_form():
    for tree in random_trees(20, seed=2, max_nodes=30):
        text = serialize_tree_json(tree)
        assert canonicalize_tree_json(text) == text
        again = parse_tree_json(text)
        assert again.ids() == sorted(tree.ids())
        for node in tree.nodes:
            other = again.node(node.id)
            assert other.parent_id == node.parent_id
            assert np.array_equal(other.position, node.position)
            assert np.array_equal(other.attrs, node.attrs)


def test_round_trip_preserves_exact_floats():
    tree = make_tree([None, 0], [(0.1, 0.2, 0.30000000000000004),
                                 (1 / 3, 2 / 3, 1e-17 + 1)])
    again = parse_tree_json(serialize_tree_json(tree))
    for node in tree.nodes:
        assert np.array_equal(again.node(node.id).position, node.position)


@pytest.mark.parametrize("label", [None, 3, 0.75, "classA"])
def test_label_round_trip(label):
    tree = make_tree([None, 0], [(0, 0, 0), (1, 0, 0)], label=label)
    assert parse_tree_json(serialize_tree_json(tree)).label == label


def test_canonical_sorts_nodes_by_id():
    text = ('{"root":0,"label":null,"nodes":['
            '{"id":2,"parent":0,"xyz":[2.0,0.0,0.0],"attrs":[]},'
            '{"id":0,"parent":null,"xyz":[0.0,0.0,0.0],"attrs":[]}]}')
    out = json.loads(canonicalize_tree_json(text))
    assert [n["id"] for n in out["nodes"]] == [0, 2]


def test_manifest_round_trip(tmp_path):
    manifest = DatasetManifest(
        entries=[("trees/a.json", 1), ("trees/b.json", 0)],
        task_kind="classification", split_seed=9)
    path = tmp_path / "manifest.json"
    save_manifest(manifest, path)
    loaded = DatasetManifest.from_json(path.read_text())
    assert loaded == manifest


def test_manifest_validation():
    with pytest.raises(ConfigError):
        DatasetManifest(entries=[], task_kind="ranking")
    with pytest.raises(ConfigError):
        DatasetManifest(entries=[], task_kind="regression",
                        split_ratios=(0.5, 0.5, 0.5))
    with pytest.raises(FormatError):
        DatasetManifest.from_json('{"entries": []}')


def test_load_dataset_resolves_relative_paths(tmp_path):
    trees = random_trees(3, seed=4, max_nodes=15)
    (tmp_path / "trees").mkdir()
    entries = []
    for idx, tree in enumerate(trees):
        rel = f"trees/t{idx}.json"
        save_tree_json(tree.with_label(idx % 2), tmp_path / rel)
        entries.append((rel, idx % 2))
    save_manifest(DatasetManifest(entries=entries, task_kind="classification"),
                  tmp_path / "manifest.json")
    dataset, manifest = load_dataset(tmp_path / "manifest.json")
    assert len(dataset) == 3
    assert [t for _, t in dataset] == [0, 1, 0]
    assert manifest.task_kind == "classification"
