import csv
import json
import os

import numpy as np
import pytest

from gtmp.cli import run
from gtmp.io import load_manifest, load_tree_json, save_tree_json
from gtmp.tree import enumerate_branches

from conftest import make_tree


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    code = run(["generate", "--count", "60", "--depth-min", "5",
                "--depth-max", "6", "--max-nodes", "30",
                "--out", str(out), "--seed", "3"])
    assert code == 0
    return out


def test_usage_errors():
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["extract", "--in", "x.json"]) == 1  # missing --out


def test_missing_file_is_data_error(tmp_path):
    assert run(["extract", "--in", str(tmp_path / "nope.json"),
                "--out", str(tmp_path / "o.csv")]) == 2


def test_generate_writes_dataset_and_snapshot(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    assert len(manifest.entries) == 60
    assert manifest.task_kind == "classification"
    assert (dataset_dir / "config.json").exists()
    tree = load_tree_json(dataset_dir / manifest.entries[0][0])
    assert tree.label in (0, 1)


def test_generate_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["generate", "--count", "6", "--depth-min", "4",
                    "--depth-max", "5", "--max-nodes", "20",
                    "--out", str(tmp_path / name), "--seed", "9"]) == 0
    for rel in [e[0] for e in load_manifest(tmp_path / "a" / "manifest.json").entries]:
        assert (tmp_path / "a" / rel).read_text() == (tmp_path / "b" / rel).read_text()


def test_convert_swc(tmp_path):
    swc = tmp_path / "cell.swc"
    swc.write_text("# cell\n1 1 0 0 0 1.0 -1\n2 3 1.5 0 0 0.7 1\n3 3 3 1 0 0.5 2\n")
    out = tmp_path / "cell.json"
    assert run(["convert", "--in", str(swc), "--out", str(out), "--label", "1"]) == 0
    tree = load_tree_json(out)
    assert len(tree) == 3
    assert tree.label == 1
    bad = tmp_path / "bad.swc"
    bad.write_text("1 1 0 0 0 1.0 -1\n2 3 1 0 0 0.7 99\n")
    assert run(["convert", "--in", str(bad), "--out", str(out)]) == 2


def test_extract_row_per_branch(tmp_path):
    tree = make_tree([None, 0, 1, 2, 1],
                     [(0, 0, 0), (1, 0.2, 0), (1.8, 1, 0.3), (2.5, 1.2, 1.1),
                      (1.2, -1, 0.4)])
    tree_path = tmp_path / "t.json"
    save_tree_json(tree, tree_path)
    out = tmp_path / "feats.csv"
    assert run(["extract", "--in", str(tree_path), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    n_branches = sum(len(v) for v in enumerate_branches(tree).values())
    assert len(rows) == n_branches
    assert set(rows[0]) >= {"i", "j", "k", "p", "valid_len", "d_ij",
                            "phi_ijkp", "mask_phi_ijkp"}


def test_reconstruct_round_trip(tmp_path):
    tree = make_tree(
        [None, 0, 1, 2, 2, 3],
        [(0, 0, 0), (1, 0.3, 0), (1.7, 1.2, 0.4), (2.2, 1.0, 1.3),
         (2.6, 2.0, 0.2), (3.1, 0.8, 2.2)])
    tree_path = tmp_path / "t.json"
    save_tree_json(tree, tree_path)
    feats = tmp_path / "f.csv"
    assert run(["extract", "--in", str(tree_path), "--out", str(feats)]) == 0
    rec_path = tmp_path / "rec.json"
    assert run(["reconstruct", "--in", str(feats), "--topology", str(tree_path),
                "--seed-triple", "1,2,3", "--out", str(rec_path)]) == 0
    rec = load_tree_json(rec_path)
    for node in tree.nodes:
        assert np.abs(rec.node(node.id).position - node.position).max() < 1e-6


def test_reconstruct_collinear_seed_is_numeric_error(tmp_path):
    tree = make_tree([None, 0, 1, 2],
                     [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)])
    tree_path = tmp_path / "t.json"
    save_tree_json(tree, tree_path)
    feats = tmp_path / "f.csv"
    assert run(["extract", "--in", str(tree_path), "--out", str(feats)]) == 0
    assert run(["reconstruct", "--in", str(feats), "--topology", str(tree_path),
                "--seed-triple", "1,2,3",
                "--out", str(tmp_path / "r.json")]) == 3


def test_train_evaluate_invariance_pipeline(dataset_dir, tmp_path):
    manifest = str(dataset_dir / "manifest.json")
    run_dir = tmp_path / "run"
    assert run(["train", "--manifest", manifest, "--out", str(run_dir),
                "--epochs", "3", "--hidden-dim", "8", "--layers", "1",
                "--seed", "1"]) == 0
    assert (run_dir / "checkpoint_run0.json").exists()
    assert (run_dir / "report_run0.json").exists()
    assert (run_dir / "summary.json").exists()
    assert (run_dir / "loss_curve_run0.csv").exists()
    report = json.loads((run_dir / "report_run0.json").read_text())
    assert len(report["train_losses"]) == 3

    eval_dir = tmp_path / "eval"
    assert run(["evaluate", "--checkpoint", str(run_dir / "checkpoint_run0.json"),
                "--manifest", manifest, "--out", str(eval_dir)]) == 0
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert metrics["metric_name"] == "auc"
    assert (eval_dir / "scores.csv").exists()
    assert (eval_dir / "embeddings.csv").exists()

    inv_dir = tmp_path / "inv"
    assert run(["invariance", "--checkpoint", str(run_dir / "checkpoint_run0.json"),
                "--manifest", manifest, "--n-transforms", "1",
                "--out", str(inv_dir)]) == 0
    inv = json.loads((inv_dir / "invariance.json").read_text())
    assert inv["max_deviation"] < 1e-6
    assert (inv_dir / "invariance.svg").exists()
    assert (inv_dir / "invariance.csv").exists()


def test_pretrain_finetune_pipeline(dataset_dir, tmp_path):
    manifest = str(dataset_dir / "manifest.json")
    pre_dir = tmp_path / "pre"
    assert run(["pretrain", "--manifest", manifest, "--out", str(pre_dir),
                "--epochs", "2", "--hidden-dim", "8", "--layers", "1",
                "--seed", "2"]) == 0
    assert (pre_dir / "encoder.json").exists()
    assert (pre_dir / "curves.csv").exists()
    with open(pre_dir / "curves.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["epoch", "generative", "order", "total", "val_total"]

    ft_dir = tmp_path / "ft"
    assert run(["finetune", "--manifest", manifest,
                "--encoder", str(pre_dir / "encoder.json"),
                "--out", str(ft_dir), "--epochs", "2",
                "--label-fraction", "0.5", "--seed", "2"]) == 0
    summary = json.loads((ft_dir / "summary.json").read_text())
    assert summary["metric_name"] == "auc"


def test_bench_smoke(tmp_path):
    out = tmp_path / "bench"
    assert run(["bench", "--sizes", "60,120", "--trees-per-point", "1",
                "--hidden-dim", "8", "--layers", "1",
                "--out", str(out)]) == 0
    bench = json.loads((out / "bench.json").read_text())
    assert [r["n_nodes"] for r in bench["rows"]] == [60, 120]
    assert (out / "bench.csv").exists()


def test_outputs_stay_in_run_directory(dataset_dir, tmp_path):
    run_dir = tmp_path / "contained"
    before = set(os.listdir(tmp_path))
    assert run(["train", "--manifest", str(dataset_dir / "manifest.json"),
                "--out", str(run_dir), "--epochs", "1", "--hidden-dim", "4",
                "--layers", "1", "--seed", "0"]) == 0
    after = set(os.listdir(tmp_path))
    assert after - before == {"contained"}
