"""Command-line interface: one subcommand per pipeline stage.

Every subcommand echoes its effective configuration next to its outputs so
a run can be reproduced from the artifacts alone.  Exit codes: 0 success,
1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import io as tio
from .encoder import ModelParams, decision_score, encode, predict
from .errors import FormatError, NumericFailure, ValidationError
from .geometry import FEATURE_NAMES, extract_branch_arrays, reconstruct_tree
from .synthetic import GeneratorConfig, generate_synthetic
from .train import (
    TrainConfig,
    auc,
    bench_scaling,
    finetune,
    invariance_test,
    mae,
    pretrain_ssl,
    train_supervised,
)
from .tree import Branch3

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _write_json(path: str, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _snapshot(out_path: str, command: str, config: dict):
    """Effective-config echo inside the run directory.

    Directory outputs get ``<out>/config.json``; single-file artifacts get a
    ``<file>.config.json`` sibling (their run directory is the parent).
    """
    if os.path.isdir(out_path):
        target = os.path.join(out_path, "config.json")
    else:
        directory = os.path.dirname(os.path.abspath(out_path)) or "."
        os.makedirs(directory, exist_ok=True)
        target = os.path.join(directory,
                              f"{os.path.basename(out_path)}.config.json")
    _write_json(target, {"command": command, "config": config})


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_train_config(args) -> TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid config JSON: {exc}") from None
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "label_fraction": getattr(args, "label_fraction", None),
        "freeze_encoder": getattr(args, "freeze_encoder", None),
        "head_warmup_epochs": getattr(args, "head_warmup_epochs", None),
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    enc = base.get("encoder", {}) or {}
    if args.hidden_dim is not None:
        enc["hidden_dim"] = args.hidden_dim
    if args.layers is not None:
        enc["num_layers"] = args.layers
    if getattr(args, "alpha", None) is not None:
        enc["alpha"] = [float(a) for a in args.alpha.split(",")]
    base["encoder"] = enc
    return TrainConfig.from_dict(base)


def _load_labeled(manifest_path: str, task_kind: Optional[str] = None):
    dataset, manifest = tio.load_dataset(manifest_path)
    kind = task_kind or manifest.task_kind
    if kind == "classification":
        dataset = [(t, int(v)) for t, v in dataset]
    else:
        dataset = [(t, float(v)) for t, v in dataset]
    return dataset, manifest


# -- subcommand implementations ----------------------------------------------

def _cmd_generate(args) -> int:
    cfg = GeneratorConfig(
        count=args.count,
        task=args.task,
        depth_min=args.depth_min,
        depth_max=args.depth_max,
        max_nodes=args.max_nodes,
        class_coupled=not args.decoupled,
    )
    out = _ensure_dir(args.out)
    data = generate_synthetic(cfg, args.seed)
    tree_dir = _ensure_dir(os.path.join(out, "trees"))
    entries = []
    for idx, (tree, targets) in enumerate(data):
        rel = os.path.join("trees", f"tree_{idx:05d}.json")
        if cfg.task == "classification":
            target = targets["class"]
        else:
            target = targets[args.target]
            tree = tree.with_label(target)
        tio.save_tree_json(tree, os.path.join(out, rel))
        entries.append((rel, target))
    manifest = tio.DatasetManifest(entries=entries, task_kind=cfg.task,
                                   split_seed=args.seed)
    tio.save_manifest(manifest, os.path.join(out, "manifest.json"))
    _snapshot(out, "generate", {
        "count": cfg.count, "task": cfg.task, "depth_min": cfg.depth_min,
        "depth_max": cfg.depth_max, "max_nodes": cfg.max_nodes,
        "class_coupled": cfg.class_coupled, "target": args.target,
        "seed": args.seed,
    })
    print(f"wrote {len(entries)} trees + manifest under {out}")
    return EXIT_OK


def _parse_label(raw):
    if raw is None:
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def _cmd_convert(args) -> int:
    label = _parse_label(args.label)
    tree = tio.load_swc(args.infile, label=label)
    _snapshot(args.out, "convert", {"in": args.infile, "label": label})
    tio.save_tree_json(tree, args.out)
    print(f"converted {args.infile} ({len(tree)} nodes) -> {args.out}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    tree = tio.load_tree_json(args.infile)
    flat, values, mask = extract_branch_arrays(tree)
    _snapshot(args.out, "extract", {"in": args.infile})
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "k", "p", "valid_len", *FEATURE_NAMES,
                         *[f"mask_{n}" for n in FEATURE_NAMES]])
        for row, b in enumerate(flat):
            writer.writerow([b.i, b.j, b.k, b.p, b.valid_len,
                             *[repr(float(v)) for v in values[row]],
                             *[int(v) for v in mask[row]]])
    print(f"wrote {len(flat)} branch rows -> {args.out}")
    return EXIT_OK


def _read_feature_csv(path: str):
    from .geometry import BranchFeatures

    features = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            branch = Branch3(int(row["i"]), int(row["j"]), int(row["k"]),
                             int(row["p"]), int(row["valid_len"]))
            values = np.array([float(row[n]) for n in FEATURE_NAMES])
            mask = np.array([row[f"mask_{n}"] == "1" for n in FEATURE_NAMES])
            features[branch] = BranchFeatures(values, mask)
    if not features:
        raise FormatError(f"no feature rows in {path}")
    return features


def _cmd_reconstruct(args) -> int:
    topology = tio.load_tree_json(args.topology)
    features = _read_feature_csv(args.infile)
    seed_ids = [int(v) for v in args.seed_triple.split(",")]
    positions = reconstruct_tree(topology, features, seed_ids)
    coords = np.stack([positions[n.id] for n in topology.nodes])
    _snapshot(args.out, "reconstruct", {
        "in": args.infile, "topology": args.topology,
        "seed_triple": seed_ids,
    })
    tio.save_tree_json(topology.with_positions(coords), args.out)
    print(f"reconstructed {len(coords)} node positions -> {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_train_config(args)
    dataset, manifest = _load_labeled(args.manifest)
    config = TrainConfig.from_dict({**config.to_dict(),
                                    "task_kind": manifest.task_kind,
                                    "mode": "supervised",
                                    "split_seed": manifest.split_seed
                                    if config.split_seed is None else config.split_seed})
    out = _ensure_dir(args.out)
    reports = []
    for run in range(args.runs):
        run_cfg = TrainConfig.from_dict({**config.to_dict(),
                                         "seed": config.seed + run})
        params, report = train_supervised(dataset, run_cfg)
        params.save(os.path.join(out, f"checkpoint_run{run}.json"))
        _write_report(out, run, report)
        reports.append(report)
    _finish_runs(out, "train", config, reports)
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    config = _load_train_config(args)
    dataset, manifest = _load_labeled(args.manifest)
    config = TrainConfig.from_dict({**config.to_dict(), "mode": "pretrain",
                                    "split_seed": manifest.split_seed
                                    if config.split_seed is None else config.split_seed})
    out = _ensure_dir(args.out)
    encoder, report = pretrain_ssl([t for t, _ in dataset], config)
    encoder.save(os.path.join(out, "encoder.json"))
    _write_report(out, 0, report)
    with open(os.path.join(out, "curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "generative", "order", "total", "val_total"])
        for epoch in range(len(report.train_losses)):
            writer.writerow([epoch,
                             report.extra["generative_curve"][epoch],
                             report.extra["order_curve"][epoch],
                             report.train_losses[epoch],
                             report.val_losses[epoch]])
    _finish_runs(out, "pretrain", config, [report])
    return EXIT_OK


def _cmd_finetune(args) -> int:
    config = _load_train_config(args)
    dataset, manifest = _load_labeled(args.manifest)
    encoder = ModelParams.load(args.encoder)
    config = TrainConfig.from_dict({**config.to_dict(),
                                    "task_kind": manifest.task_kind,
                                    "mode": "finetune",
                                    "encoder": encoder.config.to_dict(),
                                    "split_seed": manifest.split_seed
                                    if config.split_seed is None else config.split_seed})
    out = _ensure_dir(args.out)
    reports = []
    for run in range(args.runs):
        run_cfg = TrainConfig.from_dict({**config.to_dict(),
                                         "seed": config.seed + run})
        params, report = finetune(encoder, dataset, run_cfg)
        params.save(os.path.join(out, f"checkpoint_run{run}.json"))
        _write_report(out, run, report)
        reports.append(report)
    _finish_runs(out, "finetune", config, reports)
    return EXIT_OK


def _write_report(out: str, run: int, report):
    _write_json(os.path.join(out, f"report_run{run}.json"), report.to_dict())
    with open(os.path.join(out, f"loss_curve_run{run}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for epoch in range(len(report.train_losses)):
            writer.writerow([epoch, report.train_losses[epoch],
                             report.val_losses[epoch],
                             report.lr_history[epoch]])


def _finish_runs(out: str, command: str, config: TrainConfig, reports):
    metrics = [r.test_metric for r in reports if r.test_metric is not None]
    summary = {
        "runs": len(reports),
        "metric_name": reports[0].metric_name,
        "metrics": metrics,
        "mean": float(np.mean(metrics)) if metrics else None,
        "std": float(np.std(metrics)) if metrics else None,
        "median": float(np.median(metrics)) if metrics else None,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    _snapshot(out, command, config.to_dict())
    shown = summary["metric_name"], summary["mean"], summary["std"]
    print(f"{command}: {shown[0]} mean={shown[1]} std={shown[2]} over {len(reports)} run(s)")


def _cmd_evaluate(args) -> int:
    params = ModelParams.load(args.checkpoint)
    dataset, manifest = _load_labeled(args.manifest)
    out = _ensure_dir(args.out)
    scores, vectors = [], []
    for tree, _ in dataset:
        _, vec = encode(tree, params)
        vectors.append(vec.value.copy())
        scores.append(decision_score(predict(vec, params, manifest.task_kind).value,
                                     manifest.task_kind))
    targets = [v for _, v in dataset]
    if manifest.task_kind == "classification":
        metric_name, metric = "auc", auc(scores, [int(v) for v in targets])
    else:
        metric_name, metric = "mae", mae(scores, [float(v) for v in targets])
    _write_json(os.path.join(out, "metrics.json"),
                {"metric_name": metric_name, "metric": metric,
                 "n_trees": len(dataset)})
    with open(os.path.join(out, "scores.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "path", "target", "score"])
        for idx, ((path, target), score) in enumerate(zip(manifest.entries, scores)):
            writer.writerow([idx, path, target, repr(float(score))])
    with open(os.path.join(out, "embeddings.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", *[f"e{d}" for d in range(len(vectors[0]))]])
        for idx, vec in enumerate(vectors):
            writer.writerow([idx, *[repr(float(v)) for v in vec]])
    _snapshot(out, "evaluate", {"checkpoint": args.checkpoint,
                                "manifest": args.manifest})
    print(f"evaluate: {metric_name}={metric}")
    return EXIT_OK


def _cmd_invariance(args) -> int:
    params = ModelParams.load(args.checkpoint)
    dataset, manifest = _load_labeled(args.manifest)
    report = invariance_test(params, dataset, args.n_transforms, args.seed,
                             task_kind=manifest.task_kind)
    out = _ensure_dir(args.out)
    _write_json(os.path.join(out, "invariance.json"), report.to_dict())
    rows_path = os.path.join(out, "invariance.csv")
    with open(rows_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "magnitude", "max_deviation", "metric"])
        for row in report.rows:
            writer.writerow([row["kind"], row["magnitude"],
                             repr(row["max_deviation"]),
                             "" if row["metric"] is None else repr(row["metric"])])
    _render_invariance_svg(report, os.path.join(out, "invariance.svg"))
    _snapshot(out, "invariance", {"checkpoint": args.checkpoint,
                                  "manifest": args.manifest,
                                  "n_transforms": args.n_transforms,
                                  "seed": args.seed})
    print(f"invariance: max deviation {report.max_deviation:.3e}")
    return EXIT_OK


def _render_invariance_svg(report, path: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, kind in zip(axes, ("rotation", "translation")):
        rows = [r for r in report.rows if r["kind"] == kind]
        mags = [r["magnitude"] for r in rows]
        metric = [r["metric"] for r in rows]
        if all(m is not None for m in metric):
            ax.plot(mags, metric, marker="o")
            ax.set_ylabel("AUC")
            ax.set_ylim(0.0, 1.05)
        else:
            ax.plot(mags, [r["max_deviation"] for r in rows], marker="o")
            ax.set_ylabel("max |score change|")
        ax.set_xlabel(f"{kind} magnitude")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _cmd_bench(args) -> int:
    config = _load_train_config(args)
    seed = args.seed if args.seed is not None else 0
    sizes = [int(s) for s in args.sizes.split(",")]
    report = bench_scaling(sizes, args.trees_per_point, config, seed,
                           repeats=args.repeats)
    out = _ensure_dir(args.out)
    _write_json(os.path.join(out, "bench.json"), report.to_dict())
    with open(os.path.join(out, "bench.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_nodes", "seconds_mean", "seconds_std"])
        for row in report.rows:
            writer.writerow([row["n_nodes"], repr(row["seconds_mean"]),
                             repr(row["seconds_std"])])
    _snapshot(out, "bench", {"sizes": sizes,
                             "trees_per_point": args.trees_per_point,
                             "repeats": args.repeats, "seed": args.seed,
                             "train": config.to_dict()})
    line = "  ".join(f"{r['n_nodes']}:{r['seconds_mean']:.3f}s" for r in report.rows)
    print(line)
    print(f"pearson r = {report.pearson_r:.6f}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_train_flags(p: argparse.ArgumentParser, runs: bool = True):
    p.add_argument("--config", help="JSON file mirroring TrainConfig")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--layers", type=int)
    p.add_argument("--alpha", help="comma-separated ancestor weights a1,a2,a3")
    p.add_argument("--seed", type=int, default=None)
    if runs:
        p.add_argument("--runs", type=int, default=1,
                       help="repeat with seeds seed+0..runs-1")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gtmp", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--task", choices=("classification", "regression"),
                   default="classification")
    p.add_argument("--depth-min", type=int, default=9, dest="depth_min")
    p.add_argument("--depth-max", type=int, default=11, dest="depth_max")
    p.add_argument("--max-nodes", type=int, default=110, dest="max_nodes")
    p.add_argument("--target", choices=("diameter", "radius"), default="diameter")
    p.add_argument("--decoupled", action="store_true",
                   help="labels carry no geometric signal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert", help="SWC -> portable tree JSON")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--label", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="branch feature CSV for one tree")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="coordinates from features")
    p.add_argument("--in", dest="infile", required=True,
                   help="feature CSV from `extract`")
    p.add_argument("--topology", required=True,
                   help="tree JSON providing topology + seed positions")
    p.add_argument("--seed-triple", required=True, dest="seed_triple",
                   help="three consecutive node ids j,k,p")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="supervised training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p, runs=False)

    p = sub.add_parser("finetune", help="supervised training from an encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--label-fraction", type=float, dest="label_fraction")
    p.add_argument("--freeze-encoder", action="store_const", const=True,
                   default=None, dest="freeze_encoder")
    p.add_argument("--head-warmup", type=int, default=None,
                   dest="head_warmup_epochs",
                   help="epochs of head-only training before unfreezing")
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="metrics + embeddings for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("invariance", help="rigid-transform robustness sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-transforms", type=int, default=3, dest="n_transforms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="epoch-time scaling over tree sizes")
    p.add_argument("--sizes", required=True,
                   help="comma-separated node counts, ascending")
    p.add_argument("--trees-per-point", type=int, default=3,
                   dest="trees_per_point")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_train_flags(p, runs=False)

    return parser


COMMANDS = {
    "generate": _cmd_generate,
    "convert": _cmd_convert,
    "extract": _cmd_extract,
    "reconstruct": _cmd_reconstruct,
    "train": _cmd_train,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "invariance": _cmd_invariance,
    "bench": _cmd_bench,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    handler = COMMANDS[args.command]
    try:
        return handler(args)
    except NumericFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
