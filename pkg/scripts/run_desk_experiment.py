#!/usr/bin/env python3
"""Desk-scale study: supervised training vs SSL pretraining + finetuning.

Generates the curvature-coupled two-class dataset, trains the supervised
model on full labels, then compares scratch vs pretrained models when only
a fraction of the training labels is available.  Results print as a small
table; pass --runs for multi-seed medians.
"""

import argparse
import json

import numpy as np

from gtmp.encoder import EncoderConfig
from gtmp.synthetic import GeneratorConfig, generate_synthetic
from gtmp.train import TrainConfig, finetune, pretrain_ssl, train_supervised


def run_once(dataset, seed, args):
    enc = EncoderConfig(num_layers=args.layers, hidden_dim=args.hidden_dim)
    common = dict(task_kind="classification", encoder=enc, seed=seed,
                  split_seed=args.split_seed, batch_size=args.batch_size,
                  lr=args.lr)

    _, full = train_supervised(dataset, TrainConfig(
        epochs=args.epochs, **common))
    _, scratch = train_supervised(dataset, TrainConfig(
        epochs=args.epochs, label_fraction=args.label_fraction, **common))
    encoder, pre = pretrain_ssl([t for t, _ in dataset], TrainConfig(
        epochs=args.pretrain_epochs, mode="pretrain", **common))
    _, tuned = finetune(encoder, dataset, TrainConfig(
        epochs=args.epochs, mode="finetune",
        label_fraction=args.label_fraction, **common))
    return {
        "supervised_full": full.test_metric,
        "scratch_lowlabel": scratch.test_metric,
        "pretrain_final_loss": pre.train_losses[-1],
        "finetune_lowlabel": tuned.test_metric,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--max-nodes", type=int, default=110)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--pretrain-epochs", type=int, default=20)
    ap.add_argument("--hidden-dim", type=int, default=64)
    ap.add_argument("--layers", type=int, default=3)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--label-fraction", type=float, default=0.1)
    ap.add_argument("--runs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--split-seed", type=int, default=1234)
    ap.add_argument("--json-out", default=None)
    args = ap.parse_args()

    data = generate_synthetic(
        GeneratorConfig(count=args.count, max_nodes=args.max_nodes),
        seed=args.seed)
    dataset = [(tree, targets["class"]) for tree, targets in data]

    rows = [run_once(dataset, args.seed + r, args) for r in range(args.runs)]
    keys = ["supervised_full", "scratch_lowlabel", "finetune_lowlabel"]
    print(f"{'run':>4}  " + "  ".join(f"{k:>18}" for k in keys))
    for r, row in enumerate(rows):
        print(f"{r:>4}  " + "  ".join(f"{row[k]:>18.4f}" for k in keys))
    medians = {k: float(np.median([row[k] for row in rows])) for k in keys}
    print(f"{'med':>4}  " + "  ".join(f"{medians[k]:>18.4f}" for k in keys))

    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump({"rows": rows, "medians": medians}, fh, indent=2)


if __name__ == "__main__":
    main()
