#!/usr/bin/env python3
"""Materialize the synthetic dataset and identity backbone as engine files.

Writes IDX image/label files, the backbone manifest + ZWB blob, and a ready
`eval.json` config, so the whole CLI flow can be driven on disk:

    python3 scripts/make_synthetic_files.py --out /tmp/synth
    ndeval eval --config /tmp/synth/eval.json --seed 7 --out /tmp/synth/report.json --table
"""

import argparse
import json
import sys
from pathlib import Path

from ndeval.backbone import save_manifest, save_weights
from ndeval.dataio import save_idx_images, save_idx_labels
from ndeval.synthetic import class_gap, identity_backbone, two_class_images


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-train", type=int, default=60)
    ap.add_argument("--n-test", type=int, default=60)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = two_class_images(n_train=args.n_train, n_test=args.n_test,
                               seed=args.seed)
    graph = identity_backbone()

    (out / "backbone.json").write_text(save_manifest(graph))
    (out / "backbone.zwb").write_bytes(save_weights(graph))
    save_idx_images(dataset.train_images, out / "train-images.idx")
    save_idx_labels(dataset.train_labels, out / "train-labels.idx")
    save_idx_images(dataset.test_images, out / "test-images.idx")
    save_idx_labels(dataset.test_labels, out / "test-labels.idx")

    config = {
        "kind": "one_class",
        "scorer": "knn",
        "k": 2,
        "attack": {"epsilon": class_gap() / 2, "steps": 100},
        "backbone": {"manifest": str(out / "backbone.json"),
                     "weights": str(out / "backbone.zwb")},
        "dataset": {"train_images": str(out / "train-images.idx"),
                    "train_labels": str(out / "train-labels.idx"),
                    "test_images": str(out / "test-images.idx"),
                    "test_labels": str(out / "test-labels.idx"),
                    "tag": "two_blobs"},
    }
    (out / "eval.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"wrote dataset, backbone and eval.json under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
