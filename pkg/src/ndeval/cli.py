"""Command-line surface.

Subcommands: extract, score, attack, eval, gmm-fit, check. Exit codes:
0 success, 2 validation error, 3 IO/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, attack_batch
from .backbone import BackboneGraph, load_manifest, load_weights
from .dataio import load_idx_images, load_idx_labels, load_ztb, save_ztb
from .errors import FormatError, NumericError, ValidationError
from .metrics import auroc  # noqa: F401  (re-exported for scripting convenience)
from .protocols import (Dataset, ProtocolSpec, emit_table, one_class_eval,
                        ood_eval, write_report)
from .scoring import (BankSource, FeatureBank, GmmModel, KnnScorer, fit_gmm,
                      load_bank, save_bank)
from .selfcheck import run_all
from .tensor import Tensor
from .protocols import _features_batched


def _load_images(path) -> Tensor:
    """Load an image tensor from ZTB or IDX, detected by magic bytes."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"ZTB1":
        t = load_ztb(path)
        if len(t.dims) != 4:
            raise ValidationError(f"{path}: image tensor must be NCHW, got dims {t.dims}")
        return t
    return load_idx_images(path)


def _load_graph(manifest_path, weights_path) -> BackboneGraph:
    graph = load_manifest(Path(manifest_path).read_bytes())
    return load_weights(graph, Path(weights_path).read_bytes(),
                        source=str(weights_path))


def _load_dataset(doc: dict, need_train_labels: bool) -> Dataset:
    test_images = _load_images(doc["test_images"])
    train_images = _load_images(doc["train_images"])
    if "train_labels" in doc and doc["train_labels"]:
        train_labels = load_idx_labels(doc["train_labels"])
    elif need_train_labels:
        raise ValidationError("one_class protocol requires train_labels")
    else:
        train_labels = np.zeros(train_images.dims[0], dtype=np.int64)
    if "test_labels" in doc and doc["test_labels"]:
        test_labels = load_idx_labels(doc["test_labels"])
    elif need_train_labels:
        raise ValidationError("one_class protocol requires test_labels")
    else:
        test_labels = np.zeros(test_images.dims[0], dtype=np.int64)
    return Dataset(train_images=train_images, train_labels=train_labels,
                   test_images=test_images, test_labels=test_labels,
                   tag=doc.get("tag", ""))


def _cmd_extract(args) -> int:
    graph = _load_graph(args.manifest, args.weights)
    images = _load_images(args.images)
    if args.labels and args.normal_class is not None:
        labels = load_idx_labels(args.labels)
        keep = np.flatnonzero(labels == args.normal_class)
        if keep.size == 0:
            raise ValidationError(f"no samples with class {args.normal_class}")
        images = Tensor(np.array(images.data[keep]))
    if args.cap is not None and args.cap < images.dims[0]:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(args.seed)))
        keep = np.sort(rng.choice(images.dims[0], size=args.cap, replace=False))
        images = Tensor(np.array(images.data[keep]))
    feats = _features_batched(graph, images, args.batch)
    bank = FeatureBank(feats, source=BankSource(graph.weights_hash, args.tag))
    save_bank(bank, args.out)
    print(f"wrote bank {args.out}: {bank.n} x {bank.d} "
          f"(backbone {graph.weights_hash})")
    return 0


def _cmd_score(args) -> int:
    graph = _load_graph(args.manifest, args.weights)
    bank = load_bank(args.bank)
    images = _load_images(args.images)
    if args.gmm_model:
        scorer = GmmModel.from_json(Path(args.gmm_model).read_text())
    else:
        scorer = KnnScorer(bank, k=args.k)
    feats = _features_batched(graph, images, args.batch)
    results = [scorer.score(z) for z in feats]
    doc = {
        "schema_version": 1,
        "scorer": scorer.describe(),
        "backbone_hash": graph.weights_hash,
        "scores": [r.score for r in results],
    }
    if results and results[0].neighbors is not None:
        doc["neighbors"] = [list(r.neighbors) for r in results]
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"scored {len(results)} samples with {scorer.describe()} -> {args.out}")
    return 0


def _cmd_attack(args) -> int:
    graph = _load_graph(args.manifest, args.weights)
    bank = load_bank(args.bank)
    images = _load_images(args.images)
    if args.gmm_model:
        scorer = GmmModel.from_json(Path(args.gmm_model).read_text())
    else:
        scorer = KnnScorer(bank, k=args.k)
    cfg = AttackConfig(epsilon=args.epsilon, steps=args.steps, alpha=args.alpha,
                       restarts=args.restarts, seed=args.seed,
                       last_iterate=args.last_iterate)
    labels = [args.label] * images.dims[0]
    outcomes = attack_batch(graph, scorer, images, labels, cfg,
                            workers=args.workers)
    doc = {
        "schema_version": 1,
        "scorer": scorer.describe(),
        "backbone_hash": graph.weights_hash,
        "config": cfg.to_dict(),
        "label": args.label,
        "outcomes": [{"initial_score": o.initial_score,
                      "final_score": o.final_score,
                      "linf": o.linf,
                      "best_restart": o.best_restart} for o in outcomes],
    }
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    if args.adv_out:
        adv = np.stack([o.x_adv.data for o in outcomes])
        save_ztb(Tensor(adv), args.adv_out)
    moved = [abs(o.final_score - o.initial_score) for o in outcomes]
    print(f"attacked {len(outcomes)} samples (epsilon={args.epsilon}, "
          f"steps={args.steps}); mean |score shift| = {float(np.mean(moved)):.4g}")
    return 0


def _cmd_gmm_fit(args) -> int:
    bank = load_bank(args.bank)
    model = fit_gmm(bank, components=args.components, seed=args.seed,
                    max_iters=args.max_iters, tol=args.tol)
    Path(args.out).write_text(model.to_json() + "\n")
    meta = model.metadata
    print(f"fit gmm(m={model.m}) on {bank.n} rows: {meta['iterations']} iterations, "
          f"final log-likelihood {meta['final_log_likelihood']:.4f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    backbone = cfg.pop("backbone", None)
    if not backbone or "manifest" not in backbone or "weights" not in backbone:
        raise ValidationError("eval config needs backbone: {manifest, weights}")
    graph = _load_graph(backbone["manifest"], backbone["weights"])

    dataset_docs = {k: cfg.pop(k, None) for k in ("dataset", "in_dataset", "out_dataset")}
    spec_doc = dict(cfg)
    spec_doc["seed"] = args.seed
    for key in ("k", "train_cap", "test_cap", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            spec_doc[key] = value
    attack_overrides = {k: getattr(args, k) for k in ("epsilon", "steps")
                        if getattr(args, k, None) is not None}
    if attack_overrides:
        base = spec_doc.get("attack")
        if base is None and "epsilon" not in attack_overrides:
            raise ValidationError(
                "--steps override needs an attack; set --epsilon or an attack config")
        spec_doc["attack"] = {**(base or {}), **attack_overrides}
    if spec_doc.get("attack") is not None:
        spec_doc["attack"] = {**spec_doc["attack"], "seed": args.seed}
    spec = ProtocolSpec.from_dict(spec_doc)

    if spec.kind == "one_class":
        if not dataset_docs["dataset"]:
            raise ValidationError("one_class eval config needs a 'dataset' section")
        dataset = _load_dataset(dataset_docs["dataset"], need_train_labels=True)
        report = one_class_eval(spec, graph, dataset)
    else:
        if not dataset_docs["in_dataset"] or not dataset_docs["out_dataset"]:
            raise ValidationError("ood eval config needs 'in_dataset' and 'out_dataset'")
        in_ds = _load_dataset(dataset_docs["in_dataset"], need_train_labels=False)
        out_ds = _load_dataset(dataset_docs["out_dataset"], need_train_labels=False)
        report = ood_eval(spec, graph, in_ds, out_ds)

    write_report(report, args.out)
    print(f"wrote report {args.out} (macro clean AUROC "
          f"{100 * report.macro_clean_auroc:.1f}%)")
    if args.table:
        print(emit_table([report]), end="")
    return 0


def _cmd_check(args) -> int:
    results = run_all(parity_path=args.parity)
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"[{status}] {r.name}: {r.detail}")
        failed += 0 if r.ok else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed", file=sys.stderr)
        return 4
    print(f"all {len(results)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndeval",
                                description="novelty-detection robustness engine")
    p.add_argument("--version", action="version", version=f"ndeval {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    px = sub.add_parser("extract", help="backbone + images -> ZTB feature bank")
    px.add_argument("--manifest", required=True)
    px.add_argument("--weights", required=True)
    px.add_argument("--images", required=True)
    px.add_argument("--labels")
    px.add_argument("--normal-class", type=int, dest="normal_class")
    px.add_argument("--cap", type=int)
    px.add_argument("--seed", type=int, default=0)
    px.add_argument("--tag", required=True)
    px.add_argument("--batch", type=int, default=256)
    px.add_argument("--out", required=True)
    px.set_defaults(func=_cmd_extract)

    ps = sub.add_parser("score", help="bank + test images -> anomaly scores")
    ps.add_argument("--manifest", required=True)
    ps.add_argument("--weights", required=True)
    ps.add_argument("--bank", required=True)
    ps.add_argument("--images", required=True)
    ps.add_argument("--k", type=int, default=2)
    ps.add_argument("--gmm-model", dest="gmm_model")
    ps.add_argument("--batch", type=int, default=256)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=_cmd_score)

    pa = sub.add_parser("attack", help="PGD on the anomaly score")
    pa.add_argument("--manifest", required=True)
    pa.add_argument("--weights", required=True)
    pa.add_argument("--bank", required=True)
    pa.add_argument("--images", required=True)
    pa.add_argument("--label", type=int, required=True, choices=(0, 1))
    pa.add_argument("--epsilon", type=float, required=True)
    pa.add_argument("--steps", type=int, default=100)
    pa.add_argument("--alpha", type=float)
    pa.add_argument("--restarts", type=int, default=1)
    pa.add_argument("--last-iterate", action="store_true", dest="last_iterate")
    pa.add_argument("--k", type=int, default=2)
    pa.add_argument("--gmm-model", dest="gmm_model")
    pa.add_argument("--workers", type=int, default=1)
    pa.add_argument("--seed", type=int, required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--adv-out", dest="adv_out")
    pa.set_defaults(func=_cmd_attack)

    pe = sub.add_parser("eval", help="protocol config -> EvalReport JSON")
    pe.add_argument("--config", required=True)
    pe.add_argument("--seed", type=int, required=True)
    pe.add_argument("--out", required=True)
    pe.add_argument("--table", action="store_true")
    pe.add_argument("--k", type=int)
    pe.add_argument("--epsilon", type=float)
    pe.add_argument("--steps", type=int)
    pe.add_argument("--train-cap", type=int, dest="train_cap")
    pe.add_argument("--test-cap", type=int, dest="test_cap")
    pe.add_argument("--workers", type=int)
    pe.set_defaults(func=_cmd_eval)

    pg = sub.add_parser("gmm-fit", help="bank -> GMM model file")
    pg.add_argument("--bank", required=True)
    pg.add_argument("--components", type=int, default=5)
    pg.add_argument("--max-iters", type=int, default=200, dest="max_iters")
    pg.add_argument("--tol", type=float, default=1e-6)
    pg.add_argument("--seed", type=int, required=True)
    pg.add_argument("--out", required=True)
    pg.set_defaults(func=_cmd_gmm_fit)

    pc = sub.add_parser("check", help="run the internal oracle/gradient self-tests")
    pc.add_argument("--parity", help="parity record JSON from the exporter")
    pc.set_defaults(func=_cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
