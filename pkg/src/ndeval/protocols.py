"""Evaluation protocols: one-class and unlabeled-OOD, clean and attacked.

The one-class protocol treats each class as normal in turn, banks features of
that class's training split, scores the full test split, and macro-averages
AUROC over classes. The OOD protocol banks the whole (unlabeled) in-distribution
training split and scores in-test samples as normals against out-test samples
as outliers. With an attack configured, every test sample is attacked with the
sign matching its own role before the attacked AUROC is computed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attack import AttackConfig, attack_batch
from .backbone import BackboneGraph, extract_features
from .errors import ValidationError
from .metrics import auroc
from .scoring import BankSource, FeatureBank, KnnScorer, fit_gmm
from .tensor import Tensor

_SUBSAMPLE_BANK, _SUBSAMPLE_TEST, _GMM_SEED = 1, 2, 3


@dataclass
class Dataset:
    """Images in [0, 1] with dataset-native integer class ids."""

    train_images: Tensor
    train_labels: np.ndarray
    test_images: Tensor
    test_labels: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        for split, images, labels in (("train", self.train_images, self.train_labels),
                                      ("test", self.test_images, self.test_labels)):
            if len(images.dims) != 4:
                raise ValidationError(f"{split} images must be NCHW, got dims {images.dims}")
            if labels.ndim != 1 or labels.shape[0] != images.dims[0]:
                raise ValidationError(
                    f"{split} has {images.dims[0]} images but {labels.shape} labels")
            if labels.size and labels.min() < 0:
                raise ValidationError(f"{split} class ids must be non-negative")


@dataclass
class ProtocolSpec:
    kind: str                       # "one_class" | "ood"
    scorer: str = "knn"             # "knn" | "gmm"
    k: int = 2
    gmm_components: int = 5
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-6
    attack: Optional[AttackConfig] = None
    train_cap: Optional[int] = None
    test_cap: Optional[int] = None
    normal_class: Optional[int] = None
    seed: int = 0
    workers: int = 1
    extract_batch: int = 256

    def __post_init__(self):
        if self.kind not in ("one_class", "ood"):
            raise ValidationError(f"protocol kind must be one_class or ood, got {self.kind!r}")
        if self.scorer not in ("knn", "gmm"):
            raise ValidationError(f"scorer must be knn or gmm, got {self.scorer!r}")
        for name, cap in (("train_cap", self.train_cap), ("test_cap", self.test_cap)):
            if cap is not None and cap < 1:
                raise ValidationError(f"{name} must be >= 1, got {cap}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> dict:
        doc = {
            "kind": self.kind, "scorer": self.scorer, "k": self.k,
            "gmm_components": self.gmm_components,
            "gmm_max_iters": self.gmm_max_iters, "gmm_tol": self.gmm_tol,
            "attack": self.attack.to_dict() if self.attack else None,
            "train_cap": self.train_cap, "test_cap": self.test_cap,
            "normal_class": self.normal_class, "seed": self.seed,
            "workers": self.workers,
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolSpec":
        doc = dict(doc)
        attack = doc.get("attack")
        if attack is not None:
            doc["attack"] = AttackConfig.from_dict(attack)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown protocol config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class EvalEntry:
    name: str
    clean_auroc: float
    attacked_auroc: Optional[float]
    n_normal: int
    n_outlier: int
    n_bank: int


@dataclass
class EvalReport:
    kind: str
    backbone_hash: str
    config: dict
    entries: list[EvalEntry]
    macro_clean_auroc: float
    macro_attacked_auroc: Optional[float]
    wall_clock_seconds: float
    engine_version: str = __version__
    schema_version: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for e in self.entries:
            for v in (e.clean_auroc, e.attacked_auroc):
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValidationError(f"AUROC {v} outside [0, 1] in entry '{e.name}'")
        clean = float(np.mean([e.clean_auroc for e in self.entries]))
        if abs(clean - self.macro_clean_auroc) > 1e-12:
            raise ValidationError("macro clean AUROC does not equal the mean of entries")
        attacked = [e.attacked_auroc for e in self.entries]
        if all(a is not None for a in attacked):
            if abs(float(np.mean(attacked)) - (self.macro_attacked_auroc or 0.0)) > 1e-12:
                raise ValidationError("macro attacked AUROC does not equal the mean of entries")
        elif self.macro_attacked_auroc is not None:
            raise ValidationError("macro attacked AUROC set but per-entry values are missing")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "engine_version": self.engine_version,
            "kind": self.kind,
            "backbone_hash": self.backbone_hash,
            "config": self.config,
            "entries": [vars(e).copy() for e in self.entries],
            "macro_clean_auroc": self.macro_clean_auroc,
            "macro_attacked_auroc": self.macro_attacked_auroc,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        if doc.get("schema_version") != 1:
            raise ValidationError(f"unsupported report schema {doc.get('schema_version')!r}")
        entries = [EvalEntry(**e) for e in doc["entries"]]
        return cls(kind=doc["kind"], backbone_hash=doc["backbone_hash"],
                   config=doc["config"], entries=entries,
                   macro_clean_auroc=doc["macro_clean_auroc"],
                   macro_attacked_auroc=doc["macro_attacked_auroc"],
                   wall_clock_seconds=doc["wall_clock_seconds"],
                   engine_version=doc["engine_version"],
                   schema_version=doc["schema_version"])


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def emit_table(reports: list[EvalReport]) -> str:
    """Render reports as a dataset x {clean, PGD} AUROC table in percent."""
    rows = [("dataset", "clean", "pgd")]
    for r in reports:
        tag = r.config.get("dataset_tag") or r.kind
        clean = f"{100.0 * r.macro_clean_auroc:.1f}"
        pgd = (f"{100.0 * r.macro_attacked_auroc:.1f}"
               if r.macro_attacked_auroc is not None else "-")
        rows.append((f"{tag} ({r.kind})", clean, pgd))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation drivers


def _subsample(n: int, cap: Optional[int], seed: int, class_key: int,
               salt: int) -> np.ndarray:
    if cap is None or cap >= n:
        return np.arange(n)
    ss = np.random.SeedSequence(seed, spawn_key=(class_key, salt))
    rng = np.random.Generator(np.random.PCG64(ss))
    return np.sort(rng.choice(n, size=cap, replace=False))


def _features_batched(graph: BackboneGraph, images: Tensor, batch: int) -> np.ndarray:
    out = []
    n = images.dims[0]
    for i in range(0, n, batch):
        chunk = Tensor._wrap(np.array(images.data[i:i + batch], copy=True))
        out.append(extract_features(graph, chunk).data)
    return np.concatenate(out, axis=0)


def _build_scorer(spec: ProtocolSpec, bank: FeatureBank, class_key: int):
    if spec.scorer == "knn":
        return KnnScorer(bank, k=spec.k)
    ss = np.random.SeedSequence(spec.seed, spawn_key=(class_key, _GMM_SEED))
    gmm_seed = int(ss.generate_state(1)[0])
    return fit_gmm(bank, components=spec.gmm_components, seed=gmm_seed,
                   max_iters=spec.gmm_max_iters, tol=spec.gmm_tol)


def _eval_entry(spec: ProtocolSpec, graph: BackboneGraph, name: str,
                bank_images: Tensor, test_images: Tensor, roles: np.ndarray,
                test_indices: np.ndarray, class_key: int, tag: str) -> EvalEntry:
    """Score (and optionally attack) one normal-vs-outlier split."""
    bank_feats = _features_batched(graph, bank_images, spec.extract_batch)
    bank = FeatureBank(bank_feats, source=BankSource(graph.weights_hash, tag))
    scorer = _build_scorer(spec, bank, class_key)

    test_feats = _features_batched(graph, test_images, spec.extract_batch)
    scores = np.array([scorer.score(z).score for z in test_feats])
    normal_mask = roles == 0
    clean = auroc(scores[normal_mask], scores[~normal_mask])

    attacked = None
    if spec.attack is not None:
        outcomes = []
        for i in range(0, test_images.dims[0], spec.extract_batch):
            chunk = Tensor._wrap(np.array(test_images.data[i:i + spec.extract_batch],
                                          copy=True))
            outcomes.extend(attack_batch(
                graph, scorer, chunk, roles[i:i + spec.extract_batch], spec.attack,
                workers=spec.workers, start_index=int(test_indices[i])))
        adv_scores = np.array([o.final_score for o in outcomes])
        attacked = auroc(adv_scores[normal_mask], adv_scores[~normal_mask])

    return EvalEntry(name=name, clean_auroc=clean, attacked_auroc=attacked,
                     n_normal=int(normal_mask.sum()),
                     n_outlier=int((~normal_mask).sum()), n_bank=bank.n)


def _finish_report(spec: ProtocolSpec, graph: BackboneGraph, entries: list[EvalEntry],
                   t0: float, tag: str) -> EvalReport:
    macro_clean = float(np.mean([e.clean_auroc for e in entries]))
    attacked = [e.attacked_auroc for e in entries]
    macro_attacked = float(np.mean(attacked)) if all(a is not None for a in attacked) else None
    config = spec.to_dict()
    config["dataset_tag"] = tag
    return EvalReport(kind=spec.kind, backbone_hash=graph.weights_hash,
                      config=config, entries=entries,
                      macro_clean_auroc=macro_clean,
                      macro_attacked_auroc=macro_attacked,
                      wall_clock_seconds=time.perf_counter() - t0)


def one_class_eval(spec: ProtocolSpec, graph: BackboneGraph,
                   dataset: Dataset) -> EvalReport:
    """Each class plays normal in turn; training split banks, test split scores."""
    if spec.kind != "one_class":
        raise ValidationError(f"spec.kind is {spec.kind!r}, expected 'one_class'")
    t0 = time.perf_counter()
    classes = sorted(int(c) for c in np.unique(dataset.test_labels))
    if len(classes) < 2:
        raise ValidationError("one-class evaluation needs at least 2 classes")
    if spec.normal_class is not None:
        if spec.normal_class not in classes:
            raise ValidationError(f"normal_class {spec.normal_class} not present in dataset")
        classes = [spec.normal_class]

    entries = []
    for c in classes:
        train_idx = np.flatnonzero(dataset.train_labels == c)
        if train_idx.size == 0:
            raise ValidationError(f"class {c} has no training samples to bank")
        train_idx = train_idx[_subsample(train_idx.size, spec.train_cap, spec.seed,
                                         c, _SUBSAMPLE_BANK)]
        test_idx = _subsample(dataset.test_labels.size, spec.test_cap, spec.seed,
                              c, _SUBSAMPLE_TEST)
        roles = (dataset.test_labels[test_idx] != c).astype(np.int64)
        if roles.min() == roles.max():
            raise ValidationError(
                f"test subsample for class {c} lost one of the roles; raise test_cap")
        bank_images = Tensor._wrap(np.array(dataset.train_images.data[train_idx], copy=True))
        test_images = Tensor._wrap(np.array(dataset.test_images.data[test_idx], copy=True))
        entries.append(_eval_entry(spec, graph, f"class_{c}", bank_images,
                                   test_images, roles, test_idx, c, dataset.tag))
    return _finish_report(spec, graph, entries, t0, dataset.tag)


def ood_eval(spec: ProtocolSpec, graph: BackboneGraph, in_dataset: Dataset,
             out_dataset: Dataset) -> EvalReport:
    """Bank the unlabeled in-distribution train split; score in-test vs out-test."""
    if spec.kind != "ood":
        raise ValidationError(f"spec.kind is {spec.kind!r}, expected 'ood'")
    if in_dataset is out_dataset or (
            in_dataset.tag and in_dataset.tag == out_dataset.tag):
        raise ValidationError("OOD evaluation needs two distinct datasets")
    t0 = time.perf_counter()

    train_idx = _subsample(in_dataset.train_images.dims[0], spec.train_cap,
                           spec.seed, 0, _SUBSAMPLE_BANK)
    in_idx = _subsample(in_dataset.test_images.dims[0], spec.test_cap,
                        spec.seed, 0, _SUBSAMPLE_TEST)
    out_idx = _subsample(out_dataset.test_images.dims[0], spec.test_cap,
                         spec.seed, 1, _SUBSAMPLE_TEST)
    if in_dataset.test_images.dims[1:] != out_dataset.test_images.dims[1:]:
        raise ValidationError(
            f"in/out test image shapes differ: {in_dataset.test_images.dims[1:]} vs "
            f"{out_dataset.test_images.dims[1:]}")

    bank_images = Tensor._wrap(np.array(in_dataset.train_images.data[train_idx], copy=True))
    test = np.concatenate([in_dataset.test_images.data[in_idx],
                           out_dataset.test_images.data[out_idx]], axis=0)
    roles = np.concatenate([np.zeros(in_idx.size, dtype=np.int64),
                            np.ones(out_idx.size, dtype=np.int64)])
    indices = np.concatenate([in_idx, out_idx + in_dataset.test_images.dims[0]])
    tag = f"{in_dataset.tag or 'in'}_vs_{out_dataset.tag or 'out'}"
    entry = _eval_entry(spec, graph, tag, bank_images,
                        Tensor._wrap(np.array(test, copy=True)), roles, indices, 0,
                        in_dataset.tag)
    return _finish_report(spec, graph, [entry], t0, tag)
