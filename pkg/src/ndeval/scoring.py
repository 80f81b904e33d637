"""Anomaly scoring over a bank of normal-sample features.

Two scorers share one interface (``score``, ``score_grad``, ``backbone_hash``):

* k-NN: sum of the k smallest Euclidean distances from the query to the bank,
  higher means more anomalous.
* GMM: negative log-likelihood under a diagonal-covariance mixture fit to the
  bank by EM.

Distances, densities and gradients accumulate in float64 regardless of the
bank's storage dtype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ValidationError
from .tensor import Tensor

DISTANCE_FLOOR = 1e-12     # below this a neighbor contributes zero gradient
VARIANCE_FLOOR = 1e-6

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class BankSource:
    backbone_hash: str = ""
    dataset_tag: str = ""


class FeatureBank:
    """n x d matrix of float32 feature rows from normal samples."""

    def __init__(self, features, source: BankSource = BankSource()):
        if isinstance(features, Tensor):
            features = features.data
        arr = np.ascontiguousarray(features, dtype=np.float32)
        if arr.ndim != 2:
            raise ValidationError(f"feature bank must be 2-d (n, d), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"feature bank must be non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("feature bank contains non-finite rows")
        arr.flags.writeable = False
        self.features = arr
        self.source = source

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ScoreResult:
    score: float
    neighbors: tuple[int, ...] | None
    source: BankSource
    scorer: str


def _check_query(z, d: int) -> np.ndarray:
    if isinstance(z, Tensor):
        z = z.data
    q = np.asarray(z, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != d:
        raise ValidationError(f"query has shape {q.shape}, scorer expects ({d},)")
    if not np.isfinite(q).all():
        raise NumericError("query feature vector contains non-finite values")
    return q


def _k_smallest(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest values, ties at the cut kept by lowest index,
    returned sorted by (distance, index)."""
    n = dist.shape[0]
    if k == n:
        idx = np.arange(n)
    else:
        kth = np.partition(dist, k - 1)[k - 1]
        strict = np.flatnonzero(dist < kth)
        tied = np.flatnonzero(dist == kth)
        idx = np.concatenate([strict, tied[: k - strict.size]])
    order = np.lexsort((idx, dist[idx]))
    return idx[order]


class KnnScorer:
    """Sum of the k smallest Euclidean distances to the bank."""

    def __init__(self, bank: FeatureBank, k: int = 2):
        if not isinstance(k, (int, np.integer)) or k < 1:
            raise ValidationError(f"k must be a positive integer, got {k!r}")
        if k > bank.n:
            raise ValidationError(f"k={k} exceeds bank size n={bank.n}")
        self.bank = bank
        self.k = int(k)
        self._bank64 = bank.features.astype(np.float64)

    @property
    def backbone_hash(self) -> str:
        return self.bank.source.backbone_hash

    def describe(self) -> str:
        return f"knn(k={self.k})"

    def _distances(self, q: np.ndarray) -> np.ndarray:
        diff = self._bank64 - q[None, :]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def score(self, z) -> ScoreResult:
        q = _check_query(z, self.bank.d)
        dist = self._distances(q)
        nbrs = _k_smallest(dist, self.k)
        # fixed ascending summation order makes S independent of bank row order
        s = float(np.sum(dist[nbrs]))
        return ScoreResult(score=s, neighbors=tuple(int(i) for i in nbrs),
                           source=self.bank.source, scorer=self.describe())

    def score_grad(self, z) -> np.ndarray:
        """d(score)/d(query) with the neighbor set held fixed at the current k."""
        q = _check_query(z, self.bank.d)
        dist = self._distances(q)
        nbrs = _k_smallest(dist, self.k)
        grad = np.zeros(self.bank.d, dtype=np.float64)
        for i in nbrs:
            di = dist[i]
            if di < DISTANCE_FLOOR:
                continue  # undefined at coincidence; zero is the minimum-norm subgradient
            grad += (q - self._bank64[i]) / di
        return grad


# ---------------------------------------------------------------------------
# diagonal-covariance GMM


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture; score is the negative log-likelihood."""

    weights: np.ndarray          # (m,) mixture weights, sums to 1
    means: np.ndarray            # (m, d)
    variances: np.ndarray        # (m, d), floored
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.ndim != 2 or self.variances.shape != self.means.shape:
            raise ValidationError("GMM means/variances must both be (m, d)")
        if self.weights.shape != (self.means.shape[0],):
            raise ValidationError("GMM weights must be (m,)")
        if np.any(self.weights < 0):
            raise ValidationError("GMM mixture weights must be non-negative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValidationError("GMM mixture weights must sum to 1 within 1e-9")
        floor = self.metadata.get("variance_floor", VARIANCE_FLOOR)
        if np.any(self.variances < floor - 1e-300):
            raise ValidationError(f"GMM variances must be >= floor {floor}")

    @property
    def m(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def backbone_hash(self) -> str:
        return self.metadata.get("backbone_hash", "")

    def describe(self) -> str:
        return f"gmm(m={self.m})"

    def _log_joint(self, x: np.ndarray) -> np.ndarray:
        """log(pi_j) + log N(x; mu_j, diag var_j) for a batch (n, d) -> (n, m)."""
        diff = x[:, None, :] - self.means[None, :, :]
        maha = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        log_det = np.sum(np.log(self.variances), axis=1)
        with np.errstate(divide="ignore"):
            log_pi = np.log(self.weights)
        return log_pi[None, :] - 0.5 * (self.d * _LOG_2PI + log_det[None, :] + maha)

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        return _logsumexp(self._log_joint(np.asarray(x, dtype=np.float64)), axis=1)

    def score(self, z) -> ScoreResult:
        q = _check_query(z, self.d)
        s = -float(self.log_likelihood(q[None, :])[0])
        return ScoreResult(score=s, neighbors=None,
                           source=BankSource(self.backbone_hash,
                                             self.metadata.get("dataset_tag", "")),
                           scorer=self.describe())

    def score_grad(self, z) -> np.ndarray:
        q = _check_query(z, self.d)
        lj = self._log_joint(q[None, :])[0]
        r = np.exp(lj - _logsumexp(lj[None, :], axis=1)[0])  # responsibilities
        diff = (q[None, :] - self.means) / self.variances
        return np.einsum("j,jd->d", r, diff)

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GmmModel":
        doc = json.loads(text)
        if doc.get("schema_version") != 1:
            raise ValidationError(f"unsupported GMM schema version {doc.get('schema_version')!r}")
        return cls(weights=np.array(doc["weights"]), means=np.array(doc["means"]),
                   variances=np.array(doc["variances"]), metadata=doc.get("metadata", {}))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    return np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)


def _kmeanspp_init(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: spread initial means across the bank."""
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    for _ in range(1, m):
        d2 = np.min(
            [np.sum((x - c[None, :]) ** 2, axis=1) for c in centers], axis=0)
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))  # degenerate bank: all rows coincide
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
    return np.stack(centers)


def fit_gmm(bank: FeatureBank, components: int = 5, seed: int = 0,
            max_iters: int = 200, tol: float = 1e-6,
            variance_floor: float = VARIANCE_FLOOR) -> GmmModel:
    """Diagonal-covariance EM fit; log-likelihood trajectory kept in metadata."""
    if not isinstance(components, (int, np.integer)) or components < 1:
        raise ValidationError(f"components must be a positive integer, got {components!r}")
    if components > bank.n:
        raise ValidationError(
            f"cannot fit {components} components to a bank of {bank.n} rows")
    x = bank.features.astype(np.float64)
    n, d = x.shape
    meta = {
        "seed": int(seed), "tol": tol, "variance_floor": variance_floor,
        "backbone_hash": bank.source.backbone_hash,
        "dataset_tag": bank.source.dataset_tag,
    }

    col_var = np.maximum(x.var(axis=0), variance_floor)
    if components == 1:
        mu = x.mean(axis=0, keepdims=True)
        var = col_var[None, :]
        model = GmmModel(np.ones(1), mu, var,
                         metadata={**meta, "iterations": 0,
                                   "variance_floored": bool(np.any(x.var(axis=0) < variance_floor))})
        model.metadata["final_log_likelihood"] = float(model.log_likelihood(x).sum())
        model.metadata["ll_trajectory"] = [model.metadata["final_log_likelihood"]]
        return model

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    mu = _kmeanspp_init(x, components, rng)
    var = np.tile(col_var, (components, 1))
    pi = np.full(components, 1.0 / components)

    trajectory: list[float] = []
    floored = bool(np.any(x.var(axis=0) < variance_floor))
    ll_prev = None
    iters = 0
    for iters in range(1, max_iters + 1):
        model = GmmModel(pi, mu, var, metadata={"variance_floor": variance_floor})
        lj = model._log_joint(x)
        lse = _logsumexp(lj, axis=1)
        ll = float(lse.sum())
        trajectory.append(ll)
        if ll_prev is not None and ll - ll_prev < tol:
            break
        ll_prev = ll
        r = np.exp(lj - lse[:, None])
        nk = r.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-300)
        pi = nk / nk.sum()
        mu = (r.T @ x) / nk_safe[:, None]
        ex2 = (r.T @ (x * x)) / nk_safe[:, None]
        var_new = ex2 - mu * mu
        if np.any(var_new < variance_floor):
            floored = True
        var = np.maximum(var_new, variance_floor)

    model = GmmModel(pi, mu, var,
                     metadata={**meta, "iterations": iters,
                               "variance_floored": floored,
                               "final_log_likelihood": trajectory[-1],
                               "ll_trajectory": trajectory})
    return model


# ---------------------------------------------------------------------------
# thresholding and persistence


def classify(score: float, threshold: float) -> int:
    """1 (outlier) iff score is strictly above the threshold."""
    return 1 if score > threshold else 0


def quantile_threshold(scores, q: float = 0.95) -> float:
    """q-quantile of a score sample, the default decision threshold."""
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot take a quantile of an empty score list")
    if not np.isfinite(arr).all():
        raise NumericError("threshold scores contain non-finite values")
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"quantile must lie in [0, 1], got {q}")
    return float(np.quantile(arr, q))


def bank_threshold(scorer, q: float = 0.95, holdout=None) -> float:
    """Threshold from scoring a held-out slice (default: the bank itself, leave-in)."""
    rows = holdout if holdout is not None else scorer.bank.features
    scores = [scorer.score(row).score for row in np.asarray(rows, dtype=np.float32)]
    return quantile_threshold(scores, q)


def save_bank(bank: FeatureBank, path) -> None:
    """Persist features as ZTB with a JSON sidecar carrying provenance."""
    from .dataio import save_ztb  # local import to avoid a module cycle

    path = Path(path)
    save_ztb(Tensor(bank.features), path)
    sidecar = {
        "schema_version": 1,
        "backbone_hash": bank.source.backbone_hash,
        "dataset_tag": bank.source.dataset_tag,
        "defaults": {"k": 2, "gmm_components": 5},
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2))


def load_bank(path) -> FeatureBank:
    from .dataio import load_ztb

    path = Path(path)
    feats = load_ztb(path)
    meta_path = Path(str(path) + ".meta.json")
    source = BankSource()
    if meta_path.exists():
        doc = json.loads(meta_path.read_text())
        source = BankSource(backbone_hash=doc.get("backbone_hash", ""),
                            dataset_tag=doc.get("dataset_tag", ""))
    return FeatureBank(feats, source=source)
