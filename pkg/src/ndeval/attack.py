"""PGD attack on the anomaly score through the backbone.

The update pushes normal samples (y=0) toward high scores and outliers (y=1)
toward low scores with signed-gradient steps, projected onto the l-inf ball of
radius epsilon around the original image and the pixel box after every step.

By default the most adversarial iterate over the whole run is returned (the
original image counts as a candidate, so the directional guarantee holds by
construction); ``last_iterate=True`` restores the plain take-the-final-step
rule instead.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneGraph, TracedForward, extract_features
from .errors import NumericError, ValidationError
from .tensor import Tensor


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 100
    alpha: float | None = None      # default 2.5 * epsilon / steps
    restarts: int = 1
    seed: int = 0
    pixel_min: float = 0.0
    pixel_max: float = 1.0
    last_iterate: bool = False
    record_trajectory: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValidationError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise ValidationError(f"restarts must be >= 1, got {self.restarts}")
        if self.alpha is not None and self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not self.pixel_min < self.pixel_max:
            raise ValidationError("pixel bounds must satisfy pixel_min < pixel_max")

    @property
    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / self.steps

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "steps": self.steps, "alpha": self.alpha,
            "restarts": self.restarts, "seed": self.seed,
            "pixel_min": self.pixel_min, "pixel_max": self.pixel_max,
            "last_iterate": self.last_iterate,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class AttackOutcome:
    x_adv: Tensor
    initial_score: float
    final_score: float
    linf: float
    trajectory: tuple[float, ...] | None = None
    best_restart: int = 0


def beta(y: int) -> int:
    """Label-dependent attack sign: +1 raises normal scores, -1 lowers outlier scores."""
    if y == 0:
        return 1
    if y == 1:
        return -1
    raise ValidationError(f"label must be 0 (normal) or 1 (outlier), got {y!r}")


def project_linf(x_adv: Tensor, x_orig: Tensor, epsilon: float,
                 bounds: tuple[float, float] = (0.0, 1.0)) -> Tensor:
    """Elementwise clamp onto the epsilon ball around x_orig, then the pixel box."""
    if x_adv.dims != x_orig.dims:
        raise ValidationError(
            f"project_linf dims mismatch: {x_adv.dims} vs {x_orig.dims}")
    dt = x_orig.dtype.type
    lo = np.maximum(x_orig.data - dt(epsilon), dt(bounds[0]))
    hi = np.minimum(x_orig.data + dt(epsilon), dt(bounds[1]))
    return Tensor._wrap(np.clip(x_adv.data, lo, hi))


def _more_adversarial(sign: int, a: float, b: float) -> bool:
    """Is score a strictly more adversarial than b for attack sign `sign`?"""
    return a > b if sign > 0 else a < b


def _restart_rng(cfg: AttackConfig, sample_index: int, restart: int) -> np.random.Generator:
    # per-sample streams keyed by (master seed, sample, restart): reproducible
    # no matter how the caller parallelizes
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(sample_index, restart))
    return np.random.Generator(np.random.PCG64(ss))


def _score_of(graph: BackboneGraph, scorer, image: Tensor) -> float:
    feats = extract_features(graph, image.reshape((1,) + image.dims))
    return scorer.score(feats.data[0]).score


def _run_restart(graph: BackboneGraph, scorer, image: Tensor, sign: int,
                 cfg: AttackConfig, sample_index: int, restart: int):
    """One PGD restart; returns (best_x, best_score, trajectory)."""
    rng = _restart_rng(cfg, sample_index, restart)
    dt = graph.dtype
    alpha = dt.type(cfg.resolved_alpha)
    eps = cfg.epsilon
    bounds = (cfg.pixel_min, cfg.pixel_max)

    noise = rng.uniform(-eps, eps, size=image.dims).astype(dt)
    x_cur = project_linf(Tensor(image.data + noise), image, eps, bounds)

    best_x, best_s = None, None
    trajectory: list[float] = []
    for t in range(cfg.steps):
        traced = TracedForward(graph, x_cur)
        feats = traced.features
        s_t = scorer.score(feats.data).score
        trajectory.append(s_t)
        if best_s is None or _more_adversarial(sign, s_t, best_s):
            best_x, best_s = x_cur, s_t
        z_grad = scorer.score_grad(feats.data)
        try:
            g = traced.input_gradient(Tensor(z_grad.astype(dt)))
        except NumericError as e:
            raise NumericError(f"non-finite attack gradient at step {t}: {e}") from e
        step = alpha * np.asarray(sign, dtype=dt) * np.sign(g.data)
        x_cur = project_linf(Tensor(x_cur.data + step), image, eps, bounds)

    s_final = _score_of(graph, scorer, x_cur)
    trajectory.append(s_final)
    if best_s is None or _more_adversarial(sign, s_final, best_s):
        best_x, best_s = x_cur, s_final
    if cfg.last_iterate:
        best_x, best_s = x_cur, s_final
    return best_x, best_s, trajectory


def pgd_attack(graph: BackboneGraph, scorer, image: Tensor, y: int,
               cfg: AttackConfig, sample_index: int = 0) -> AttackOutcome:
    """Attack one image; pure in its inputs, safe to run concurrently."""
    if image.dims != graph.input_shape:
        raise ValidationError(
            f"image dims {image.dims} do not match backbone input shape {graph.input_shape}")
    scorer_hash = getattr(scorer, "backbone_hash", "")
    if scorer_hash and graph.weights_hash and scorer_hash != graph.weights_hash:
        raise ValidationError(
            f"scorer bank was built from backbone {scorer_hash} but the graph hash "
            f"is {graph.weights_hash}")
    sign = beta(y)
    initial = _score_of(graph, scorer, image)

    # In best-iterate mode the unperturbed image is itself a candidate, so the
    # result can never be less adversarial than the starting point. The
    # last-iterate mode keeps only the final step of each restart.
    best_x, best_s = (None, None) if cfg.last_iterate else (image, initial)
    best_restart = 0
    best_traj: list[float] | None = None
    for r in range(cfg.restarts):
        x_r, s_r, traj = _run_restart(graph, scorer, image, sign, cfg, sample_index, r)
        if best_s is None or _more_adversarial(sign, s_r, best_s):
            best_x, best_s, best_restart, best_traj = x_r, s_r, r, traj

    linf = float(np.max(np.abs(best_x.data.astype(np.float64)
                               - image.data.astype(np.float64)))) if best_x is not image else 0.0
    return AttackOutcome(
        x_adv=best_x, initial_score=initial, final_score=best_s, linf=linf,
        trajectory=tuple(best_traj) if (cfg.record_trajectory and best_traj) else None,
        best_restart=best_restart)


def attack_batch(graph: BackboneGraph, scorer, images: Tensor, labels,
                 cfg: AttackConfig, workers: int = 1,
                 start_index: int = 0) -> list[AttackOutcome]:
    """Attack a batch; results are identical for any worker count."""
    labels = list(labels)
    if len(images.dims) != 4:
        raise ValidationError(f"attack_batch expects an NCHW batch, got dims {images.dims}")
    if images.dims[0] != len(labels):
        raise ValidationError(
            f"batch has {images.dims[0]} images but {len(labels)} labels")
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")

    def one(i: int) -> AttackOutcome:
        img = Tensor._wrap(np.array(images.data[i], copy=True))
        return pgd_attack(graph, scorer, img, labels[i], cfg,
                          sample_index=start_index + i)

    if workers == 1:
        return [one(i) for i in range(len(labels))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(labels))))
