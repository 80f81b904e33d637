"""Acceptance gate: every release criterion at its stated tolerance.

Each test prints one PASS/FAIL line (run pytest with -s to see them inline).
"""

import time

import numpy as np

from ndeval.attack import AttackConfig, attack_batch, pgd_attack
from ndeval.metrics import auroc
from ndeval.protocols import ProtocolSpec, one_class_eval
from ndeval.scoring import FeatureBank, KnnScorer, fit_gmm
from ndeval.selfcheck import (auroc_reference, guarded_input_fd, knn_reference,
                              random_small_backbone, relative_error)
from ndeval.synthetic import class_gap, identity_backbone, two_class_images
from ndeval.backbone import input_gradient
from ndeval.tensor import Tensor

from conftest import make_rng


def report(name: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


def _gradient_suite(dtype, h, tol, n_graphs=100):
    worst = 0.0
    skipped = 0
    valid_total = 0
    pixel_total = 0
    for seed in range(n_graphs):
        graph, image = random_small_backbone(seed, dtype=dtype)
        rng = make_rng(10_000 + seed)
        d = graph.feature_dim
        bank = FeatureBank(rng.standard_normal((14, d)).astype(np.float32))
        scorers = [KnnScorer(bank, k=2), fit_gmm(bank, components=2, seed=seed)]
        for scorer in scorers:
            feats = _features_of(graph, image)
            if isinstance(scorer, KnnScorer):
                dist = np.sort(np.linalg.norm(
                    bank.features.astype(np.float64) - feats, axis=1))
                if dist[0] < 1e-5 or (dist[2] - dist[1]) < 5e-3:
                    skipped += 1  # too close to a selection boundary for FD
                    continue
                sig = lambda z, s=scorer: s.score(z).neighbors
            else:
                sig = None
            analytic = input_gradient(
                graph, image,
                Tensor(scorer.score_grad(feats).astype(dtype))).data
            fd, valid = guarded_input_fd(graph, image,
                                         lambda z, s=scorer: s.score(z).score,
                                         h, feature_sig=sig)
            valid_total += int(valid.sum())
            pixel_total += valid.size
            if valid.any():
                worst = max(worst, relative_error(analytic[valid], fd[valid]))
    assert valid_total / pixel_total >= 0.95, "too many kink-crossing pixels excluded"
    assert skipped <= n_graphs // 4
    return worst


def _features_of(graph, image):
    from ndeval.backbone import extract_features
    return extract_features(graph, image.reshape((1,) + image.dims)).data[0]


def test_gradient_suite_32bit_and_64bit():
    t0 = time.perf_counter()
    worst32 = _gradient_suite(np.float32, h=1e-3, tol=1e-3)
    worst64 = _gradient_suite(np.float64, h=1e-5, tol=1e-6)
    elapsed = time.perf_counter() - t0
    ok = worst32 <= 1e-3 and worst64 <= 1e-6 and elapsed < 120
    report("gradient-suite", ok,
           f"100 backbones x 2 scorers: max rel err 32-bit {worst32:.2e} <= 1e-3, "
           f"64-bit {worst64:.2e} <= 1e-6, {elapsed:.1f}s < 120s")


def test_knn_full_sort_oracle():
    t0 = time.perf_counter()
    rng = make_rng(777)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(1, 17))
        k = int(rng.integers(1, min(n, 10) + 1))
        bank = rng.standard_normal((n, d)).astype(np.float32)
        if n >= 4 and rng.random() < 0.3:
            bank[3] = bank[1]  # exact duplicate rows create distance ties
        q = (bank[int(rng.integers(n))] if rng.random() < 0.1
             else rng.standard_normal(d)).astype(np.float64)
        got = KnnScorer(FeatureBank(bank), k=k).score(q)
        want_score, want_neighbors = knn_reference(bank, q, k)
        if got.score != want_score or got.neighbors != want_neighbors:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    report("knn-oracle", ok,
           f"1000 instances, {mismatches} mismatches, {elapsed:.1f}s < 30s")


def test_auroc_pairwise_oracle():
    rng = make_rng(888)
    worst = 0.0
    complement_exact = True
    for _ in range(500):
        n = int(rng.integers(1, 120))
        m = int(rng.integers(1, 120))
        # quantized draws guarantee deliberate ties
        a = rng.integers(0, 12, n) / 4.0
        b = rng.integers(0, 12, m) / 4.0 + rng.choice([0.0, 0.25])
        got = auroc(a, b)
        worst = max(worst, abs(got - auroc_reference(a, b)))
        if got + auroc(b, a) != 1.0:
            complement_exact = False
    ok = worst <= 1e-12 and complement_exact
    report("auroc-oracle", ok,
           f"500 pairs, max |diff| {worst:.1e} <= 1e-12, complement identity exact: "
           f"{complement_exact}")


def test_attack_contract_and_thread_reproducibility():
    t0 = time.perf_counter()
    rng = make_rng(999)
    violations = []
    for trial in range(200):
        graph, image = random_small_backbone(trial % 40)
        bank = FeatureBank(
            rng.standard_normal((12, graph.feature_dim)).astype(np.float32))
        scorer = KnnScorer(bank, k=2)
        y = int(rng.integers(0, 2))
        steps = 100 if trial % 25 == 0 else int(rng.integers(2, 12))
        cfg = AttackConfig(epsilon=float(rng.uniform(0.01, 0.3)), steps=steps,
                           seed=trial)
        out = pgd_attack(graph, scorer, image, y, cfg, sample_index=trial)
        if out.linf > cfg.epsilon + 1e-7:
            violations.append(f"budget trial {trial}")
        if out.x_adv.data.min() < 0.0 or out.x_adv.data.max() > 1.0:
            violations.append(f"box trial {trial}")
        if y == 0 and out.final_score < out.initial_score - 1e-9:
            violations.append(f"direction trial {trial}")
        if y == 1 and out.final_score > out.initial_score + 1e-9:
            violations.append(f"direction trial {trial}")

    graph, _ = random_small_backbone(8)
    bank = FeatureBank(rng.standard_normal((10, graph.feature_dim)).astype(np.float32))
    scorer = KnnScorer(bank, k=2)
    batch = Tensor(rng.uniform(0.1, 0.9, (12,) + graph.input_shape).astype(np.float32))
    labels = [0, 1] * 6
    cfg = AttackConfig(epsilon=0.08, steps=10, seed=4242)
    runs = {w: attack_batch(graph, scorer, batch, labels, cfg, workers=w)
            for w in (1, 4, 8)}
    for w in (4, 8):
        for a, b in zip(runs[1], runs[w]):
            if not np.array_equal(a.x_adv.data, b.x_adv.data):
                violations.append(f"worker-{w} divergence")
    elapsed = time.perf_counter() - t0
    ok = not violations
    report("attack-contract", ok,
           f"200 attacks: budget/box/directionality clean, 1/4/8 workers "
           f"bit-identical, {elapsed:.1f}s"
           + (f"; violations: {violations[:3]}" if violations else ""))


def test_synthetic_end_to_end():
    t0 = time.perf_counter()
    ds = two_class_images(n_train=60, n_test=60, seed=7)
    graph = identity_backbone()
    clean = one_class_eval(ProtocolSpec(kind="one_class", k=2, seed=3), graph, ds)
    eps = class_gap() / 2
    attacked = one_class_eval(
        ProtocolSpec(kind="one_class", k=2, seed=3,
                     attack=AttackConfig(epsilon=eps, steps=100, seed=3)),
        graph, ds)
    elapsed = time.perf_counter() - t0
    drop = clean.macro_clean_auroc - attacked.macro_attacked_auroc
    never_helps = attacked.macro_attacked_auroc <= attacked.macro_clean_auroc + 0.02
    ok = (clean.macro_clean_auroc >= 0.99 and drop >= 0.2 and never_helps
          and elapsed < 300)
    report("synthetic-end-to-end", ok,
           f"clean {clean.macro_clean_auroc:.3f} >= 0.99, PGD-100 "
           f"{attacked.macro_attacked_auroc:.3f} (drop {drop:.3f} >= 0.2), "
           f"{elapsed:.1f}s < 300s")


def test_em_suite():
    rng = make_rng(555)
    worst_decrease = 0.0
    for _ in range(100):
        n = int(rng.integers(20, 150))
        d = int(rng.integers(1, 8))
        m = int(rng.integers(1, min(5, n) + 1))
        scale = rng.uniform(0.3, 3.0)
        x = (rng.standard_normal((n, d)) * scale + rng.uniform(-2, 2, d)).astype(np.float32)
        model = fit_gmm(FeatureBank(x), components=m, seed=int(rng.integers(10_000)))
        traj = model.metadata["ll_trajectory"]
        for a, b in zip(traj, traj[1:]):
            worst_decrease = min(worst_decrease, b - a)

    cl = make_rng(556)
    a = cl.normal(-5.0, 1.0, (200, 3))
    b = cl.normal(5.0, 1.0, (200, 3))
    model = fit_gmm(FeatureBank(np.vstack([a, b]).astype(np.float32)),
                    components=2, seed=2)
    order = np.argsort(model.means[:, 0])
    means_ok = (np.all(np.abs(model.means[order[0]] + 5.0) < 0.5)
                and np.all(np.abs(model.means[order[1]] - 5.0) < 0.5))
    pi_ok = abs(model.weights[0] - 0.5) <= 0.1
    ok = worst_decrease >= -1e-7 and means_ok and pi_ok
    report("em-suite", ok,
           f"100 fits: worst per-iteration LL change {worst_decrease:.2e} >= -1e-7; "
           f"two-cluster means within 0.5: {means_ok}, weights within 0.1: {pi_ok}")
