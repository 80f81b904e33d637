"""PGD attack contracts: budget, box, directionality, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndeval.attack import (AttackConfig, attack_batch, beta, pgd_attack,
                           project_linf, _run_restart)
from ndeval.errors import ValidationError
from ndeval.scoring import BankSource, FeatureBank, KnnScorer, fit_gmm
from ndeval.selfcheck import random_small_backbone
from ndeval.synthetic import identity_backbone
from ndeval.tensor import Tensor

from conftest import make_rng


def small_setup(seed, k=2, bank_rows=15):
    graph, image = random_small_backbone(seed)
    rng = make_rng(seed + 900)
    bank = FeatureBank(rng.standard_normal((bank_rows, graph.feature_dim)).astype(np.float32))
    return graph, image, KnnScorer(bank, k=k)


class TestBeta:
    def test_normal_label_raises_score(self):
        assert beta(0) == 1

    def test_outlier_label_lowers_score(self):
        assert beta(1) == -1

    def test_other_labels_rejected(self):
        for bad in (-1, 2, None, "0"):
            with pytest.raises(ValidationError):
                beta(bad)

    def test_beta1_equals_beta0_on_negated_score_step_for_step(self):
        graph, image, scorer = small_setup(6)

        class Negated:
            backbone_hash = scorer.backbone_hash

            def score(self, z):
                r = scorer.score(z)
                return type(r)(score=-r.score, neighbors=r.neighbors,
                               source=r.source, scorer=r.scorer)

            def score_grad(self, z):
                return -scorer.score_grad(z)

        cfg = AttackConfig(epsilon=0.06, steps=6, seed=11)
        xa, sa, ta = _run_restart(graph, scorer, image, beta(1), cfg, 0, 0)
        xb, sb, tb = _run_restart(graph, Negated(), image, beta(0), cfg, 0, 0)
        assert np.array_equal(xa.data, xb.data)
        assert ta == [-v for v in tb]


class TestProjectLinf:
    def test_interior_point_unchanged(self):
        x = Tensor(np.full((1, 2, 2), 0.5, dtype=np.float32))
        adv = Tensor(np.full((1, 2, 2), 0.52, dtype=np.float32))
        out = project_linf(adv, x, 0.1)
        assert np.array_equal(out.data, adv.data)

    def test_face_projection(self):
        eps = 0.1
        x = Tensor(np.full((1, 2, 2), 0.4, dtype=np.float32))
        adv = Tensor((x.data + 2 * eps).astype(np.float32))
        out = project_linf(adv, x, eps)
        assert np.allclose(out.data, x.data + eps, atol=1e-7)

    @settings(max_examples=50)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_elementwise_clamp_oracle(self, seed):
        rng = make_rng(seed)
        x = Tensor(rng.uniform(0, 1, (2, 3, 3)).astype(np.float32))
        adv = Tensor(rng.uniform(-0.5, 1.5, (2, 3, 3)).astype(np.float32))
        eps = float(rng.uniform(0.0, 0.5))
        out = project_linf(adv, x, eps).data
        want = np.minimum(np.maximum(adv.data, np.maximum(x.data - np.float32(eps), 0.0)),
                          np.minimum(x.data + np.float32(eps), 1.0))
        assert np.array_equal(out, want)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.max(np.abs(out.astype(np.float64) - x.data)) <= eps + 1e-7


class TestAttackConfig:
    def test_default_alpha_rule(self):
        cfg = AttackConfig(epsilon=4 / 255, steps=100)
        assert cfg.resolved_alpha == pytest.approx(2.5 * (4 / 255) / 100, rel=1e-12)
        assert cfg.resolved_alpha == pytest.approx(3.9216e-4, rel=1e-4)

    def test_explicit_alpha_wins(self):
        cfg = AttackConfig(epsilon=0.1, steps=10, alpha=0.005)
        assert cfg.resolved_alpha == 0.005

    def test_validation(self):
        with pytest.raises(ValidationError):
            AttackConfig(epsilon=1.5)
        with pytest.raises(ValidationError):
            AttackConfig(epsilon=0.1, steps=0)
        with pytest.raises(ValidationError):
            AttackConfig(epsilon=0.1, restarts=0)


class TestPgdAttack:
    def test_zero_budget_returns_input_exactly(self):
        graph, image, scorer = small_setup(7)
        cfg = AttackConfig(epsilon=0.0, steps=5, seed=3)
        out = pgd_attack(graph, scorer, image, 0, cfg)
        assert np.array_equal(out.x_adv.data, image.data)
        assert out.final_score == out.initial_score
        assert out.linf == 0.0

    def test_identity_backbone_corner_saturation(self):
        # score is ||x||_2 against a zero bank; sign ascent walks every pixel
        # to the epsilon face, so the score gain approaches eps * sqrt(P)
        shape = (1, 4, 4)
        graph = identity_backbone(shape)
        bank = FeatureBank(np.zeros((1, 16), dtype=np.float32))
        scorer = KnnScorer(bank, k=1)
        image = Tensor(np.full(shape, 0.05, dtype=np.float32))
        eps = 0.04
        cfg = AttackConfig(epsilon=eps, steps=100, seed=5)
        out = pgd_attack(graph, scorer, image, 0, cfg)
        expected_gain = eps * np.sqrt(16)
        gain = out.final_score - out.initial_score
        assert abs(gain - expected_gain) <= 0.05 * expected_gain

    def test_budget_box_and_directionality(self):
        rng = make_rng(50)
        for trial in range(25):
            graph, image, scorer = small_setup(trial)
            y = int(rng.integers(0, 2))
            cfg = AttackConfig(epsilon=float(rng.uniform(0.01, 0.3)),
                               steps=int(rng.integers(1, 12)), seed=trial)
            out = pgd_attack(graph, scorer, image, y, cfg, sample_index=trial)
            assert out.linf <= cfg.epsilon + 1e-7
            assert out.x_adv.data.min() >= 0.0 and out.x_adv.data.max() <= 1.0
            if y == 0:
                assert out.final_score >= out.initial_score - 1e-9
            else:
                assert out.final_score <= out.initial_score + 1e-9

    def test_same_seed_bit_identical(self):
        graph, image, scorer = small_setup(9)
        cfg = AttackConfig(epsilon=0.08, steps=6, seed=77)
        a = pgd_attack(graph, scorer, image, 0, cfg, sample_index=4)
        b = pgd_attack(graph, scorer, image, 0, cfg, sample_index=4)
        assert np.array_equal(a.x_adv.data, b.x_adv.data)
        assert a.final_score == b.final_score

    def test_restart_dominance(self):
        graph, image, scorer = small_setup(10)
        cfg = AttackConfig(epsilon=0.1, steps=5, restarts=3, seed=13)
        combined = pgd_attack(graph, scorer, image, 0, cfg, sample_index=2)
        singles = [_run_restart(graph, scorer, image, 1, cfg, 2, r)[1] for r in range(3)]
        assert combined.final_score >= max(singles) - 1e-12

    def test_scale_invariance_of_sign_updates(self):
        graph, image, scorer = small_setup(11)

        class Scaled:
            backbone_hash = scorer.backbone_hash

            def score(self, z):
                r = scorer.score(z)
                return type(r)(score=3.7 * r.score, neighbors=r.neighbors,
                               source=r.source, scorer=r.scorer)

            def score_grad(self, z):
                return 3.7 * scorer.score_grad(z)

        cfg = AttackConfig(epsilon=0.07, steps=8, seed=21)
        a = pgd_attack(graph, scorer, image, 0, cfg, sample_index=1)
        b = pgd_attack(graph, Scaled(), image, 0, cfg, sample_index=1)
        assert np.array_equal(a.x_adv.data, b.x_adv.data)

    def test_trajectory_recording(self):
        graph, image, scorer = small_setup(12)
        cfg = AttackConfig(epsilon=0.05, steps=4, seed=1, record_trajectory=True)
        out = pgd_attack(graph, scorer, image, 0, cfg)
        assert out.trajectory is not None and len(out.trajectory) == 5

    def test_last_iterate_mode(self):
        graph, image, scorer = small_setup(13)
        cfg = AttackConfig(epsilon=0.05, steps=4, seed=2, last_iterate=True,
                           record_trajectory=True)
        out = pgd_attack(graph, scorer, image, 0, cfg)
        assert out.final_score == out.trajectory[-1]

    def test_hash_mismatch_rejected(self):
        graph, image, _ = small_setup(14)
        rng = make_rng(99)
        bank = FeatureBank(rng.standard_normal((5, graph.feature_dim)).astype(np.float32),
                           source=BankSource(backbone_hash="deadbeefdeadbeef"))
        scorer = KnnScorer(bank, k=1)
        with pytest.raises(ValidationError, match="hash"):
            pgd_attack(graph, scorer, image, 0, AttackConfig(epsilon=0.05, seed=0))

    def test_gmm_scorer_attack_runs(self):
        graph, image, _ = small_setup(15)
        rng = make_rng(101)
        bank = FeatureBank(rng.standard_normal((25, graph.feature_dim)).astype(np.float32))
        model = fit_gmm(bank, components=2, seed=4)
        cfg = AttackConfig(epsilon=0.05, steps=5, seed=6)
        out = pgd_attack(graph, model, image, 1, cfg)
        assert out.final_score <= out.initial_score + 1e-9


class TestAttackBatch:
    def test_worker_counts_bit_identical(self):
        graph, _, scorer = small_setup(16, bank_rows=12)
        rng = make_rng(103)
        batch = Tensor(rng.uniform(0.1, 0.9, (8,) + graph.input_shape).astype(np.float32))
        labels = [0, 1] * 4
        cfg = AttackConfig(epsilon=0.06, steps=5, seed=19)
        ref = attack_batch(graph, scorer, batch, labels, cfg, workers=1)
        for workers in (4, 8):
            got = attack_batch(graph, scorer, batch, labels, cfg, workers=workers)
            for a, b in zip(ref, got):
                assert np.array_equal(a.x_adv.data, b.x_adv.data)

    def test_start_index_aligns_with_single_calls(self):
        graph, _, scorer = small_setup(17, bank_rows=10)
        rng = make_rng(104)
        batch = Tensor(rng.uniform(0.1, 0.9, (3,) + graph.input_shape).astype(np.float32))
        cfg = AttackConfig(epsilon=0.05, steps=4, seed=23)
        outs = attack_batch(graph, scorer, batch, [0, 0, 0], cfg, start_index=10)
        for i in range(3):
            single = pgd_attack(graph, scorer,
                                Tensor(np.array(batch.data[i])), 0, cfg,
                                sample_index=10 + i)
            assert np.array_equal(outs[i].x_adv.data, single.x_adv.data)

    def test_label_count_mismatch(self):
        graph, _, scorer = small_setup(18)
        batch = Tensor(np.full((2,) + graph.input_shape, 0.5, dtype=np.float32))
        with pytest.raises(ValidationError):
            attack_batch(graph, scorer, batch, [0], AttackConfig(epsilon=0.1, seed=1))
