import logging

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from minikd.autodiff import Tape, Tensor, backward
from minikd.distill import (
    ALPHA_GRID,
    TEMPERATURE_GRID,
    DistillConfig,
    cross_entropy_hard,
    kd_loss,
    kl_divergence,
    softmax_temperature,
    train_distill,
)
from minikd.gradcheck import grad_check, kd_reference
from minikd.models import build_mini_student, build_mini_teacher
from minikd.training import TrainConfig

mp.mp.dps = 50


def mp_kd(student, teacher, label, alpha, T):
    """Independent 50-digit evaluation: alpha*T^2*KL(q||p) + (1-alpha)*CE."""
    def soft(z, t):
        e = [mp.e ** (mp.mpf(v) / t) for v in z]
        s = sum(e)
        return [v / s for v in e]

    p = soft(student, T)
    q = soft(teacher, T)
    kl = sum(qi * mp.log(qi / pi) for qi, pi in zip(q, p))
    ce = -mp.log(soft(student, 1)[label])
    return alpha * T**2 * kl + (1 - alpha) * ce, kl, ce


class TestSoftmaxTemperature:
    @pytest.mark.parametrize("T", [0.5, 1.0, 7.0])
    def test_uniform(self, T):
        np.testing.assert_allclose(softmax_temperature([[0, 0, 0]], T), [[1 / 3] * 3], atol=1e-4)

    def test_derived(self):
        np.testing.assert_allclose(softmax_temperature([[2.0, 0.0]], 2.0), [[0.7311, 0.2689]], atol=1e-4)

    @pytest.mark.parametrize("T", [0.5, 1, 10])
    def test_argmax_invariant(self, T):
        assert softmax_temperature([[3.0, 1.0, -2.0]], T).argmax() == 0

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_nonpositive_temperature_rejected(self, T):
        with pytest.raises(ValueError):
            softmax_temperature([[1.0, 2.0]], T)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=st.floats(-1e3, 1e3)), st.floats(0.1, 100))
    def test_rows_sum_to_one(self, z, T):
        np.testing.assert_allclose(softmax_temperature(z, T).sum(axis=1), 1.0, atol=1e-6)

    def test_entropy_non_decreasing_in_temperature(self, rng):
        for _ in range(50):
            z = rng.normal(size=(1, 4)) * 3
            ent = []
            for T in (0.5, 1, 2, 4, 8):
                p = softmax_temperature(z, T)[0]
                ent.append(-(p * np.log(p)).sum())
            assert all(b >= a - 1e-12 for a, b in zip(ent, ent[1:]))


class TestKL:
    def test_identity_is_zero(self):
        assert kl_divergence([[0.3, 0.7]], [[0.3, 0.7]]) == 0.0

    def test_derived_values_and_asymmetry(self):
        a = kl_divergence([[0.5, 0.5]], [[0.9, 0.1]])
        b = kl_divergence([[0.9, 0.1]], [[0.5, 0.5]])
        assert a == pytest.approx(0.5108, abs=1e-4)
        assert b == pytest.approx(0.3681, abs=1e-4)
        assert a != b

    def test_zero_reference_entries_contribute_nothing(self):
        assert kl_divergence([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(np.log(2))

    def test_zero_approx_is_floored_and_logged(self, caplog):
        with caplog.at_level(logging.INFO, logger="minikd.distill"):
            v = kl_divergence([[0.5, 0.5]], [[1.0, 0.0]])
        assert np.isfinite(v) and v == pytest.approx(0.5 * np.log(0.5 / 1e-12) + 0.5 * np.log(0.5), rel=1e-9)
        assert "floored" in caplog.text

    def test_non_negative(self, rng):
        for _ in range(200):
            p = rng.dirichlet(np.ones(4), size=3)
            q = rng.dirichlet(np.ones(4), size=3)
            assert kl_divergence(p, q) >= 0


class TestCrossEntropy:
    def test_uniform(self):
        assert float(cross_entropy_hard([[0.0, 0.0]], [0]).data) == pytest.approx(np.log(2), abs=1e-6)

    def test_saturated_stays_finite(self):
        v = float(cross_entropy_hard(np.array([[1000.0, 0.0]]), [0]).data)
        assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-6)

    def test_derived(self):
        v = float(cross_entropy_hard(np.array([[2.0, 0.0]], dtype=np.float64), [1]).data)
        assert v == pytest.approx(2.1269, abs=1e-4)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_hard([[0.0, 0.0]], [2])


class TestKDLoss:
    def test_identical_logits_alpha_one(self):
        z = np.array([[1.5, -0.5, 0.2]])
        assert float(kd_loss(z, z, [0], DistillConfig(alpha=1.0)).data) == pytest.approx(0.0, abs=1e-6)

    def test_alpha_zero_is_cross_entropy(self, rng):
        s = rng.normal(size=(4, 2))
        t = rng.normal(size=(4, 2))
        y = [0, 1, 1, 0]
        assert float(kd_loss(s, t, y, DistillConfig(alpha=0.0)).data) == float(cross_entropy_hard(s, y).data)

    def test_mpmath_oracle_matches_hand_value(self):
        loss, kl, ce = mp_kd([1, 0], [2, 0], 0, mp.mpf("0.5"), 2)
        assert float(kl) == pytest.approx(0.026345, abs=1e-6)
        assert float(ce) == pytest.approx(0.31326, abs=1e-5)
        assert float(loss) == pytest.approx(0.2094, abs=1e-4)

    def test_derived_case(self):
        got = float(kd_loss(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]]), [0], DistillConfig(0.5, 2.0)).data)
        ref = float(mp_kd([1, 0], [2, 0], 0, mp.mpf("0.5"), 2)[0])
        assert got == pytest.approx(0.2094, abs=1e-3)
        assert got == pytest.approx(ref, abs=1e-6)

    def test_random_cases_match_mpmath(self, rng):
        for _ in range(20):
            s, t = rng.normal(size=3) * 2, rng.normal(size=3) * 2
            y = int(rng.integers(3))
            alpha, T = float(rng.uniform()), float(rng.choice([1.0, 2.0, 4.0, 8.0]))
            got = float(kd_loss(s[None].astype(np.float64), t[None], [y], DistillConfig(alpha, T)).data)
            assert got == pytest.approx(float(mp_kd(s, t, y, alpha, T)[0]), abs=1e-9)

    def test_student_direction_reverses_kl(self):
        s, t = np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]])
        fwd = float(kd_loss(s, t, [0], DistillConfig(1.0, 1.0, "teacher")).data)
        rev = float(kd_loss(s, t, [0], DistillConfig(1.0, 1.0, "student")).data)
        p, q = softmax_temperature(s, 1), softmax_temperature(t, 1)
        assert fwd == pytest.approx(kl_divergence(q, p), abs=1e-6)
        assert rev == pytest.approx(kl_divergence(p, q), abs=1e-6)

    def test_continuous_in_alpha(self, rng):
        s, t = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        y = [0, 1, 0]
        grid = np.linspace(0, 1, 21)
        vals = [float(kd_loss(s, t, y, DistillConfig(a, 4.0)).data) for a in grid]
        soft = float(kd_loss(s, t, y, DistillConfig(1.0, 4.0)).data)
        hard = float(cross_entropy_hard(s, y).data)
        bound = (abs(soft) + abs(hard)) * (grid[1] - grid[0]) + 1e-9
        assert np.all(np.abs(np.diff(vals)) <= bound)

    def test_gradient_reaches_student_only(self, rng):
        s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        t = Tensor(rng.normal(size=(3, 2)))
        with Tape() as tape:
            loss = kd_loss(s, t, [0, 1, 1], DistillConfig())
        backward(tape, loss)
        assert s.grad is not None and t.grad is None

    @pytest.mark.parametrize("direction", ["teacher", "student"])
    def test_gradient_includes_t_squared(self, rng, direction):
        s, t = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        y = np.array([0, 1, 1])
        rep = grad_check(
            lambda s_: kd_loss(s_, t, y, DistillConfig(0.7, 4.0, direction)),
            (s,),
            reference=lambda s_: kd_reference(s_, t, y, 0.7, 4.0, direction),
        )
        assert rep.passed, rep.line()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DistillConfig(alpha=1.5)
        with pytest.raises(ValueError):
            DistillConfig(temperature=0)
        with pytest.raises(ValueError):
            DistillConfig(kl_direction="both")
        with pytest.raises(TypeError):
            kd_loss([[0.0, 0.0]], [[0.0, 0.0]], [0], {"alpha": 0.5})

    def test_grids(self):
        assert ALPHA_GRID == (0.5, 0.7, 0.9) and TEMPERATURE_GRID == (2.0, 4.0, 8.0)
        assert DistillConfig() == DistillConfig(0.9, 4.0, "teacher")


class TestTrainDistill:
    def _data(self, n=24, side=16):
        rng = np.random.default_rng(0)
        return rng.random((n, 1, side, side), dtype=np.float32), np.arange(n) % 2

    def test_zero_epochs_leaves_student_unchanged(self):
        from minikd.models import ArchScale

        sc = ArchScale(side=16, width=4, stages=1)
        teacher = build_mini_teacher(sc, seed=0).freeze()
        student = build_mini_student(sc, seed=1)
        before = student.param_digest()
        _, hist = train_distill(teacher, student, self._data(), DistillConfig(), TrainConfig(epochs=0))
        assert hist == [] and student.param_digest() == before

    def test_teacher_bitwise_unchanged(self):
        from minikd.data import AugmentConfig
        from minikd.models import ArchScale

        sc = ArchScale(side=16, width=4, stages=1)
        teacher = build_mini_teacher(sc, seed=0).freeze()
        student = build_mini_student(sc, seed=1)
        digest, s_before = teacher.param_digest(), student.param_digest()
        _, hist = train_distill(
            teacher, student, self._data(), DistillConfig(), TrainConfig(1e-3, 8, 2), AugmentConfig(seed=1)
        )
        assert teacher.param_digest() == digest
        assert student.param_digest() != s_before and len(hist) == 2
        assert all(p.grad is None for p in teacher.parameters())

    def test_trainable_teacher_rejected(self):
        from minikd.models import ArchScale

        sc = ArchScale(side=16, width=4, stages=1)
        with pytest.raises(ValueError, match="frozen"):
            train_distill(build_mini_teacher(sc), build_mini_student(sc), self._data(), DistillConfig(), TrainConfig())
