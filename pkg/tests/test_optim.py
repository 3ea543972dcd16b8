import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tpcrtrl.cells import CellParameters
from tpcrtrl.errors import NumericalError, UsageError
from tpcrtrl.optim import (
    Optimiser,
    OptimiserState,
    adam_step,
    clip_global_norm,
    cosine_warmup_lr,
    global_norm,
    sgd_step,
)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, OptimiserState(), 0.1)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        new, _ = adam_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, OptimiserState(), 0.01)
        assert new["w"][0] == pytest.approx(0.5 - 0.01, abs=1e-9)

    def test_three_step_hand_roll(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w, m, v = 1.0, 0.0, 0.0
        p, state = {"w": np.array([w])}, OptimiserState()
        for t, g in enumerate([1.0, -2.0, 0.5], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            p, state = adam_step(p, {"w": np.array([g])}, state, lr)
            assert p["w"][0] == pytest.approx(w, rel=1e-14)
        assert state.step == 3

    def test_pure(self):
        p, g = {"w": np.array([1.0, 2.0])}, {"w": np.array([0.3, -0.1])}
        a, sa = adam_step(p, g, OptimiserState(), 0.1)
        b, sb = adam_step(p, g, OptimiserState(), 0.1)
        assert a["w"].tobytes() == b["w"].tobytes()
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_complex_parts_get_separate_moments(self):
        p = {"b": np.array([1.0 + 1.0j])}
        new, state = adam_step(p, {"b": np.array([1.0 + 0.0j])}, OptimiserState(), 0.1)
        assert new["b"][0].imag == 1.0 and new["b"][0].real == pytest.approx(0.9, abs=1e-8)
        assert state.first["b"].shape == (2,)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError):
            adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, OptimiserState(), 0.1)

    def test_float32_stays_float32(self):
        p = {"w": np.ones(3, dtype=np.float32), "c": np.ones(2, dtype=np.complex64)}
        g = {"w": np.ones(3, dtype=np.float32), "c": np.ones(2, dtype=np.complex64)}
        new, _ = adam_step(p, g, OptimiserState(), 0.1)
        assert new["w"].dtype == np.float32 and new["c"].dtype == np.complex64


def test_sgd_momentum():
    p, state = {"w": np.array([1.0])}, OptimiserState()
    p, state = sgd_step(p, {"w": np.array([1.0])}, state, 0.1, momentum=0.9)
    p, state = sgd_step(p, {"w": np.array([1.0])}, state, 0.1, momentum=0.9)
    # v1 = -0.1, v2 = -0.09 - 0.1
    assert p["w"][0] == pytest.approx(1.0 - 0.1 - 0.19, rel=1e-14)


class TestClip:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.6]), "b": np.array([0.8])}
        out = clip_global_norm(g, 2.0)
        assert out["a"][0] == 0.6 and out["b"][0] == 0.8

    def test_scales_to_threshold(self):
        out = clip_global_norm({"g": np.array([3.0, 4.0])}, 2.5)
        np.testing.assert_allclose(out["g"], [1.5, 2.0], rtol=1e-15)

    def test_invalid_threshold(self):
        with pytest.raises(UsageError):
            clip_global_norm({"g": np.ones(1)}, 0.0)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)),
           st.floats(1e-3, 1e3))
    def test_post_clip_norm_bounded_and_direction_kept(self, g, max_norm):
        out = clip_global_norm({"g": g}, max_norm)
        assert global_norm(out) <= max_norm + 1e-12 * max(1.0, max_norm)
        if np.linalg.norm(g) > 0:
            cos = g @ out["g"] / (np.linalg.norm(g) * np.linalg.norm(out["g"]))
            assert cos == pytest.approx(1.0, abs=1e-12)

    def test_complex_norm_counts_both_parts(self):
        assert global_norm({"c": np.array([3.0 + 4.0j])}) == pytest.approx(5.0)


class TestCosine:
    def test_endpoints(self):
        assert cosine_warmup_lr(0, 1000, 0.1) == 0.0
        assert cosine_warmup_lr(100, 1000, 0.1) == pytest.approx(0.1, rel=1e-15)
        assert abs(cosine_warmup_lr(1000, 1000, 0.1)) < 1e-12

    def test_monotone_segments(self):
        lrs = [cosine_warmup_lr(s, 200, 1.0) for s in range(201)]
        assert all(a <= b for a, b in zip(lrs[:20], lrs[1:21]))
        assert all(a >= b for a, b in zip(lrs[20:-1], lrs[21:]))

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            cosine_warmup_lr(11, 10, 0.1)


class TestOptimiser:
    def params(self):
        return CellParameters("tanh_rnn", {"w": np.array([1.0, 1.0])})

    def test_records_pre_clip_norm(self):
        opt = Optimiser("sgd", lr=1.0, clip_norm=1.0)
        p = self.params()
        opt.apply(p, {"w": np.array([3.0, 4.0])})
        assert opt.last_grad_norm == 5.0
        np.testing.assert_allclose(p["w"], [1.0 - 0.6, 1.0 - 0.8])

    def test_cosine_schedule_needs_budget(self):
        with pytest.raises(UsageError):
            Optimiser(schedule="cosine")

    def test_cosine_schedule_advances(self):
        opt = Optimiser("sgd", lr=1.0, schedule="cosine", total_steps=10, warmup_frac=0.5)
        seen = []
        p = self.params()
        for _ in range(10):
            seen.append(opt.current_lr())
            opt.apply(p, {"w": np.zeros(2)})
        assert seen[0] == pytest.approx(0.2) and seen[4] == pytest.approx(1.0)
        assert abs(seen[-1]) < 1e-12

    @pytest.mark.parametrize("kwargs", [dict(name="rmsprop"), dict(schedule="step")])
    def test_unknown(self, kwargs):
        with pytest.raises(UsageError):
            Optimiser(**kwargs)


def test_norm_of_huge_float32_gradient_is_finite():
    g = {"w": np.full(4, 1e30, dtype=np.float32)}
    assert global_norm(g) == pytest.approx(2e30, rel=1e-6)
    out = clip_global_norm(g, 2.0)
    np.testing.assert_allclose(out["w"], np.full(4, 1.0), rtol=1e-6)
