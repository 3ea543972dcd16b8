import numpy as np
import pytest

from tpcrtrl.baselines import (
    bptt_gradients,
    record_tape,
    sequence_loss,
    spatial_bp_gradients,
)
from tpcrtrl.cells import LRU, CellDims, cross_entropy, init_parameters, softmax
from tpcrtrl.errors import NumericalError
from tpcrtrl.gradcheck import check_bptt_vs_fd, finite_difference, relative_error


def problem(family, seed=0, batch=2, steps=5, d=3, n=4, k=3):
    p = init_parameters(family, CellDims(d, n, k, recurrent_size=n), seed)
    rng = np.random.default_rng(seed + 7)
    return p, np.eye(d)[rng.integers(0, d, (batch, steps))], np.eye(k)[rng.integers(0, k, (batch, steps))]


@pytest.mark.parametrize("family", ["tanh_rnn", "lru"])
def test_single_step_bptt_equals_spatial_bp(family):
    p, x, y = problem(family, steps=1)
    a, la = bptt_gradients(p, x, y)
    b, lb = spatial_bp_gradients(p, x, y)
    assert la == lb
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


@pytest.mark.parametrize("family", ["tanh_rnn", "lru"])
def test_bptt_matches_finite_differences(family):
    p, x, y = problem(family)
    assert check_bptt_vs_fd(p, x, y) < 1e-6


def test_bptt_with_label_smoothing_matches_finite_differences():
    p, x, y = problem("tanh_rnn")
    g, _ = bptt_gradients(p, x, y, label_smoothing=0.1)
    for k in p.names():
        num = finite_difference(lambda q: sequence_loss(q, x, y, 0.1), p, k)
        assert relative_error(g[k], num) < 1e-6


def test_bptt_with_dropout_mask_matches_finite_differences():
    p, x, y = problem("lru")
    mask = np.random.default_rng(0).choice([0.0, 2.0], size=(2, 4))
    g, _ = bptt_gradients(p, x, y, mask=mask)
    for k in p.names():
        num = finite_difference(lambda q: sequence_loss(q, x, y, mask=mask), p, k)
        assert relative_error(g[k], num) < 1e-6


def test_linear_recurrence_closed_form():
    # the LRU state is linear in its history: dL/dB = sum_s x_s^T gamma sum_{t>=s} conj(lam)^(t-s) g_t
    p, x, y = problem("lru", steps=3)
    g, _, tape = bptt_gradients(p, x, y, return_tape=True)
    lam, gamma = LRU.decay(p)
    batch = x.shape[0]
    direct = []
    for t, rec in enumerate(tape.records):
        d_logits = (softmax(rec["logits"]) - y[:, t]) / batch
        d_zr = (d_logits @ p["W_o"].T) * (1 - rec["x_r"] ** 2)
        d_pre = (d_zr @ p["W_r"].T) * (1 - rec["a"] ** 2)
        direct.append(d_pre @ p["C"].conj().T)
    expected = np.zeros_like(p["B"])
    for s in range(3):
        acc = sum(np.conj(lam) ** (t - s) * direct[t] for t in range(s, 3))
        expected += x[:, s].T @ (gamma * acc)
    np.testing.assert_allclose(g["B"], expected, atol=1e-14)


def test_spatial_bp_differs_when_targets_lag_inputs():
    p = init_parameters("tanh_rnn", CellDims(3, 4, 3), 0)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 3, (4, 6))
    x = np.eye(3)[ids]
    y = np.eye(3)[np.roll(ids, 2, axis=1)]
    a, _ = bptt_gradients(p, x, y)
    b, _ = spatial_bp_gradients(p, x, y)
    assert relative_error(b["W_hh"], a["W_hh"]) > 1e-3
    assert a["W_ho"].tobytes() == b["W_ho"].tobytes()


def test_spatial_bp_equals_bptt_without_recurrence():
    p, x, y = problem("tanh_rnn")
    p["W_hh"] = np.zeros_like(p["W_hh"])
    a, _ = bptt_gradients(p, x, y)
    b, _ = spatial_bp_gradients(p, x, y)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_spatial_bp_matches_detached_finite_differences():
    p, x, y = problem("tanh_rnn")
    frozen = [rec["h_prev"] for rec in record_tape(p, x).records]

    def detached_loss(q):
        total = 0.0
        for t, h_prev in enumerate(frozen):
            h = np.tanh(x[:, t] @ q["W_ih"] + h_prev @ q["W_hh"])
            total += cross_entropy(h @ q["W_ho"], y[:, t]).sum()
        return total / x.shape[0]

    g, _ = spatial_bp_gradients(p, x, y)
    for k in p.names():
        assert relative_error(g[k], finite_difference(detached_loss, p, k)) < 1e-6


class TestTape:
    @pytest.mark.parametrize("family", ["tanh_rnn", "lru"])
    def test_length_and_linear_growth(self, family):
        counts = []
        for steps in (2, 4, 8):
            p, x, _ = problem(family, steps=steps)
            tape = record_tape(p, x)
            assert len(tape) == steps
            counts.append(tape.element_count())
        assert counts[1] == 2 * counts[0] and counts[2] == 4 * counts[0]

    def test_replay_reproduces_activations(self):
        p, x, _ = problem("tanh_rnn")
        tape = record_tape(p, x)
        for rec in tape.records:
            h = np.tanh(rec["x"] @ p["W_ih"] + rec["h_prev"] @ p["W_hh"])
            assert h.tobytes() == rec["h"].tobytes()


def test_loss_is_time_sum_batch_mean():
    p, x, y = problem("tanh_rnn", batch=3, steps=4)
    per = [cross_entropy(rec["logits"], y[:, t]) for t, rec in enumerate(record_tape(p, x).records)]
    _, loss = bptt_gradients(p, x, y)
    assert loss == pytest.approx(np.sum(per) / 3, rel=1e-13)
    assert sequence_loss(p, x, y) == pytest.approx(loss, rel=1e-13)


def test_non_finite_loss_raises():
    p, x, y = problem("tanh_rnn")
    p["W_ho"][0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        bptt_gradients(p, x, y)
