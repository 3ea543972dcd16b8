"""Backpropagation baselines with hand-derived reverse passes.

The forward recursions are written out again here rather than borrowed from
:mod:`.cells`, so that these gradients can serve as an independent reference
for the predictive-coding updates.  Losses are summed over time and averaged
over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, UsageError


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ce(z, y):
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(y * logp).sum(axis=-1)


def _smooth(y, ls):
    if not ls:
        return y
    return (1.0 - ls) * y + ls / y.shape[-1]


@dataclass
class UnrolledTape:
    """Per-step records needed to reverse the whole sequence."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def element_count(self):
        return int(sum(a.size for rec in self.records for a in rec.values()))


def _tanh_forward(params, inputs, tape):
    w_ih, w_hh, w_ho = params["W_ih"], params["W_hh"], params["W_ho"]
    batch, steps = inputs.shape[:2]
    h = np.zeros((batch, w_hh.shape[0]), dtype=w_hh.dtype)
    for t in range(steps):
        x = inputs[:, t]
        h_prev = h
        h = np.tanh(x @ w_ih + h_prev @ w_hh)
        tape.records.append({"x": x, "h_prev": h_prev, "h": h, "logits": h @ w_ho})
    return tape


def _tanh_backward(params, tape, targets, ls, through_time):
    w_hh, w_ho = params["W_hh"], params["W_ho"]
    batch = targets.shape[0]
    g = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    carry = np.zeros_like(tape.records[0]["h"])
    loss = 0.0
    for t in reversed(range(len(tape))):
        rec = tape.records[t]
        y = _smooth(targets[:, t], ls)
        loss += _ce(rec["logits"], y).sum()
        d_logits = (_softmax(rec["logits"]) - y) / batch
        g["W_ho"] += rec["h"].T @ d_logits
        d_h = d_logits @ w_ho.T + carry
        d_a = d_h * (1.0 - rec["h"] ** 2)
        g["W_ih"] += rec["x"].T @ d_a
        g["W_hh"] += rec["h_prev"].T @ d_a
        carry = d_a @ w_hh.T if through_time else np.zeros_like(carry)
    return g, loss / batch


def _lru_decay(params):
    nu, theta = params["nu"], params["theta"]
    rate = np.exp(nu)
    modulus = np.exp(-rate)
    lam = (modulus * np.cos(theta) + 1j * modulus * np.sin(theta)).astype(params["B"].dtype)
    gamma = np.sqrt(1.0 - modulus**2)
    return lam, gamma, rate, modulus


def _lru_forward(params, inputs, tape, mask):
    lam, gamma, _, _ = _lru_decay(params)
    b, c, dmat, w_r, w_o = params["B"], params["C"], params["D"], params["W_r"], params["W_o"]
    batch, steps = inputs.shape[:2]
    h = np.zeros((batch, b.shape[1]), dtype=b.dtype)
    for t in range(steps):
        x = inputs[:, t]
        h_prev = h
        u = x @ b
        h = lam * h_prev + gamma * u
        a = np.tanh((h @ c).real + x @ dmat)
        x_lru = a if mask is None else mask * a
        x_r = np.tanh(x_lru @ w_r)
        tape.records.append(
            {"x": x, "h_prev": h_prev, "u": u, "h": h, "a": a, "x_lru": x_lru, "x_r": x_r,
             "logits": x_r @ w_o}
        )
    return tape


def _lru_backward(params, tape, targets, ls, through_time, mask):
    lam, gamma, rate, modulus = _lru_decay(params)
    c, w_r, w_o = params["C"], params["W_r"], params["W_o"]
    batch = targets.shape[0]
    g = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    g_lam = np.zeros_like(lam)
    g_gamma = np.zeros_like(gamma)
    carry = np.zeros_like(tape.records[0]["h"])
    loss = 0.0
    for t in reversed(range(len(tape))):
        rec = tape.records[t]
        y = _smooth(targets[:, t], ls)
        loss += _ce(rec["logits"], y).sum()
        d_logits = (_softmax(rec["logits"]) - y) / batch
        g["W_o"] += rec["x_r"].T @ d_logits
        d_zr = (d_logits @ w_o.T) * (1.0 - rec["x_r"] ** 2)
        g["W_r"] += rec["x_lru"].T @ d_zr
        d_xlru = d_zr @ w_r.T
        d_pre = d_xlru * (1.0 - rec["a"] ** 2)
        if mask is not None:
            d_pre = d_pre * mask
        g["D"] += rec["x"].T @ d_pre
        g["C"] += rec["h"].conj().T @ d_pre
        d_h = d_pre @ c.conj().T + carry
        g_lam += (rec["h_prev"].conj() * d_h).sum(axis=0)
        g_gamma += (d_h.conj() * rec["u"]).real.sum(axis=0)
        g["B"] += rec["x"].T @ (gamma * d_h)
        carry = lam.conj() * d_h if through_time else np.zeros_like(carry)
    # lam = exp(-exp(nu) + i theta), gamma = sqrt(1 - exp(-2 exp(nu)))
    dlam_dnu = -rate * lam
    dlam_dtheta = 1j * lam
    dgamma_dnu = rate * modulus**2 / gamma
    g["nu"] = ((g_lam.conj() * dlam_dnu).real + g_gamma * dgamma_dnu).astype(g["nu"].dtype)
    g["theta"] = (g_lam.conj() * dlam_dtheta).real.astype(g["theta"].dtype)
    return g, loss / batch


def record_tape(params, inputs, mask=None):
    tape = UnrolledTape()
    if params.family == "tanh_rnn":
        return _tanh_forward(params, inputs, tape)
    if params.family == "lru":
        return _lru_forward(params, inputs, tape, mask)
    raise UsageError(f"unknown cell family {params.family!r}")


def _gradients(params, inputs, targets, label_smoothing, mask, through_time, return_tape):
    tape = record_tape(params, inputs, mask)
    if params.family == "tanh_rnn":
        grads, loss = _tanh_backward(params, tape, targets, label_smoothing, through_time)
    else:
        grads, loss = _lru_backward(params, tape, targets, label_smoothing, through_time, mask)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    if return_tape:
        return grads, loss, tape
    return grads, loss


def bptt_gradients(params, inputs, targets, label_smoothing=0.0, mask=None, return_tape=False):
    """Exact gradients of the summed per-step cross-entropy through the unrolled sequence."""
    return _gradients(params, inputs, targets, label_smoothing, mask, True, return_tape)


def spatial_bp_gradients(params, inputs, targets, label_smoothing=0.0, mask=None, return_tape=False):
    """Per-step gradients with the previous state treated as a constant, summed over steps."""
    return _gradients(params, inputs, targets, label_smoothing, mask, False, return_tape)


def sequence_loss(params, inputs, targets, label_smoothing=0.0, mask=None):
    """Batch-mean, time-summed cross-entropy of a forward pass."""
    tape = record_tape(params, inputs, mask)
    total = sum(_ce(rec["logits"], _smooth(targets[:, t], label_smoothing)).sum()
                for t, rec in enumerate(tape.records))
    return total / inputs.shape[0]
