"""Influence traces and the historic + immediate recurrent update.

The dense layout (tanh RNN) stores, per sequence, ``M[i, p] = d h_i / d w_p``
for every recurrent parameter ``w_p`` where the recurrent parameters are the
rows of ``[W_ih; W_hh]`` flattened in C order (``p = k * n + j`` for entry
``[k, j]``).  The diagonal layout (LRU) stores per unit ``j`` the complex
sensitivities ``d h_j / d nu_j``, ``d h_j / d theta_j`` and
``d h_j / d Re B[k, j]``; the ``Im B`` direction is ``1j`` times the last.

Traces are advanced with the converged state substituted for the predicted
one, while the parameter update itself uses Jacobians at the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import trace_readout_lru
from .errors import NumericalError, ShapeError, UsageError
from .temporal import readout_gradients

LAYOUTS = ("dense", "diagonal")


@dataclass
class ParamPartition:
    recurrent: tuple
    readout: tuple

    @classmethod
    def of(cls, params):
        cell = params.cell
        part = cls(tuple(cell.recurrent_names), tuple(cell.readout_names))
        names = set(params.names())
        if set(part.recurrent) & set(part.readout) or set(part.recurrent) | set(part.readout) != names:
            raise ShapeError(f"parameter partition does not cover {sorted(names)}")
        return part


@dataclass
class InfluenceTrace:
    layout: str
    dense: np.ndarray | None = None
    nu: np.ndarray | None = None
    theta: np.ndarray | None = None
    b: np.ndarray | None = None

    @classmethod
    def zeros(cls, params, batch_size):
        if params.family == "tanh_rnn":
            d, n = params["W_ih"].shape
            m = np.zeros((batch_size, n, (d + n) * n), dtype=params.real_dtype)
            return cls("dense", dense=m)
        d, n = params["B"].shape
        cdt = params["B"].dtype
        return cls(
            "diagonal",
            nu=np.zeros((batch_size, n), dtype=cdt),
            theta=np.zeros((batch_size, n), dtype=cdt),
            b=np.zeros((batch_size, n, d), dtype=cdt),
        )

    def element_count(self):
        """Stored (real or complex) entries per sequence."""
        if self.layout == "dense":
            return int(np.prod(self.dense.shape[1:]))
        return int(self.nu.shape[1] + self.theta.shape[1] + np.prod(self.b.shape[1:]))

    def copy(self):
        def c(a):
            return None if a is None else a.copy()

        return InfluenceTrace(self.layout, c(self.dense), c(self.nu), c(self.theta), c(self.b))


def _diag_index(d, n):
    """(unit, flat-parameter) pairs where d h_i / d W[k, i] is immediate."""
    units = np.tile(np.arange(n), d + n)
    flat = np.arange((d + n) * n)
    return units, flat


def dense_trace_step(m_prev, deriv, z, w_hh):
    """M_new[b, i, (k, j)] = deriv[b, i] * (delta_ij z[b, k] + sum_m W_hh[m, i] M[b, m, (k, j)]).

    ``deriv`` is the elementwise derivative of the nonlinearity (ones for a
    linear cell).
    """
    batch, n, p = m_prev.shape
    k = z.shape[1]
    if p != k * n or w_hh.shape != (n, n):
        raise ShapeError(f"trace of shape {m_prev.shape} does not fit z {z.shape} and W_hh {w_hh.shape}")
    hist = np.matmul(w_hh.T, m_prev)
    units, flat = _diag_index(k - n, n)
    hist[:, units, flat] += z.repeat(n, axis=1)
    hist *= deriv[:, :, None]
    return hist


def update_trace(trace, converged_state, context_prev, params):
    """Advance the trace one step at the converged state."""
    if trace.layout == "dense":
        if params.family != "tanh_rnn":
            raise ShapeError("dense traces belong to the tanh_rnn cell")
        x_hat = converged_state.values[0]
        deriv = 1.0 - x_hat**2
        if not np.all(np.isfinite(deriv)):
            raise NumericalError("non-finite Jacobian in trace update")
        z = np.concatenate([converged_state.inputs, context_prev.converged_state_prev], axis=1)
        return InfluenceTrace("dense", dense=dense_trace_step(trace.dense, deriv, z, params["W_hh"]))
    if params.family != "lru":
        raise ShapeError("diagonal traces belong to the lru cell")
    return diagonal_trace_update_lru(
        trace, context_prev.converged_state_prev, converged_state.inputs, params
    )


def diagonal_trace_update_lru(trace, h_prev, input_t, params):
    """Element-wise LRU trace recursion: e <- immediate + lam * e."""
    lam, _ = params.cell.decay(params)
    e_nu, e_theta, e_b = params.cell.immediate_influence(params, input_t, h_prev)
    return InfluenceTrace(
        "diagonal",
        nu=e_nu + lam * trace.nu,
        theta=e_theta + lam * trace.theta,
        b=e_b + lam[None, :, None] * trace.b,
    )


def parameter_update(trace, converged_state, context_prev, params, signal):
    """Historic + immediate recurrent gradient for one step, summed over the batch.

    ``trace`` is the influence before this step and ``signal`` is
    dF_W/d mu of the recurrent state.  Nothing is applied here.
    """
    h_prev = context_prev.converged_state_prev
    x = converged_state.inputs
    if trace.layout == "dense":
        if params.family != "tanh_rnn":
            raise ShapeError("dense traces belong to the tanh_rnn cell")
        d, n = params["W_ih"].shape
        mu = converged_state.initial_predictions[0]
        sigma = signal * (1.0 - mu**2)
        # row vector (dF/dmu)(dmu/dh_prev) first, never a Jacobian product
        r = sigma @ params["W_hh"].T
        hist = np.einsum("bm,bmp->p", r, trace.dense).reshape(d + n, n)
        z = np.concatenate([x, h_prev], axis=1)
        full = z.T @ sigma + hist
        return {"W_ih": full[:d], "W_hh": full[d:]}
    if params.family != "lru":
        raise ShapeError("diagonal traces belong to the lru cell")
    lam, _ = params.cell.decay(params)
    e_nu, e_theta, e_b = params.cell.immediate_influence(params, x, h_prev)
    return trace_readout_lru(
        signal,
        e_nu + lam * trace.nu,
        e_theta + lam * trace.theta,
        e_b + lam[None, :, None] * trace.b,
    )


def readout_update(converged_state, params, errors, target, label_smoothing=0.0):
    """Immediate-only readout gradient of the learning energy, summed over the batch."""
    return readout_gradients(converged_state, params, errors, target, label_smoothing)


class TraceCredit:
    """tPC-RTRL credit: maintain influence traces forward in time."""

    name = "rtrl"

    def __init__(self, jacobian_fault=0.0):
        self.trace = None
        self.jacobian_fault = jacobian_fault

    def begin(self, params, batch_size):
        self.trace = InfluenceTrace.zeros(params, batch_size)

    def contribution(self, params, converged, context_prev, signal):
        grads = parameter_update(self.trace, converged, context_prev, params, signal)
        trace_params = params
        if self.jacobian_fault:
            trace_params = params.copy()
            key = "W_hh" if params.family == "tanh_rnn" else "theta"
            trace_params[key] = trace_params[key] + self.jacobian_fault
        self.trace = update_trace(self.trace, converged, context_prev, trace_params)
        return grads

    def finish(self, params):
        return {}

    def element_count(self):
        return 0 if self.trace is None else self.trace.element_count()


class ReverseTraceCredit:
    """The time-batched dense-trace update evaluated by reverse accumulation.

    The trace recursion is linear in the trace, so the summed historic term
    ``sum_t r_t M^(t-1)`` can be collected backwards over the stored
    per-step quantities instead of carrying the O(n^2 (d + n)) trace.  It
    yields the same gradient as :class:`TraceCredit` up to rounding, but only
    for time-batched updates with parameters fixed over the sequence.
    """

    name = "rtrl_reverse"

    def __init__(self):
        self._z = []
        self._sigma = []
        self._deriv = []

    def begin(self, params, batch_size):
        if params.family != "tanh_rnn":
            raise UsageError("reverse evaluation is implemented for the dense tanh_rnn trace only")
        self._z, self._sigma, self._deriv = [], [], []

    def contribution(self, params, converged, context_prev, signal):
        x = converged.inputs
        h_prev = context_prev.converged_state_prev
        z = np.concatenate([x, h_prev], axis=1)
        mu = converged.initial_predictions[0]
        sigma = signal * (1.0 - mu**2)
        self._z.append(z)
        self._sigma.append(sigma)
        self._deriv.append(1.0 - converged.values[0] ** 2)
        d = x.shape[1]
        imm = z.T @ sigma
        return {"W_ih": imm[:d], "W_hh": imm[d:]}

    def finish(self, params):
        w_hh = params["W_hh"]
        d = params["W_ih"].shape[0]
        steps = len(self._z)
        if steps == 0:
            return {}
        total = np.zeros((self._z[0].shape[1], w_hh.shape[0]), dtype=self._z[0].dtype)
        w_next = np.zeros_like(self._sigma[0])
        for t in range(steps - 2, -1, -1):
            c = (self._sigma[t + 1] + w_next) @ w_hh.T
            w_next = c * self._deriv[t]
            total += self._z[t].T @ w_next
        self._z, self._sigma, self._deriv = [], [], []
        return {"W_ih": total[:d], "W_hh": total[d:]}

    def element_count(self):
        return 0


def make_credit(params, impl="forward", schedule="time_batched"):
    if impl == "forward":
        return TraceCredit()
    if impl == "reverse":
        if schedule != "time_batched":
            raise UsageError("trace_impl=reverse requires time-batched updates")
        if params.family != "tanh_rnn":
            return TraceCredit()
        return ReverseTraceCredit()
    raise UsageError(f"unknown trace implementation {impl!r}")
