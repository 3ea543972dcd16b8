"""Numerical oracles for the gradient and influence-trace code.

All checks run in float64 on small networks.  Errors are normwise per
array: ``max|a - b| / max|b|``, falling back to the absolute error when the
reference is identically zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import baselines
from . import energy as E
from .cells import CellDims, init_parameters
from .errors import UsageError
from .rtrl import TraceCredit
from .temporal import run_sequence

MAX_HIDDEN = 16
MAX_STEPS = 8
FD_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(self.error < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max error {self.error:.3e} (tolerance {self.tolerance:.0e}, {self.seconds:.2f}s)"


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.abs(b).max() if b.size else 0.0
    diff = np.abs(a - b).max() if b.size else 0.0
    return float(diff / scale) if scale > 0 else float(diff)


def _directions(a):
    """Unit perturbations of every real degree of freedom of ``a``."""
    units = (1.0, 1j) if np.iscomplexobj(a) else (1.0,)
    for idx in np.ndindex(a.shape):
        for unit in units:
            yield idx, unit


def finite_difference(fn, params, name, step=FD_STEP):
    """Central differences of scalar ``fn(params)``; complex arrays get packed dRe + i dIm."""
    a = params[name]
    out = np.zeros_like(a)
    for idx, unit in _directions(a):
        q = params.copy()
        q[name][idx] += step * unit
        plus = fn(q)
        q[name][idx] -= 2 * step * unit
        minus = fn(q)
        out[idx] += (plus - minus) / (2 * step) * unit
    return out


def _random_problem(family, dims, batch, steps, seed):
    params = init_parameters(family, dims, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    d, k = dims.input_size, dims.output_size
    inputs = np.eye(d)[rng.integers(0, d, (batch, steps))]
    targets = np.eye(k)[rng.integers(0, k, (batch, steps))]
    return params, inputs, targets


def check_bptt_vs_fd(params, inputs, targets):
    grads, _ = baselines.bptt_gradients(params, inputs, targets)

    def loss(q):
        return baselines.sequence_loss(q, inputs, targets)

    return max(relative_error(grads[n], finite_difference(loss, params, n)) for n in params.names())


def _zero_iteration_config():
    return E.InferenceConfig(iterations=0, learning_rate=0.1, momentum=0.0)


def check_rtrl_vs_bptt(params, inputs, targets, jacobian_fault=0.0):
    """tPC-RTRL without relaxation against BPTT, over every parameter."""
    ref, _ = baselines.bptt_gradients(params, inputs, targets)
    res = run_sequence(
        params, inputs, targets, _zero_iteration_config(),
        credit=TraceCredit(jacobian_fault), error_mode="equilibrium",
    )
    return max(relative_error(res.grads[n], ref[n]) for n in params.names())


def final_state(params, inputs):
    return baselines.record_tape(params, inputs).records[-1]["h"]


def perturbation_influence(params, inputs, name, step=FD_STEP):
    """d h_T / d w for every entry of ``params[name]`` by full re-runs.

    Returns (batch, n, *shape[, 2]) with a trailing (Re, Im) axis for complex
    parameters.
    """
    a = params[name]
    h = final_state(params, inputs)
    parts = 2 if np.iscomplexobj(a) else 1
    out = np.zeros(h.shape + a.shape + (parts,), dtype=h.dtype)
    for idx, unit in _directions(a):
        q = params.copy()
        q[name][idx] += step * unit
        plus = final_state(q, inputs)
        q[name][idx] -= 2 * step * unit
        minus = final_state(q, inputs)
        out[(slice(None), slice(None)) + idx + (0 if unit == 1.0 else 1,)] = (plus - minus) / (2 * step)
    return out if parts == 2 else out[..., 0]


def _run_trace(params, inputs, targets, jacobian_fault=0.0):
    credit = TraceCredit(jacobian_fault)
    run_sequence(params, inputs, targets, _zero_iteration_config(), credit=credit,
                 error_mode="equilibrium")
    return credit.trace


def check_dense_influence(params, inputs, targets, jacobian_fault=0.0):
    """Dense trace after T steps against perturbation of W_ih and W_hh."""
    trace = _run_trace(params, inputs, targets, jacobian_fault)
    batch, n = trace.dense.shape[:2]
    oracle = np.concatenate(
        [perturbation_influence(params, inputs, "W_ih"), perturbation_influence(params, inputs, "W_hh")],
        axis=2,
    ).reshape(batch, n, -1)
    return relative_error(trace.dense, oracle)


def check_lru_diagonal(params, inputs, targets, jacobian_fault=0.0):
    """(diagonal error, largest off-diagonal magnitude) of the LRU trace vs the dense oracle."""
    trace = _run_trace(params, inputs, targets, jacobian_fault)
    n = params["nu"].shape[0]
    eye = np.eye(n, dtype=bool)
    diag_err, off = 0.0, 0.0
    for name, stored in (("nu", trace.nu), ("theta", trace.theta)):
        oracle = perturbation_influence(params, inputs, name)  # (B, n, n)
        diag_err = max(diag_err, relative_error(stored, oracle[:, eye]))
        off = max(off, float(np.abs(oracle[:, ~eye]).max(initial=0.0)))
    oracle = perturbation_influence(params, inputs, "B")  # (B, n_out, d, n_param, 2)
    for part, factor in ((0, 1.0), (1, 1j)):
        o = oracle[..., part]  # [b, i, k, j] = d h_i / d B[k, j]
        diag = np.einsum("bjkj->bjk", o)
        diag_err = max(diag_err, relative_error(factor * trace.b, diag))
        mask = ~eye[:, None, :] & np.ones(o.shape[1:], dtype=bool)
        off = max(off, float(np.abs(o[:, mask]).max(initial=0.0)))
    return diag_err, off


def _noise(rng, like, scale):
    out = rng.normal(scale=scale, size=like.shape)
    if np.iscomplexobj(like):
        out = out + 1j * rng.normal(scale=scale, size=like.shape)
    return out


def check_inference_gradients(family, dims, n_states=100, seed=0):
    """Analytic dF/dx against central differences of the inference energy at random states."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s in range(n_states):
        params = init_parameters(family, dims, seed + s, dtype=np.float64)
        x = np.eye(dims.input_size)[rng.integers(0, dims.input_size, 1)]
        h_prev = params.cell.zero_state(params, 1)
        h_prev = h_prev + _noise(rng, h_prev, 1.0)
        target = np.eye(dims.output_size)[rng.integers(0, dims.output_size, 1)]
        state = E.feedforward_state(params, x, h_prev)
        for v in state.values:
            v += _noise(rng, v, 0.3)
        state = E.refresh(state, params)
        analytic = E.latent_gradients(state, params, target)
        for i, v in enumerate(state.values):
            num = np.zeros_like(v)
            for idx, unit in _directions(v):
                v[idx] += FD_STEP * unit
                plus = E.compute_energy(E.refresh(state, params), params, target).total
                v[idx] -= 2 * FD_STEP * unit
                minus = E.compute_energy(E.refresh(state, params), params, target).total
                v[idx] += FD_STEP * unit
                num[idx] += (plus - minus) / (2 * FD_STEP) * unit
            worst = max(worst, relative_error(analytic[i], num))
    return worst


def _timed(name, tol, fn):
    start = time.perf_counter()
    err = fn()
    return CheckResult(name, err, tol, time.perf_counter() - start)


def run_gradcheck(hidden=4, input_size=3, output_size=3, steps=5, batch=2, seed=0,
                  jacobian_fault=0.0, tolerance=1e-6, n_states=100, lru_state=3, lru_input=2,
                  lru_steps=4):
    """Every oracle at small scale; returns a list of :class:`CheckResult`."""
    if hidden > MAX_HIDDEN or lru_state > MAX_HIDDEN:
        raise UsageError(f"gradcheck needs hidden sizes <= {MAX_HIDDEN}")
    if steps > MAX_STEPS or lru_steps > MAX_STEPS:
        raise UsageError(f"gradcheck needs sequence lengths <= {MAX_STEPS}")
    tanh_dims = CellDims(input_size, hidden, output_size)
    lru_dims = CellDims(lru_input, lru_state, lru_input, recurrent_size=lru_state)
    p, x, y = _random_problem("tanh_rnn", tanh_dims, batch, steps, seed)
    q, u, v = _random_problem("lru", lru_dims, batch, lru_steps, seed)
    results = [
        _timed("tanh_rnn bptt vs finite differences", tolerance, lambda: check_bptt_vs_fd(p, x, y)),
        _timed("lru bptt vs finite differences", tolerance, lambda: check_bptt_vs_fd(q, u, v)),
        _timed("tanh_rnn rtrl (no inference) vs bptt", tolerance,
               lambda: check_rtrl_vs_bptt(p, x, y, jacobian_fault)),
        _timed("lru rtrl (no inference) vs bptt", tolerance,
               lambda: check_rtrl_vs_bptt(q, u, v, jacobian_fault)),
        _timed("tanh_rnn dense influence vs perturbation", tolerance,
               lambda: check_dense_influence(p, x, y, jacobian_fault)),
    ]
    start = time.perf_counter()
    diag, off = check_lru_diagonal(q, u, v, jacobian_fault)
    took = time.perf_counter() - start
    results.append(CheckResult("lru diagonal trace vs perturbation", diag, tolerance, took))
    results.append(CheckResult("lru off-diagonal influence magnitude", off, 1e-10, 0.0))
    for family, dims in (("tanh_rnn", tanh_dims), ("lru", lru_dims)):
        results.append(_timed(f"{family} inference gradient vs finite differences", tolerance,
                              lambda f=family, d=dims: check_inference_gradients(f, d, n_states, seed)))
    return results
