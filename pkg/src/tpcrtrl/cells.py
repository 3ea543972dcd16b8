"""Cell families: a dense tanh RNN and a complex-valued LRU with a two-layer readout.

Both cells expose the same small interface used by the predictive-coding
machinery.  Latent layers are ordered top to bottom, starting with the
recurrent state; every later latent is predicted from the one before it and
the output logits are predicted from the last latent.  Every internal energy
term has the form ``(c / 2) * ||x - mu||**2`` where ``c`` is the layer's
``error_scale``; for complex latents the squared norm covers real and
imaginary parts.

Gradients with respect to complex quantities are packed as
``dL/dRe + 1j * dL/dIm`` throughout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError

FAMILIES = ("tanh_rnn", "lru")


@dataclass
class EnergyBreakdown:
    """Free-energy terms averaged over the batch."""

    internal_terms: list
    output_term: float
    total: float = field(default=None)

    def __post_init__(self):
        self.internal_terms = [float(v) for v in self.internal_terms]
        self.output_term = float(self.output_term)
        if self.total is None:
            self.total = math.fsum(self.internal_terms) + self.output_term

    @property
    def internal(self):
        return math.fsum(self.internal_terms)


@dataclass
class CellDims:
    input_size: int
    hidden_size: int
    output_size: int
    recurrent_size: int | None = None

    def validate(self, family):
        sizes = [self.input_size, self.hidden_size, self.output_size]
        if family == "lru":
            sizes.append(self.recurrent_size)
        if any(s is None or int(s) <= 0 for s in sizes):
            raise UsageError(f"all dimensions must be positive integers, got {self}")


@dataclass
class CellParameters:
    """Named weight arrays for one cell family."""

    family: str
    arrays: dict
    dropout: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UsageError(f"unknown cell family {self.family!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must lie in [0, 1)")

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def names(self):
        return list(self.arrays)

    def copy(self):
        return dataclasses.replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    @property
    def real_dtype(self):
        return next(iter(self.arrays.values())).real.dtype

    def astype(self, real_dtype):
        real_dtype = np.dtype(real_dtype)
        complex_dtype = np.result_type(real_dtype, np.complex64)
        out = {}
        for k, v in self.arrays.items():
            out[k] = v.astype(complex_dtype if np.iscomplexobj(v) else real_dtype)
        return dataclasses.replace(self, arrays=out)

    @property
    def cell(self):
        return get_cell(self.family)

    def dims(self):
        return self.cell.dims(self)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def smooth_targets(target, label_smoothing):
    if not label_smoothing:
        return target
    n_classes = target.shape[-1]
    return (1.0 - label_smoothing) * target + label_smoothing / n_classes


def cross_entropy(logits, target):
    """Per-sample cross-entropy of softmax(logits) against a (smoothed) target."""
    return -(target * _log_softmax(logits)).sum(axis=-1)


def _sq(a):
    if np.iscomplexobj(a):
        return (a.real**2 + a.imag**2).sum(axis=-1)
    return (a * a).sum(axis=-1)


class TanhRNN:
    """h = tanh(x W_ih + h_prev W_hh), logits = h W_ho."""

    family = "tanh_rnn"
    recurrent_names = ("W_ih", "W_hh")
    readout_names = ("W_ho",)
    layer_names = ("h",)
    error_scales = (2.0,)

    def dims(self, params):
        d, n = params["W_ih"].shape
        return CellDims(d, n, params["W_ho"].shape[1])

    def init(self, dims, rng, dtype=np.float64):
        d, n, o = dims.input_size, dims.hidden_size, dims.output_size

        def uni(rows, cols):
            bound = 1.0 / math.sqrt(rows)
            return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)

        return {"W_ih": uni(d, n), "W_hh": uni(n, n), "W_ho": uni(n, o)}

    def check(self, params):
        d, n = params["W_ih"].shape
        if params["W_hh"].shape != (n, n) or params["W_ho"].shape[0] != n:
            raise ShapeError(
                "tanh_rnn weights inconsistent: "
                f"W_ih {params['W_ih'].shape}, W_hh {params['W_hh'].shape}, W_ho {params['W_ho'].shape}"
            )

    def state_size(self, params):
        return params["W_hh"].shape[0]

    def zero_state(self, params, batch):
        return np.zeros((batch, self.state_size(params)), dtype=params.real_dtype)

    def sample_mask(self, params, batch, rng):
        return None

    def predict_state(self, params, x, h_prev):
        return np.tanh(x @ params["W_ih"] + h_prev @ params["W_hh"])

    def predict(self, params, x, h_prev, latents, mask=None):
        """Predictions for every latent plus the output logits."""
        mu_h = self.predict_state(params, x, h_prev)
        return [mu_h], latents[0] @ params["W_ho"]

    def feedforward(self, params, x, h_prev, mask=None):
        h = self.predict_state(params, x, h_prev)
        return [h], h @ params["W_ho"]

    def vjp(self, params, i, latents, preds, mask, cot, x=None):
        # Only the logits depend on the single latent.
        return cot @ params["W_ho"].T

    def readout_vjp(self, params, i, inputs, preds, mask, cot, x=None):
        return {"W_ho": inputs.T @ cot}

    def immediate_grads(self, params, x, h_prev, mu_state, signal):
        """Recurrent-parameter gradient through the current application only."""
        sigma = signal * (1.0 - mu_state**2)
        return {"W_ih": x.T @ sigma, "W_hh": h_prev.T @ sigma}


class LRU:
    """Linear recurrent unit with element-wise complex recurrence and a tanh readout.

    h = lam * h_prev + gamma * (x B)
    x_lru = m * tanh(Re[h C] + x D)
    x_r = tanh(x_lru W_r)
    logits = x_r W_o

    with lam = exp(-exp(nu) + 1j * theta) and gamma = sqrt(1 - |lam|^2).
    """

    family = "lru"
    recurrent_names = ("nu", "theta", "B")
    readout_names = ("C", "D", "W_r", "W_o")
    layer_names = ("h", "x_lru", "x_r")
    error_scales = (1.0, 2.0, 2.0)

    r_min = 0.9
    r_max = 0.999
    max_phase = math.pi / 10

    def dims(self, params):
        d, n = params["B"].shape
        return CellDims(d, params["W_r"].shape[0], params["W_o"].shape[1], recurrent_size=n)

    def init(self, dims, rng, dtype=np.float64, r_min=None, r_max=None, max_phase=None):
        r_min = self.r_min if r_min is None else r_min
        r_max = self.r_max if r_max is None else r_max
        max_phase = self.max_phase if max_phase is None else max_phase
        d, n, hid, v = dims.input_size, dims.recurrent_size, dims.hidden_size, dims.output_size
        cdtype = np.result_type(dtype, np.complex64)
        # |lam|^2 uniform on [r_min^2, r_max^2], i.e. lam uniform over the ring.
        u1 = rng.uniform(size=n)
        u2 = rng.uniform(size=n)
        nu = np.log(-0.5 * np.log(u1 * (r_max**2 - r_min**2) + r_min**2))
        theta = max_phase * u2

        def cnormal(rows, cols, fan_in):
            scale = 1.0 / math.sqrt(2.0 * fan_in)
            re = rng.normal(scale=scale, size=(rows, cols))
            im = rng.normal(scale=scale, size=(rows, cols))
            return (re + 1j * im).astype(cdtype)

        def uni(rows, cols):
            bound = 1.0 / math.sqrt(rows)
            return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)

        return {
            "nu": nu.astype(dtype),
            "theta": theta.astype(dtype),
            "B": cnormal(d, n, d),
            "C": cnormal(n, hid, n),
            "D": uni(d, hid),
            "W_r": uni(hid, hid),
            "W_o": uni(hid, v),
        }

    def check(self, params):
        d, n = params["B"].shape
        hid = params["W_r"].shape[0]
        ok = (
            params["nu"].shape == (n,)
            and params["theta"].shape == (n,)
            and params["C"].shape == (n, hid)
            and params["D"].shape == (d, hid)
            and params["W_r"].shape == (hid, hid)
            and params["W_o"].shape[0] == hid
        )
        if not ok:
            shapes = {k: v.shape for k, v in params.arrays.items()}
            raise ShapeError(f"lru weights inconsistent: {shapes}")

    @staticmethod
    def decay(params):
        """(lam, gamma) from the stable (nu, theta) parameterisation."""
        nu, theta = params["nu"], params["theta"]
        rate = np.exp(nu)
        lam = np.exp(-rate) * (np.cos(theta) + 1j * np.sin(theta))
        gamma = np.sqrt(-np.expm1(-2.0 * rate))
        return lam.astype(params["B"].dtype), gamma

    @staticmethod
    def decay_derivatives(params, lam, gamma):
        """d lam/d nu, d lam/d theta, d gamma/d nu."""
        rate = np.exp(params["nu"])
        dlam_dnu = -rate * lam
        dlam_dtheta = 1j * lam
        dgamma_dnu = rate * np.exp(-2.0 * rate) / gamma
        return dlam_dnu, dlam_dtheta, dgamma_dnu

    def state_size(self, params):
        return params["B"].shape[1]

    def zero_state(self, params, batch):
        return np.zeros((batch, self.state_size(params)), dtype=params["B"].dtype)

    def sample_mask(self, params, batch, rng):
        p = params.dropout
        if p == 0.0:
            return None
        hid = params["W_r"].shape[0]
        keep = rng.random((batch, hid)) >= p
        return (keep / (1.0 - p)).astype(params.real_dtype)

    def predict_state(self, params, x, h_prev):
        lam, gamma = self.decay(params)
        return lam * h_prev + gamma * (x @ params["B"])

    def _pre_lru(self, params, x, h):
        return (h @ params["C"]).real + x @ params["D"]

    def predict(self, params, x, h_prev, latents, mask=None):
        h, x_lru, x_r = latents
        mu_h = self.predict_state(params, x, h_prev)
        mu_lru = np.tanh(self._pre_lru(params, x, h))
        if mask is not None:
            mu_lru = mask * mu_lru
        mu_r = np.tanh(x_lru @ params["W_r"])
        return [mu_h, mu_lru, mu_r], x_r @ params["W_o"]

    def feedforward(self, params, x, h_prev, mask=None):
        h = self.predict_state(params, x, h_prev)
        x_lru = np.tanh(self._pre_lru(params, x, h))
        if mask is not None:
            x_lru = mask * x_lru
        x_r = np.tanh(x_lru @ params["W_r"])
        return [h, x_lru, x_r], x_r @ params["W_o"]

    def vjp(self, params, i, latents, preds, mask, cot, x=None):
        """Pull a cotangent on the prediction below latent ``i`` back onto latent ``i``."""
        if i == 0:
            # d tanh(a) / da, with the mask folded in: mu = m * tanh(a)
            t = preds[1] if mask is None else _safe_div(preds[1], mask)
            g_a = cot * (1.0 - t**2)
            if mask is not None:
                g_a = g_a * mask
            return g_a @ params["C"].conj().T
        if i == 1:
            return (cot * (1.0 - preds[2] ** 2)) @ params["W_r"].T
        return cot @ params["W_o"].T

    def readout_vjp(self, params, i, inputs, preds, mask, cot, x=None):
        if i == 1:
            t = preds[1] if mask is None else _safe_div(preds[1], mask)
            g_a = cot * (1.0 - t**2)
            if mask is not None:
                g_a = g_a * mask
            return {"C": inputs.conj().T @ g_a, "D": x.T @ g_a}
        if i == 2:
            return {"W_r": inputs.T @ (cot * (1.0 - preds[2] ** 2))}
        return {"W_o": inputs.T @ cot}

    def immediate_influence(self, params, x, h_prev):
        """d mu_h / d(nu, theta, B-row) for the current application only.

        Returns complex arrays shaped (batch, n), (batch, n) and (batch, n, d);
        the last holds d h_j / d Re B[k, j] (the Im direction is 1j times it).
        """
        lam, gamma = self.decay(params)
        dlam_dnu, dlam_dtheta, dgamma_dnu = self.decay_derivatives(params, lam, gamma)
        u = x @ params["B"]
        e_nu = dlam_dnu * h_prev + dgamma_dnu * u
        e_theta = dlam_dtheta * h_prev
        e_b = (gamma[None, :, None] * x[:, None, :]).astype(params["B"].dtype)
        return e_nu, e_theta, e_b

    def immediate_grads(self, params, x, h_prev, mu_state, signal):
        e_nu, e_theta, e_b = self.immediate_influence(params, x, h_prev)
        return trace_readout_lru(signal, e_nu, e_theta, e_b)


def trace_readout_lru(signal, e_nu, e_theta, e_b):
    """Contract a packed state cotangent with diagonal LRU sensitivities."""
    g_nu = (signal.conj() * e_nu).real.sum(axis=0)
    g_theta = (signal.conj() * e_theta).real.sum(axis=0)
    # packed grad for B[k, j] is signal_j * conj(e_b[j, k])
    g_b = np.einsum("bj,bjk->kj", signal, e_b.conj())
    return {"nu": g_nu, "theta": g_theta, "B": g_b}


def _safe_div(a, m):
    out = np.zeros_like(a)
    np.divide(a, m, out=out, where=m != 0)
    return out


_CELLS = {"tanh_rnn": TanhRNN(), "lru": LRU()}


def get_cell(family):
    try:
        return _CELLS[family]
    except KeyError:
        raise UsageError(f"unknown cell family {family!r}; expected one of {FAMILIES}") from None


def init_parameters(family, dims, seed, dtype=np.float64, dropout=0.0, **kwargs):
    """Deterministic initial parameters for ``family`` given ``seed``."""
    cell = get_cell(family)
    if not isinstance(dims, CellDims):
        dims = CellDims(**dims)
    dims.validate(family)
    rng = np.random.default_rng(seed)
    arrays = cell.init(dims, rng, dtype=np.dtype(dtype), **kwargs)
    return CellParameters(family, arrays, dropout=dropout, seed=seed)


def forward_tanh(input_t, h_prev, params):
    h = TanhRNN().predict_state(params, input_t, h_prev)
    return h, h @ params["W_ho"]


def forward_lru(input_t, h_prev, params, mask=None):
    (h, x_lru, x_r), logits = LRU().feedforward(params, input_t, h_prev, mask)
    return h, x_lru, x_r, logits


def cell_energy(family, latents, predictions, logits, target, label_smoothing=0.0):
    """Energy terms of one cell evaluated at the given latents and predictions.

    ``predictions`` and ``logits`` decide the mode: pass the current predictions
    for the inference energy, or the feedforward ones for the learning energy.
    """
    cell = get_cell(family)
    per_sample_internal = [
        0.5 * c * _sq(x - mu) for c, x, mu in zip(cell.error_scales, latents, predictions)
    ]
    if target is None:
        output = 0.0
    else:
        output = cross_entropy(logits, smooth_targets(target, label_smoothing)).mean()
    return EnergyBreakdown([v.mean() for v in per_sample_internal], output)


def save_checkpoint(path, params, extra=None):
    """Write named arrays plus family, dropout and seed to an ``.npz`` container."""
    path = Path(path)
    meta = {
        "__family__": np.array(params.family),
        "__dropout__": np.array(params.dropout, dtype=np.float64),
        "__seed__": np.array(-1 if params.seed is None else params.seed, dtype=np.int64),
    }
    for k, v in (extra or {}).items():
        meta[f"__extra_{k}__"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **params.arrays, **meta)
    return path


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if not k.startswith("__")}
        family = str(data["__family__"])
        dropout = float(data["__dropout__"])
        seed = int(data["__seed__"])
        extra = {k[8:-2]: data[k] for k in data.files if k.startswith("__extra_")}
    params = CellParameters(family, arrays, dropout=dropout, seed=None if seed < 0 else seed)
    get_cell(family).check(params)
    return params, extra
