"""Free energy, prediction errors and the iterative inference (E-step)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cells import (
    CellParameters,
    EnergyBreakdown,
    cell_energy,
    get_cell,
    smooth_targets,
    softmax,
)
from .errors import NumericalError, ShapeError, UsageError

MODES = ("inference", "learning")


@dataclass
class InferenceConfig:
    iterations: int = 4
    learning_rate: float = 0.9
    momentum: float = 0.9

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise UsageError("inference.iterations must be a non-negative integer")
        if not self.learning_rate > 0:
            raise UsageError("inference.learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError("inference.momentum must lie in [0, 1)")
        self.iterations = int(self.iterations)


@dataclass
class LatentState:
    """Latents of one time step for a batch, with their predictions.

    ``inputs`` and ``prev_state`` are the clamped top-level input and the
    previous converged recurrent state; together with the parameters they
    determine every prediction.  ``initial_predictions`` keeps the feedforward
    values the latents were initialised to.
    """

    values: list
    predictions: list
    initial_predictions: list
    logits: np.ndarray
    initial_logits: np.ndarray
    inputs: np.ndarray
    prev_state: np.ndarray
    mask: np.ndarray | None = None
    velocities: list = field(default=None)

    def __post_init__(self):
        if self.velocities is None:
            self.velocities = [np.zeros_like(v) for v in self.values]

    @property
    def state(self):
        """The recurrent latent carried to the next time step."""
        return self.values[0]

    @property
    def batch_size(self):
        return self.inputs.shape[0]


def feedforward_state(params, inputs, prev_state, mask=None):
    cell = params.cell
    latents, logits = cell.feedforward(params, inputs, prev_state, mask)
    preds = [v.copy() for v in latents]
    return LatentState(
        values=latents,
        predictions=preds,
        initial_predictions=[v.copy() for v in latents],
        logits=logits,
        initial_logits=logits.copy(),
        inputs=inputs,
        prev_state=prev_state,
        mask=mask,
    )


def _check(state, params):
    cell = params.cell
    cell.check(params)
    if len(state.values) != len(cell.layer_names):
        raise ShapeError(
            f"{params.family} expects {len(cell.layer_names)} latent layers, got {len(state.values)}"
        )
    for i, (x, mu) in enumerate(zip(state.values, state.predictions)):
        if x.shape != mu.shape:
            raise ShapeError(f"layer {i}: latent shape {x.shape} != prediction shape {mu.shape}")


def refresh(state, params):
    """Recompute predictions and logits from the current latents."""
    preds, logits = params.cell.predict(
        params, state.inputs, state.prev_state, state.values, state.mask
    )
    return dataclasses.replace(state, predictions=preds, logits=logits)


def initial_predictions(state, params):
    """Feedforward predictions recomputed under ``params`` from the stored initial latents."""
    return params.cell.predict(
        params, state.inputs, state.prev_state, state.initial_predictions, state.mask
    )


def compute_energy(state, params, target=None, mode="inference", label_smoothing=0.0):
    """Free energy of ``state`` averaged over the batch.

    In ``learning`` mode every error is taken against the feedforward
    prediction and the output term uses the feedforward logits.  A missing
    target means the output layer is unclamped; it then relaxes onto its own
    prediction and contributes nothing.
    """
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    _check(state, params)
    if mode == "inference":
        preds, logits = params.cell.predict(
            params, state.inputs, state.prev_state, state.values, state.mask
        )
    else:
        preds, logits = initial_predictions(state, params)
    if target is not None and target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {logits.shape}")
    return cell_energy(params.family, state.values, preds, logits, target, label_smoothing)


def output_cotangent(logits, target, label_smoothing=0.0):
    """d CE / d logits per sample; zero when the output is unclamped."""
    if target is None:
        return np.zeros_like(logits)
    return softmax(logits) - smooth_targets(target, label_smoothing)


def latent_gradients(state, params, target=None, label_smoothing=0.0):
    """Analytic dF/dx of the batch-mean inference energy for every latent.

    Each sample's latents only enter its own energy term, so this is the
    per-sample gradient divided by the batch size.
    """
    cell = params.cell
    scales = cell.error_scales
    n = len(state.values)
    errors = [x - mu for x, mu in zip(state.values, state.predictions)]
    grads = []
    for i in range(n):
        if i + 1 < n:
            below = -scales[i + 1] * errors[i + 1]
        else:
            below = output_cotangent(state.logits, target, label_smoothing)
        g = scales[i] * errors[i] + _vjp(cell, params, i, state, state.values, state.predictions, below)
        grads.append(g / state.batch_size)
    return grads


def _vjp(cell, params, i, state, latents, preds, cot):
    return cell.vjp(params, i, latents, preds, state.mask, cot)


def learning_errors(state):
    """Errors of the learning-phase energy: converged latents minus feedforward predictions."""
    return [x - mu0 for x, mu0 in zip(state.values, state.initial_predictions)]


def equilibrium_errors(state, params, target=None, label_smoothing=0.0):
    """Errors that make dF/dx vanish for every latent, holding predictions fixed.

    Computed from the output upwards: each layer's error balances the pull of
    the layer below.  With latents at their feedforward values these errors
    carry exactly the backpropagated loss gradient.
    """
    cell = params.cell
    scales = cell.error_scales
    cot = output_cotangent(state.logits, target, label_smoothing)
    errors = [None] * len(state.values)
    for i in reversed(range(len(state.values))):
        cot = _vjp(cell, params, i, state, state.values, state.predictions, cot)
        errors[i] = -cot / scales[i]
    return errors


def inference_step(state, params, config, target=None, label_smoothing=0.0, iteration=None):
    """One SGD-with-momentum step on every latent; clamped input/output untouched."""
    grads = latent_gradients(state, params, target, label_smoothing)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite inference gradient", layer=i, iteration=iteration)
    lr, m = config.learning_rate, config.momentum
    velocities = [m * v - lr * g for v, g in zip(state.velocities, grads)]
    values = [x + v for x, v in zip(state.values, velocities)]
    new = dataclasses.replace(state, values=values, velocities=velocities)
    return refresh(new, params)


def run_inference(state, params, config, target=None, label_smoothing=0.0):
    """Apply ``config.iterations`` inference steps; return (state, inference energy)."""
    for i in range(config.iterations):
        state = inference_step(state, params, config, target, label_smoothing, iteration=i + 1)
    return state, compute_energy(state, params, target, "inference", label_smoothing)


__all__ = [
    "CellParameters",
    "EnergyBreakdown",
    "InferenceConfig",
    "LatentState",
    "compute_energy",
    "equilibrium_errors",
    "feedforward_state",
    "get_cell",
    "inference_step",
    "latent_gradients",
    "learning_errors",
    "run_inference",
]
