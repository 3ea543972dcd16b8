"""Temporal predictive coding: per-step inference with converged-state carryover.

A sequence is processed one step at a time.  At every step the latents are
initialised to their feedforward values given the previous *converged*
recurrent state, relaxed by inference, and the relaxed state is carried
forward.  Weight gradients come from the learning-phase energy; how the
recurrent parameters receive credit is delegated to a credit object
(``ImmediateCredit`` here, the influence-trace variants in :mod:`.rtrl`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import energy as E
from .errors import NumericalError, UsageError

SCHEDULES = ("time_batched", "immediate")
ERROR_MODES = ("relaxed", "equilibrium")


@dataclass
class TemporalContext:
    converged_state_prev: np.ndarray
    time_index: int = 0
    mask: np.ndarray | None = None
    momentum_buffers: list | None = None


def initial_context(params, batch_size, initial_state=None, mask=None):
    if initial_state is None:
        initial_state = params.cell.zero_state(params, batch_size)
    return TemporalContext(initial_state, 0, mask)


def temporal_predict(context, input_t, params):
    """Feedforward latents for the next step given the previous converged state."""
    prev = context.converged_state_prev
    if prev.shape != (input_t.shape[0], params.cell.state_size(params)):
        raise E.ShapeError(
            f"previous state shape {prev.shape} does not fit batch {input_t.shape[0]} "
            f"and state size {params.cell.state_size(params)}"
        )
    return E.feedforward_state(params, input_t, prev, context.mask)


def step(context, input_t, target_t, params, inference_config, label_smoothing=0.0):
    """Predict, relax, and hand the converged state to the next step."""
    state = temporal_predict(context, input_t, params)
    try:
        converged, energy = E.run_inference(
            state, params, inference_config, target_t, label_smoothing
        )
    except NumericalError as exc:
        raise NumericalError(
            "non-finite inference gradient",
            layer=exc.layer,
            iteration=exc.iteration,
            time_index=context.time_index + 1,
        ) from exc
    new_context = dataclasses.replace(
        context,
        converged_state_prev=converged.values[0],
        time_index=context.time_index + 1,
        momentum_buffers=converged.velocities,
    )
    return converged, energy, new_context


class GradientAccumulator:
    """Running sum of per-step gradient contributions."""

    def __init__(self):
        self.total = {}
        self.count = 0

    def add(self, grads):
        for k, g in grads.items():
            if k in self.total:
                self.total[k] = self.total[k] + g
            else:
                self.total[k] = g.copy()
        self.count += 1


def accumulate_or_apply(updates, contribution, schedule, apply):
    """Time-batched: add to ``updates``.  Immediate: hand to ``apply`` now."""
    if schedule == "immediate":
        apply(contribution)
    elif schedule == "time_batched":
        updates.add(contribution)
    else:
        raise UsageError(f"unknown update schedule {schedule!r}")


def readout_gradients(state, params, errors, target, label_smoothing=0.0):
    """Learning-energy gradients for the readout parameters (summed over the batch).

    Every readout prediction is evaluated at the feedforward latents, so these
    are purely local.
    """
    cell = params.cell
    scales = cell.error_scales
    inputs = state.initial_predictions
    preds = state.initial_predictions
    grads = {}
    n = len(inputs)
    for i in range(1, n):
        cot = -scales[i] * errors[i]
        grads.update(cell.readout_vjp(params, i, inputs[i - 1], preds, state.mask, cot, x=state.inputs))
    cot = E.output_cotangent(state.initial_logits, target, label_smoothing)
    grads.update(cell.readout_vjp(params, n, inputs[n - 1], preds, state.mask, cot, x=state.inputs))
    return grads


def state_signal(params, errors):
    """dF_W/d mu for the recurrent state (packed for complex states)."""
    return -params.cell.error_scales[0] * errors[0]


class ImmediateCredit:
    """Plain tPC: recurrent parameters see only their current application."""

    name = "immediate"

    def begin(self, params, batch_size):
        pass

    def contribution(self, params, converged, context_prev, signal):
        return params.cell.immediate_grads(
            params,
            converged.inputs,
            context_prev.converged_state_prev,
            converged.initial_predictions[0],
            signal,
        )

    def finish(self, params):
        return {}

    def element_count(self):
        return 0


@dataclass
class SequenceResult:
    grads: dict | None
    loss: float
    energy_internal: float
    energy_output: float
    steps: int


def run_sequence(
    params,
    inputs,
    targets,
    inference_config,
    credit=None,
    schedule="time_batched",
    apply=None,
    label_smoothing=0.0,
    error_mode="relaxed",
    mask=None,
    initial_state=None,
    on_step=None,
):
    """Run tPC over a batch of sequences (batch-major ``inputs``/``targets``).

    Returns batch-mean gradients summed over time when time-batched; with the
    immediate schedule every step's contribution is passed to ``apply`` and
    ``grads`` is None.
    """
    if schedule not in SCHEDULES:
        raise UsageError(f"unknown update schedule {schedule!r}")
    if error_mode not in ERROR_MODES:
        raise UsageError(f"unknown error mode {error_mode!r}")
    if schedule == "immediate" and apply is None:
        raise UsageError("the immediate schedule needs an apply callback")
    credit = credit or ImmediateCredit()
    batch, steps = inputs.shape[:2]
    context = initial_context(params, batch, initial_state, mask)
    credit.begin(params, batch)
    updates = GradientAccumulator()
    loss = internal = output = 0.0
    for t in range(steps):
        x_t, y_t = inputs[:, t], targets[:, t]
        context_prev = context
        converged, energy, context = step(
            context, x_t, y_t, params, inference_config, label_smoothing
        )
        if error_mode == "relaxed":
            errors = E.learning_errors(converged)
        else:
            errors = E.equilibrium_errors(converged, params, y_t, label_smoothing)
        signal = state_signal(params, errors)
        contrib = readout_gradients(converged, params, errors, y_t, label_smoothing)
        contrib.update(credit.contribution(params, converged, context_prev, signal))
        contrib = {k: g / batch for k, g in contrib.items()}
        learn = E.compute_energy(converged, params, y_t, "learning", label_smoothing)
        loss += learn.output_term
        internal += energy.internal
        output += energy.output_term
        if on_step is not None:
            on_step(t, converged, energy)
        accumulate_or_apply(updates, contrib, schedule, apply)
    extra = credit.finish(params)
    if schedule == "immediate":
        if extra:
            apply({k: g / batch for k, g in extra.items()})
        grads = None
    else:
        grads = updates.total
        for k, g in extra.items():
            grads[k] = grads[k] + g / batch
    return SequenceResult(grads, loss, internal / steps, output / steps, steps)
