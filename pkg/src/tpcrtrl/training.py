"""Training loop, evaluation and run artifacts (metrics CSV, summary JSON, checkpoint)."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, tasks
from .cells import CellDims, get_cell, init_parameters, load_checkpoint, save_checkpoint
from .errors import NumericalError, UsageError
from .optim import Optimiser
from .rtrl import InfluenceTrace, make_credit
from .temporal import ImmediateCredit, run_sequence

METRIC_FIELDS = (
    "batch",
    "train_loss",
    "eval_loss",
    "eval_accuracy",
    "eval_accuracy_all",
    "eval_perplexity",
    "grad_norm",
    "energy_internal",
    "energy_output",
)
EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class TaskData:
    """Deterministic train/eval batches for one configured task."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.model.dtype)
        self.char_task = None
        if cfg.data.task == "char_lm":
            corpus = tasks.ingest_text_corpus(cfg.data.corpus, cfg.data.vocab_limit)
            self.char_task = tasks.CharTask(corpus, window=cfg.data.window)
            cfg.model.input_size = cfg.model.output_size = corpus.vocab_size
        elif cfg.model.input_size != tasks.COPY_VOCAB or cfg.model.output_size != tasks.COPY_VOCAB:
            raise UsageError(f"copy task needs model.input_size = model.output_size = {tasks.COPY_VOCAB}")

    def train_batch(self, index):
        seed = tasks.stream_seed(self.cfg.data.seed, tasks.TRAIN_STREAM, index)
        if self.char_task is not None:
            return self.char_task.train_batch(self.cfg.data.batch_size, seed, self.dtype)
        return tasks.generate_copy_batch(
            self.cfg.data.batch_size, seed, score_all=self._score_all(), dtype=self.dtype
        )

    def eval_batch(self):
        """The same held-out set at every evaluation."""
        if self.char_task is not None:
            return self.char_task.eval_batch(self.cfg.data.eval_samples, self.dtype)
        seed = tasks.stream_seed(self.cfg.data.seed, tasks.EVAL_STREAM, 0)
        return tasks.generate_copy_batch(
            self.cfg.data.eval_samples, seed, score_all=self._score_all(), dtype=self.dtype
        )

    def _score_all(self):
        return self.cfg.data.accuracy_positions == "all"


def build_params(cfg):
    m = cfg.model
    dims = CellDims(m.input_size, m.hidden_size, m.output_size, m.recurrent_size)
    return init_parameters(m.cell, dims, cfg.seed, dtype=np.dtype(m.dtype), dropout=m.dropout)


def build_optimiser(cfg):
    o = cfg.optim
    return Optimiser(
        o.name, o.lr, (o.beta1, o.beta2), o.eps, o.momentum, o.clip_norm,
        o.schedule, o.warmup_frac, cfg.train.batches,
    )


def memory_counts(cfg, params, steps):
    """Per-sequence stored elements of the credit-assignment state."""
    out = {"sequence_length": steps}
    batch = cfg.data.batch_size
    if cfg.algorithm == "bptt":
        x = np.zeros((1, steps, cfg.model.input_size), dtype=params.real_dtype)
        out["tape_elements"] = baselines.record_tape(params, x).element_count()
    if cfg.algorithm == "tpc_rtrl":
        out["trace_elements"] = InfluenceTrace.zeros(params, 1).element_count()
    out["batch_size"] = batch
    return out


@dataclass
class BatchOutcome:
    loss: float
    grad_norm: float
    energy_internal: float = math.nan
    energy_output: float = math.nan


def train_batch(cfg, params, optimiser, batch, mask):
    """One optimisation step (or T steps under the immediate schedule)."""
    algo = cfg.algorithm
    ls = cfg.train.label_smoothing
    if algo in ("bptt", "spatial_bp"):
        fn = baselines.bptt_gradients if algo == "bptt" else baselines.spatial_bp_gradients
        grads, loss = fn(params, batch.inputs, batch.targets, ls, mask)
        optimiser.apply(params, grads)
        return BatchOutcome(float(loss), optimiser.last_grad_norm)
    schedule = cfg.train.update_schedule
    if algo == "tpc_rtrl":
        credit = make_credit(params, cfg.train.trace_impl, schedule)
    else:
        credit = ImmediateCredit()
    apply = None
    if schedule == "immediate":
        def apply(g):
            optimiser.apply(params, g)
    result = run_sequence(
        params, batch.inputs, batch.targets, cfg.inference, credit=credit, schedule=schedule,
        apply=apply, label_smoothing=ls, error_mode=cfg.train.error_mode, mask=mask,
    )
    if result.grads is not None:
        optimiser.apply(params, result.grads)
    if not math.isfinite(result.loss):
        raise NumericalError("non-finite training loss")
    return BatchOutcome(float(result.loss), optimiser.last_grad_norm,
                        result.energy_internal, result.energy_output)


def evaluate_params(params, batch):
    return tasks.evaluate(params, batch)


class MetricsWriter:
    """CSV with a fixed header; every record is flushed as soon as it is written."""

    def __init__(self, path, timing=False):
        self.fields = METRIC_FIELDS + (("wall_ms",) if timing else ())
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(self.fields)
        self.fh.flush()

    def write(self, record):
        self.writer.writerow([_fmt(record.get(k)) for k in self.fields])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunResult:
    status: str
    records: list = field(default_factory=list)
    out_dir: Path | None = None
    error: str | None = None

    @property
    def exit_code(self):
        return EXIT_OK if self.status == "completed" else EXIT_DIVERGED

    def best(self, key, mode="max"):
        vals = [r[key] for r in self.records if r.get(key) is not None and math.isfinite(r[key])]
        if not vals:
            return None
        return max(vals) if mode == "max" else min(vals)


def train(cfg, out_dir, config_text="", timing=False, plot=True, log=None):
    """Run the configured training job and write its artifacts under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TaskData(cfg)
    params = build_params(cfg)
    optimiser = build_optimiser(cfg)
    eval_set = data.eval_batch()
    cell = get_cell(cfg.model.cell)
    writer = MetricsWriter(out / "metrics.csv", timing)
    result = RunResult("completed", out_dir=out)
    started = time.perf_counter()
    losses, norms, e_int, e_out = [], [], [], []
    try:
        for index in range(cfg.train.batches):
            batch = data.train_batch(index)
            rng = np.random.default_rng(tasks.stream_seed(cfg.seed, tasks.DROPOUT_STREAM, index))
            mask = cell.sample_mask(params, batch.batch_size, rng)
            outcome = train_batch(cfg, params, optimiser, batch, mask)
            losses.append(outcome.loss / batch.length)
            norms.append(outcome.grad_norm)
            e_int.append(outcome.energy_internal)
            e_out.append(outcome.energy_output)
            done = index + 1
            if done % cfg.train.eval_interval == 0 or done == cfg.train.batches:
                record = {
                    "batch": done,
                    "train_loss": float(np.mean(losses)),
                    "grad_norm": float(norms[-1]),
                    "energy_internal": _pc_mean(cfg, e_int),
                    "energy_output": _pc_mean(cfg, e_out),
                }
                record.update(evaluate_params(params, eval_set))
                if not all(math.isfinite(record[k]) for k in ("train_loss", "eval_loss")):
                    raise NumericalError(f"non-finite metrics at batch {done}")
                record["wall_ms"] = (time.perf_counter() - started) * 1e3
                writer.write(record)
                result.records.append(record)
                if log is not None:
                    log(record)
                losses, norms, e_int, e_out = [], [], [], []
    except (NumericalError, FloatingPointError) as exc:
        result.status = "diverged"
        result.error = str(exc)
    finally:
        writer.close()
    if result.status == "completed":
        save_checkpoint(out / "checkpoint.npz", params,
                        extra={"batches": cfg.train.batches, "data_seed": cfg.data.seed})
    write_summary(out / "summary.json", cfg, config_text, result, params, data, started)
    if plot and result.records:
        from .plotting import plot_runs

        plot_runs([out / "metrics.csv"], out / "curves.png", title=cfg.algorithm)
    return result


def _pc_mean(cfg, values):
    if cfg.algorithm not in ("tpc", "tpc_rtrl"):
        return None
    return float(np.mean(values))


def write_summary(path, cfg, config_text, result, params, data, started):
    steps = data.eval_batch().length if data.char_task is None else cfg.data.window
    summary = {
        "status": result.status,
        "error": result.error,
        "config_text": config_text,
        "config": cfg.flat(),
        "seeds": {"init": cfg.seed, "data": cfg.data.seed, "dropout": cfg.seed},
        "final": result.records[-1] if result.records else None,
        "best": {
            "eval_accuracy": result.best("eval_accuracy", "max"),
            "eval_loss": result.best("eval_loss", "min"),
            "eval_perplexity": result.best("eval_perplexity", "min"),
        },
        "memory": memory_counts(cfg, params, steps),
        "wall_seconds": time.perf_counter() - started,
    }
    Path(path).write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def evaluate_checkpoint(checkpoint, cfg):
    """Evaluation-only pass of a saved model on the configured task (dropout off)."""
    params, _ = load_checkpoint(checkpoint)
    data = TaskData(cfg)
    if params.family != cfg.model.cell:
        raise UsageError(f"checkpoint holds a {params.family} cell, config asks for {cfg.model.cell}")
    expected = build_params(cfg)
    for name in expected.names():
        if params[name].shape != expected[name].shape:
            raise UsageError(
                f"checkpoint {name} has shape {params[name].shape}, config implies {expected[name].shape}"
            )
    params = params.astype(np.dtype(cfg.model.dtype))
    return evaluate_params(params, data.eval_batch())
