"""Run configuration: dotted key/value files, CLI overrides and task defaults."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .energy import InferenceConfig
from .errors import UsageError

ALGORITHMS = ("spatial_bp", "bptt", "tpc", "tpc_rtrl")
CELLS = ("tanh_rnn", "lru")
TASKS = ("copy", "char_lm")
PC_ALGORITHMS = ("tpc", "tpc_rtrl")


@dataclass
class ModelSettings:
    cell: str = "tanh_rnn"
    input_size: int = 10
    hidden_size: int = 128
    output_size: int = 10
    recurrent_size: int | None = None
    dropout: float = 0.0
    dtype: str = "float32"


@dataclass
class DataSettings:
    task: str = "copy"
    batch_size: int = 16
    seed: int = 0
    eval_samples: int = 200
    accuracy_positions: str = "masked"
    corpus: str | None = None
    window: int = 70
    vocab_limit: int | None = None


@dataclass
class OptimSettings:
    name: str = "adam"
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    clip_norm: float | None = 2.0
    schedule: str = "constant"
    warmup_frac: float = 0.1


@dataclass
class TrainSettings:
    batches: int = 5000
    eval_interval: int = 16
    label_smoothing: float = 0.0
    update_schedule: str = "time_batched"
    trace_impl: str = "forward"
    error_mode: str = "relaxed"


@dataclass
class RunConfig:
    algorithm: str = "tpc_rtrl"
    seed: int = 0
    model: ModelSettings = field(default_factory=ModelSettings)
    data: DataSettings = field(default_factory=DataSettings)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def flat(self):
        out = {"algorithm": self.algorithm, "seed": self.seed}
        for section in ("model", "data", "inference", "optim", "train"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return out

    def validate(self):
        _choice("algorithm", self.algorithm, ALGORITHMS)
        _choice("model.cell", self.model.cell, CELLS)
        _choice("data.task", self.data.task, TASKS)
        _choice("data.accuracy_positions", self.data.accuracy_positions, ("masked", "all"))
        _choice("optim.name", self.optim.name, ("adam", "sgd"))
        _choice("optim.schedule", self.optim.schedule, ("constant", "cosine"))
        _choice("train.update_schedule", self.train.update_schedule, ("time_batched", "immediate"))
        _choice("train.trace_impl", self.train.trace_impl, ("forward", "reverse"))
        _choice("train.error_mode", self.train.error_mode, ("relaxed", "equilibrium"))
        _choice("model.dtype", self.model.dtype, ("float32", "float64"))
        sized = ["model.hidden_size", "data.batch_size", "data.eval_samples", "data.window",
                 "train.batches", "train.eval_interval"]
        if self.data.task == "copy":
            # char_lm sizes come from the corpus vocabulary
            sized += ["model.input_size", "model.output_size"]
        for name in sized:
            if self.get(name) is None or int(self.get(name)) <= 0:
                raise UsageError(f"{name} must be a positive integer")
        if self.model.cell == "lru" and not self.model.recurrent_size:
            raise UsageError("model.recurrent_size is required for the lru cell")
        if not 0.0 <= self.model.dropout < 1.0:
            raise UsageError("model.dropout must lie in [0, 1)")
        if not 0.0 <= self.train.label_smoothing < 0.5:
            raise UsageError("train.label_smoothing must lie in [0, 0.5)")
        if self.optim.clip_norm is not None and not self.optim.clip_norm > 0:
            raise UsageError("optim.clip_norm must be positive")
        if self.data.task == "char_lm" and not self.data.corpus:
            raise UsageError("data.corpus is required for the char_lm task")
        if self.train.trace_impl == "reverse" and self.train.update_schedule != "time_batched":
            raise UsageError("train.trace_impl=reverse requires train.update_schedule=time_batched")
        if self.algorithm in PC_ALGORITHMS:
            # re-run the inference field checks with the naming the user sees
            try:
                InferenceConfig(**dataclasses.asdict(self.inference))
            except UsageError as exc:
                raise UsageError(str(exc)) from None
        return self

    def get(self, key):
        if "." not in key:
            return getattr(self, key)
        section, name = key.split(".", 1)
        return getattr(getattr(self, section), name)

    def set(self, key, value):
        if "." not in key:
            if key not in ("algorithm", "seed"):
                raise UsageError(f"unknown config field {key!r}")
            setattr(self, key, _coerce(key, value, type(getattr(self, key))))
            return
        section, name = key.split(".", 1)
        obj = getattr(self, section, None)
        if obj is None or not dataclasses.is_dataclass(obj) or name not in {
            f.name for f in dataclasses.fields(obj)
        }:
            raise UsageError(f"unknown config field {key!r}")
        ftype = {f.name: f.type for f in dataclasses.fields(obj)}[name]
        setattr(obj, name, _coerce(key, value, ftype))


def _choice(name, value, options):
    if value not in options:
        raise UsageError(f"{name} must be one of {options}, got {value!r}")


def _coerce(key, value, ftype):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if text.lower() in ("none", "null", ""):
        return None
    kind = str(ftype)
    try:
        if "int" in kind and "float" not in kind:
            return int(text)
        if "float" in kind:
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r} as {kind}") from None
    if "str" in kind:
        return text
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def defaults_for(task="copy", cell=None):
    """Copy task: the tuned tanh RNN settings.  char_lm: a desk-scale LRU."""
    cfg = RunConfig()
    cfg.data.task = task
    if task == "char_lm":
        cfg.model = ModelSettings(cell=cell or "lru", input_size=0, hidden_size=64,
                                  output_size=0, recurrent_size=64, dropout=0.0)
        cfg.data.batch_size = 32
        cfg.inference = InferenceConfig(iterations=3, learning_rate=0.1, momentum=0.9)
        cfg.optim.clip_norm = 2.0
        cfg.optim.schedule = "cosine"
        cfg.train.batches = 1500
        cfg.train.eval_interval = 50
        cfg.data.eval_samples = 200
    elif cell == "lru":
        cfg.model = ModelSettings(cell="lru", input_size=10, hidden_size=128,
                                  output_size=10, recurrent_size=128)
    return cfg


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment; ``[section]`` headers prefix later keys."""
    items = {}
    prefix = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip()
            prefix = f"{prefix}." if prefix else ""
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        items[prefix + key] = value
    return items


def build_config(file_path=None, overrides=None):
    """File values first, then overrides (CLI flags) on top of task defaults."""
    items = {}
    text = ""
    if file_path is not None:
        text = Path(file_path).read_text()
        items.update(parse_config_text(text))
    items.update({k: v for k, v in (overrides or {}).items() if v is not None})
    task = str(items.get("data.task", "copy"))
    cell = items.get("model.cell")
    cfg = defaults_for(task, cell)
    for key, value in items.items():
        cfg.set(key, value)
    return cfg, text
