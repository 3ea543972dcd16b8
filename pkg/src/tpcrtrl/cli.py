"""Command line: train, eval, gradcheck, gen-data and plot."""

from __future__ import annotations

import os

# one BLAS thread keeps reductions, and therefore metrics, identical across machines
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import build_config  # noqa: E402
from .errors import UsageError  # noqa: E402

OUTPUT_ENV = "TPC_RTRL_OUTPUT_DIR"

# flag -> dotted config key
CONFIG_FLAGS = {
    "algorithm": "algorithm",
    "seed": "seed",
    "cell": "model.cell",
    "hidden_size": "model.hidden_size",
    "recurrent_size": "model.recurrent_size",
    "dropout": "model.dropout",
    "dtype": "model.dtype",
    "task": "data.task",
    "data_seed": "data.seed",
    "batch_size": "data.batch_size",
    "eval_samples": "data.eval_samples",
    "corpus": "data.corpus",
    "window": "data.window",
    "vocab_limit": "data.vocab_limit",
    "inference_iterations": "inference.iterations",
    "inference_lr": "inference.learning_rate",
    "inference_momentum": "inference.momentum",
    "optimizer": "optim.name",
    "lr": "optim.lr",
    "clip_norm": "optim.clip_norm",
    "lr_schedule": "optim.schedule",
    "batches": "train.batches",
    "eval_interval": "train.eval_interval",
    "label_smoothing": "train.label_smoothing",
    "update_schedule": "train.update_schedule",
    "trace_impl": "train.trace_impl",
    "error_mode": "train.error_mode",
}


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="key = value file with dotted keys or [section] headers")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. --set optim.lr=1e-3 (repeatable)")
    for flag, key in CONFIG_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None, help=f"sets {key}")


def _config_from(args):
    overrides = {key: getattr(args, flag) for flag, key in CONFIG_FLAGS.items()}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    cfg, text = build_config(args.config, overrides)
    return cfg, text


def _default_out(cfg):
    base = Path(os.environ.get(OUTPUT_ENV, "runs"))
    return base / f"{cfg.algorithm}-{cfg.data.task}-seed{cfg.seed}"


def cmd_train(args):
    from .training import train

    cfg, text = _config_from(args)
    out = args.out or _default_out(cfg)

    def log(rec):
        if not args.quiet:
            print(f"batch {rec['batch']:>6}  train {rec['train_loss']:.4f}  eval {rec['eval_loss']:.4f}"
                  f"  acc {rec['eval_accuracy']:.4f}", flush=True)

    result = train(cfg, out, text, timing=args.timing, plot=not args.no_plot, log=log)
    if result.status != "completed":
        print(f"error: training diverged: {result.error}", file=sys.stderr)
    print(f"artifacts written to {out}")
    return result.exit_code


def cmd_eval(args):
    from .training import evaluate_checkpoint

    cfg, _ = _config_from(args)
    cfg.validate()
    metrics = evaluate_checkpoint(args.checkpoint, cfg)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    results = run_gradcheck(
        hidden=args.hidden, steps=args.steps, seed=args.seed,
        jacobian_fault=args.fault, n_states=args.states,
    )
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_gen_data(args):
    from .training import TaskData

    cfg, _ = _config_from(args)
    cfg.validate()
    data = TaskData(cfg)
    batch = data.eval_batch() if args.split == "eval" else data.train_batch(args.index)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, input_ids=batch.input_ids, target_ids=batch.target_ids, target_mask=batch.target_mask)
    for row in range(min(args.show, batch.batch_size)):
        print("input ", " ".join(map(str, batch.input_ids[row])))
        print("target", " ".join(map(str, batch.target_ids[row])))
    print(f"wrote {batch.batch_size} sequences of length {batch.length} to {out}")
    return 0


def cmd_plot(args):
    from .plotting import plot_runs

    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.metrics):
        raise UsageError("--labels needs one label per metrics file")
    path = plot_runs(args.metrics, args.out, labels=labels, title=args.title)
    print(f"figure written to {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="tpc-rtrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, summary, checkpoint and curves")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUTPUT_ENV}/<run> or runs/<run>)")
    p.add_argument("--timing", action="store_true", help="add a wall_ms column (breaks byte-identical reruns)")
    p.add_argument("--no-plot", action="store_true", help="skip the curves figure")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured task")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the numerical oracles at small scale (float64)")
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--states", type=int, default=100, help="random states for the inference-gradient check")
    p.add_argument("--fault", type=float, default=0.0,
                   help="offset added to the recurrent Jacobian inside the trace update (should fail)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="dump one batch of the configured task to an .npz file")
    _add_config_flags(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--index", type=int, default=0, help="train batch index")
    p.add_argument("--show", type=int, default=2, help="sequences to print")
    p.add_argument("--out", type=Path, default=Path("batch.npz"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("plot", help="render loss/accuracy curves from metrics CSV files")
    p.add_argument("metrics", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("curves.png"))
    p.add_argument("--labels", help="comma-separated, one per file; files sharing a label are averaged")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
