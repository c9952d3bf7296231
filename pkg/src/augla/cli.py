"""Command-line entry point: ``augla <command> [flags]``.

Commands write CSV to ``--out`` (default stdout). Human-readable summaries go
to stderr so the CSV stream stays clean.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .errors import ConfigError, InputError, StructureError, TrainingError
from .invariants import FULL, run_all
from .model import ModelConfig, parse_config_text
from .reference import AttnConfig
from .specdecode import DEFAULT_MAX_DEPTH, SpecTree, parse_tree_spec
from .train import TASKS

GLOBAL_DEFAULTS = dict(seed=0, dtype="f64", alpha=None, group=None, kernel=None, config=None, out=None)


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # The same flags are accepted before and after the command name. The
    # sub-command copy uses SUPPRESS so it does not overwrite earlier values.
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(0), help="RNG seed (default 0)")
    g.add_argument("--dtype", choices=("f32", "f64"), default=d("f64"),
                   help="benchmark precision; equivalence checks always run in f64")
    g.add_argument("--alpha", type=float, default=d(None), help="global-branch weight")
    g.add_argument("--group", type=int, default=d(None), help="group size G")
    g.add_argument("--kernel", type=int, default=d(None), help="convolution taps k")
    g.add_argument("--config", type=Path, default=d(None), help="key = value model config file")
    g.add_argument("--out", type=Path, default=d(None), help="CSV output path (default stdout)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augla", parents=[_global_flags(False)],
                                     description="Augmented linear attention benchmarks and demos.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = [_global_flags(True)]

    p = sub.add_parser("bench", parents=common, help="prefill latency, augmented vs quadratic")
    p.add_argument("--seq", type=_int_list, default=[1024, 8192], help="sequence lengths, e.g. 1024,8192")
    p.add_argument("--d-model", type=int, default=None, help="model width (default 256)")
    p.add_argument("--heads", type=int, default=None, help="attention heads (default 4)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--variants", default="augmented,quadratic")
    p.add_argument("--no-memory", action="store_true", help="skip the tracemalloc pass")
    p.add_argument("--no-isolate", action="store_true", help="measure in this process, not a fresh one per row")

    p = sub.add_parser("spec-bench", parents=common, help="tree decode vs per-path decode")
    p.add_argument("--tree", default="4,2,2", help="fan-out list or 'parents: r,r,0,...'")
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--history", type=int, default=100, help="tokens committed before the tree")
    p.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)

    p = sub.add_parser("train-demo", parents=common, help="causal vs leaky convolution training run")
    p.add_argument("--task", choices=TASKS, default="copy")
    p.add_argument("--leaky", action="store_true", help="use the centred (future-reading) convolution")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.3)

    p = sub.add_parser("invariants", parents=common, help="run oracle-equivalence checks")
    p.add_argument("--full", action="store_true", help="full acceptance-size case counts")
    p.add_argument("--only", default=None, help=f"comma list from: {', '.join(FULL)}")
    return parser


def _attn_config(args, base: ModelConfig | None) -> AttnConfig:
    cfg = base.attn if base is not None else AttnConfig(d_model=256, n_heads=4, group_size=64, conv_kernel=63)
    changes = {k: v for k, v in (("alpha", args.alpha), ("group_size", args.group),
                                 ("conv_kernel", args.kernel)) if v is not None}
    for flag, field in (("d_model", "d_model"), ("heads", "n_heads")):
        if getattr(args, flag, None) is not None:
            changes[field] = getattr(args, flag)
    return replace(cfg, **changes)


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _cmd_bench(args, base):
    cfg = _attn_config(args, base)
    variants = tuple(v.strip() for v in args.variants.split(","))
    bad = set(variants) - set(bench.VARIANTS)
    if bad:
        raise ConfigError(f"unknown variants {sorted(bad)}")
    rows = bench.bench_prefill(args.seq, cfg, repeats=args.repeats, seed=args.seed, dtype=args.dtype,
                               variants=variants, measure_memory=not args.no_memory,
                               isolate=not args.no_isolate)
    _emit(bench.to_csv(rows, bench.BENCH_HEADER), args.out)


def _cmd_spec_bench(args, base):
    cfg = _attn_config(args, base)
    spec_cfg = replace(cfg, d_model=cfg.head_dim, n_heads=1)
    parents = parse_tree_spec(args.tree)
    tree = SpecTree(tuple(parents), (0,) * len(parents), args.max_depth)
    rows = bench.bench_spec(tree, args.rounds, spec_cfg, history=args.history, seed=args.seed)
    _emit(bench.to_csv(rows, bench.SPEC_HEADER), args.out)
    speed = rows[1]["ms_mean"] / max(rows[0]["ms_mean"], 1e-9)
    print(f"tree {rows[0]['ms_mean']:.3f} ms, per-path {rows[1]['ms_mean']:.3f} ms, speed-up {speed:.2f}x",
          file=sys.stderr)


def _cmd_train_demo(args, base):
    rows, res = bench.train_demo(task=args.task, leaky=args.leaky, steps=args.steps, lr=args.lr,
                                 seed=args.seed, alpha=args.alpha, group=args.group,
                                 kernel=args.kernel, base=base)
    _emit(bench.to_csv(rows, bench.TRAIN_HEADER), args.out)
    final = res.losses[-1] if res.losses else float("nan")
    print(f"{'leaky' if args.leaky else 'causal'}: final loss {final:.4f}, eval accuracy "
          f"{res.eval_accuracy:.3f} (chance {res.chance:.3f})", file=sys.stderr)


def _cmd_invariants(args, base):
    only = None
    if args.only:
        only = [s.strip() for s in args.only.split(",")]
        unknown = set(only) - set(FULL)
        if unknown:
            raise ConfigError(f"unknown checks {sorted(unknown)}")
    results = run_all(quick=not args.full, seed=args.seed, only=only)
    text = "".join(r.line() + "\n" for r in results)
    _emit(text, args.out)
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "bench": _cmd_bench,
    "spec-bench": _cmd_spec_bench,
    "train-demo": _cmd_train_demo,
    "invariants": _cmd_invariants,
}


def cli_main(argv=None) -> int:
    """Run one command; returns the process exit code (2 for usage errors)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        base = parse_config_text(args.config.read_text()) if args.config else None
        return COMMANDS[args.command](args, base) or 0
    except OSError as exc:
        print(f"augla: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, InputError, StructureError) as exc:
        print(f"augla: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"augla: training failed: {exc} {exc.diagnostics}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())
