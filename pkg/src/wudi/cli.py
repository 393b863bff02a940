"""Command-line interface.

Subcommands: merge, extract, diagnose, ablate, verify. Progress goes to
stderr; reports go to files or stdout. Exit codes: 0 success, 1
operational error, 2 usage error. ``--threads`` falls back to the
WUDI_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import plots
from .checkpoint import (
    Checkpoint,
    TensorEntry,
    apply_name_remap,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    validate_compatible,
)
from .diagnostics import input_consistency
from .errors import (
    CheckpointIntegrityError,
    CheckpointParseError,
    DivergenceError,
    ManifestError,
    MergeLayerError,
    NonFiniteTensorError,
    SingularMatrixError,
    WudiError,
)
from .experiments import ablation_comparison, interference_comparison
from .solver import merge
from .synth import FOUR_TASK_GD_LR, FOUR_TASK_GD_STEPS
from .taskvector import (
    DEFAULT_EXCLUDE,
    MergeConfig,
    classify_layers,
    extract_lora_task_vector,
    extract_task_vector,
)
from .verification import run_all

OMEGA_HINT = "retry with --omega 1e-6"


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _fail(module: str, cause: str, layer: str | None = None) -> int:
    error = {"module": module, "layer": layer, "cause": cause}
    print(json.dumps({"error": error}, sort_keys=True), file=sys.stderr)
    return 1


def _default_threads() -> int:
    env = os.environ.get("WUDI_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _emit(report: dict, out: str | None, fmt: str) -> None:
    if fmt == "json":
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    else:
        text = _render_text(report) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
        _progress(f"report written to {out}")
    else:
        sys.stdout.write(text)


def _render_text(report: dict, indent: int = 0) -> str:
    lines = []
    pad = "  " * indent
    for key, value in report.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(_render_text(value, indent + 1))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            lines.append(f"{pad}{key}:")
            for item in value:
                lines.append(
                    "  " * (indent + 1)
                    + ", ".join(f"{k}={_fmt_val(v)}" for k, v in item.items())
                )
        else:
            lines.append(f"{pad}{key}: {_fmt_val(value)}")
    return "\n".join(lines)


def _fmt_val(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt_val(x) for x in v) + "]"
    return v


def _config_from_args(args) -> MergeConfig:
    return MergeConfig(
        method=args.method,
        epsilon=args.epsilon,
        lambda_=args.lambda_,
        omega=args.omega,
        steps=args.steps,
        learning_rate=args.lr,
        balanced=not args.unbalanced,
        nonlinear_policy=args.nonlinear_policy,
        include=tuple(args.include) if args.include else ("*",),
        exclude=tuple(args.exclude) if args.exclude is not None else DEFAULT_EXCLUDE,
    )


def _load_inputs(args) -> tuple[Checkpoint, list[Checkpoint], bool]:
    if args.manifest:
        manifest = load_manifest(args.manifest)
        pretrained = load_checkpoint(manifest.pretrained_path)
        experts = [load_checkpoint(p) for p in manifest.expert_paths]
        if manifest.name_remap:
            experts = [apply_name_remap(e, manifest.name_remap) for e in experts]
        return pretrained, experts, manifest.lora_mode
    if not args.pretrained or not args.expert:
        raise WudiError("provide --manifest or both --pretrained and --expert")
    pretrained = load_checkpoint(args.pretrained)
    experts = [load_checkpoint(p) for p in args.expert]
    return pretrained, experts, args.lora


def cmd_merge(args) -> int:
    try:
        cfg = _config_from_args(args)
    except ValueError as e:
        raise WudiError(str(e)) from e
    pretrained, experts, lora = _load_inputs(args)
    if not lora:
        compat = validate_compatible(pretrained, experts)
        if not compat.compatible:
            print(json.dumps(compat.to_dict(), indent=2, sort_keys=True), file=sys.stderr)
            raise WudiError("expert checkpoints are not compatible with the pretrained model")
    _progress(
        f"merging {len(experts)} expert(s) with {cfg.method} "
        f"(threads={args.threads}, lora={lora})"
    )
    merged, report = merge(pretrained, experts, cfg, threads=args.threads, lora=lora)
    save_checkpoint(merged, args.out)
    _progress(f"merged checkpoint written to {args.out}")
    if args.report:
        _emit(report.to_dict(), args.report, args.report_format)
    if args.plot_dir:
        written = plots.render_loss_traces(report.to_dict(), Path(args.plot_dir))
        written += plots.render_layer_summary(report.to_dict(), Path(args.plot_dir))
        for p in written:
            _progress(f"wrote {p}")
    return 0


def cmd_extract(args) -> int:
    pretrained, experts, lora = _load_inputs(args)
    expert = experts[0]
    cfg = MergeConfig(
        include=tuple(args.include) if args.include else ("*",),
        exclude=tuple(args.exclude) if args.exclude is not None else DEFAULT_EXCLUDE,
    )
    classification = classify_layers(pretrained, cfg)
    if lora:
        tv = extract_lora_task_vector(pretrained, expert, classification)
    else:
        tv = extract_task_vector(pretrained, expert, classification)
    tensors = {
        name: TensorEntry("F64", mat.shape, np.asarray(mat))
        for name, mat in list(tv.layers.items()) + list(tv.passthrough.items())
    }
    save_checkpoint(Checkpoint(tensors), args.out)
    _progress(
        f"task vector with {len(tv.layers)} layer(s) and "
        f"{len(tv.passthrough)} passthrough tensor(s) written to {args.out}"
    )
    return 0


def _read_sample_pairs(path: str) -> tuple[list, list]:
    pre, exp = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            pre.append(np.asarray(row["pretrain"], dtype=np.float64))
            exp.append(np.asarray(row["expert"], dtype=np.float64))
    return pre, exp


def cmd_diagnose(args) -> int:
    if args.samples:
        pre, exp = _read_sample_pairs(args.samples)
        report = input_consistency(pre, exp).to_dict()
        _emit(report, args.out, args.report_format)
        return 0
    if args.fixture != "four-task":
        raise WudiError(f"unknown fixture {args.fixture!r}; available: four-task")
    seeds = range(args.seeds)
    _progress(f"running four-task fixture over {args.seeds} seed(s)")
    report = interference_comparison(seeds, steps=args.steps, lr=args.lr, lambda_=args.lambda_)
    _emit(report, args.out, args.report_format)
    if args.plot_dir:
        written = plots.render_interference(report, Path(args.plot_dir))
        written += plots.render_consistency(report, Path(args.plot_dir))
        for p in written:
            _progress(f"wrote {p}")
    return 0


def cmd_ablate(args) -> int:
    seeds = range(args.seeds)
    _progress(f"running loss-variant ablations over {args.seeds} seed(s)")
    report = ablation_comparison(
        seeds, variants=tuple(args.variants), fraction=args.fraction,
        variant_seed=args.variant_seed, steps=args.steps, lr=args.lr,
    )
    _emit(report, args.out, args.report_format)
    if args.plot_dir:
        for p in plots.render_ablation(report, Path(args.plot_dir)):
            _progress(f"wrote {p}")
    return 0


def cmd_verify(args) -> int:
    results = run_all(fast=args.fast)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    if args.out:
        payload = {
            "schema": 1,
            "kind": "verify_report",
            "checks": [r.to_dict() for r in results],
            "passed": all(r.passed for r in results),
        }
        Path(args.out).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0 if all(r.passed for r in results) else 1


def _add_io_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="JSON manifest with pretrained/experts/lora")
    p.add_argument("--pretrained", help="pretrained checkpoint path")
    p.add_argument("--expert", action="append", help="expert checkpoint path (repeatable)")
    p.add_argument("--lora", action="store_true", help="experts are low-rank adapter pairs")
    p.add_argument("--include", action="append", help="layer include pattern (repeatable)")
    p.add_argument("--exclude", action="append", default=None,
                   help="layer exclude pattern (repeatable)")


def _add_report_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--report-format", choices=("json", "text"), default="json")
    p.add_argument("--plot-dir", help="directory for figures and CSV series")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wudi",
        description="Data-free multi-task checkpoint merging guided by task vectors.",
    )
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help="layer-solve parallelism (default: WUDI_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge expert checkpoints into one")
    _add_io_args(p)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--method", choices=MergeConfig.METHODS, default="wudi-gd")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--omega", type=float, default=0.0)
    p.add_argument("--lambda", dest="lambda_", metavar="LAMBDA", type=float, default=1.0)
    p.add_argument("--unbalanced", action="store_true", help="drop per-task loss weighting")
    p.add_argument("--nonlinear-policy", choices=MergeConfig.POLICIES, default="pretrained")
    p.add_argument("--report", help="write the merge report JSON here")
    _add_report_args(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("extract", help="dump a task vector as a checkpoint of deltas")
    _add_io_args(p)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--report-format", choices=("json", "text"), default="json")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("diagnose", help="interference and input-drift reports")
    p.add_argument("--fixture", default="four-task")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--samples", help="JSONL of {'pretrain': [...], 'expert': [...]} pairs")
    p.add_argument("--steps", type=int, default=FOUR_TASK_GD_STEPS)
    p.add_argument("--lr", type=float, default=FOUR_TASK_GD_LR)
    p.add_argument("--lambda", dest="lambda_", metavar="LAMBDA", type=float, default=1.0)
    p.add_argument("--out", help="report path (default: stdout)")
    _add_report_args(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="loss-variant merges, side by side")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", nargs="+",
                   default=["full", "random-gaussian", "row-subset", "unbalanced"],
                   choices=["full", "random-gaussian", "row-subset", "unbalanced"])
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--variant-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=FOUR_TASK_GD_STEPS)
    p.add_argument("--lr", type=float, default=FOUR_TASK_GD_LR)
    p.add_argument("--out", help="report path (default: stdout)")
    _add_report_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the verification suite")
    p.add_argument("--fast", action="store_true", help="trim instance counts")
    p.add_argument("--out", help="also write a JSON summary here")
    p.set_defaults(func=cmd_verify)

    return parser


def _module_of(e: Exception) -> str:
    if isinstance(e, (CheckpointParseError, CheckpointIntegrityError,
                      NonFiniteTensorError, ManifestError)):
        return "checkpoint-io"
    if isinstance(e, (SingularMatrixError, DivergenceError, MergeLayerError)):
        return "solver"
    return "cli"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MergeLayerError as e:
        cause = str(e.cause)
        if isinstance(e.cause, SingularMatrixError):
            cause = f"{cause}; {OMEGA_HINT}"
        return _fail("solver", cause, layer=e.layer)
    except SingularMatrixError as e:
        return _fail("solver", f"{e}; {OMEGA_HINT}")
    except WudiError as e:
        return _fail(_module_of(e), str(e))
    except OSError as e:
        return _fail("io", str(e))


if __name__ == "__main__":
    raise SystemExit(main())
