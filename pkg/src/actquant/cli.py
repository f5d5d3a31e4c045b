"""Command-line interface.

Subcommands: calibrate, apply, compare, bops, gen-synthetic.
Exit codes: 0 success, 2 validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analysis import bops, bops_rescale
from .errors import ValidationError
from .pipeline import PipelineConfig, QuantPlan, run_apply, run_calibrate, run_compare
from .synthetic import generate_calibration_set


def _load_config(path: str | None) -> PipelineConfig:
    return PipelineConfig.from_json(path) if path else PipelineConfig()


def _cmd_calibrate(args) -> int:
    config = _load_config(args.config)
    plan, plan_path = run_calibrate(config, manifest_path=args.manifest, out_dir=args.out)
    print(f"calibrated {len(plan.layers)} layers -> {plan_path}")
    print(f"parameter overhead: {plan.overhead_bytes()} bytes")
    return 0


def _cmd_apply(args) -> int:
    config = _load_config(args.config)
    plan = QuantPlan.load(args.plan)
    report = run_apply(plan, args.manifest, out_dir=args.out, config=config)
    print(f"applied plan to {len(report['layers'])} layers -> {Path(args.out) / 'report.json'}")
    return 0


def _cmd_compare(args) -> int:
    config = _load_config(args.config)
    paths = [p for p in args.plans.split(",") if p]
    plans = {Path(p).stem if Path(p).stem != "plan" else Path(p).parent.name: QuantPlan.load(p)
             for p in paths}
    if len(plans) != len(paths):
        raise ValidationError("plan files must have distinct names for comparison")
    comparison = run_compare(plans, args.manifest, out_dir=args.out, config=config)
    from .pipeline import format_comparison_table

    print(format_comparison_table(comparison), end="")
    return 0


def _cmd_bops(args) -> int:
    if args.full_bops is not None:
        value = bops_rescale(args.full_bops, args.bw, args.ba)
    elif args.flops is not None:
        value = bops(args.flops, args.bw, args.ba)
    else:
        raise ValidationError("provide either --flops or --full-bops")
    print(json.dumps({"bops": value}))
    return 0


def _cmd_gen_synthetic(args) -> int:
    manifest = generate_calibration_set(
        args.out,
        num_activation_layers=args.layers,
        num_attention_layers=args.attention,
        num_timesteps=args.timesteps,
        samples_per_timestep=args.samples,
        seed=args.seed,
    )
    print(f"wrote synthetic calibration set -> {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actquant", description="activation quantization calibration toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit a quantization plan from a calibration set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("apply", help="fake-quantize dumps per a plan and report errors")
    p.add_argument("--plan", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_apply)

    p = sub.add_parser("compare", help="apply several plans and tabulate side by side")
    p.add_argument("--plans", required=True, help="comma-separated plan files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("bops", help="bit-operations arithmetic")
    p.add_argument("--flops", type=float, default=None)
    p.add_argument("--full-bops", type=float, default=None, dest="full_bops",
                   help="BOPs measured at 32/32, rescaled to --bw/--ba")
    p.add_argument("--bw", type=int, required=True)
    p.add_argument("--ba", type=int, required=True)
    p.set_defaults(func=_cmd_bops)

    p = sub.add_parser("gen-synthetic", help="write a synthetic calibration set")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=3, help="number of activation layers")
    p.add_argument("--attention", type=int, default=1, help="number of attention layers")
    p.add_argument("--timesteps", type=int, default=4)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
