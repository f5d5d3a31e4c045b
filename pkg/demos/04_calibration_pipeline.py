#!/usr/bin/env python3
"""End-to-end calibration pipeline on a synthetic activation dump set.

Generates a calibration set with planted outliers, fits three plans
(layer-wise minmax, layer-wise MSE, group-wise), applies them back to the
dumps, and prints the comparison table plus the parameter-overhead summary.

Equivalent CLI session:

    actquant gen-synthetic --out SET --layers 3 --attention 1 --timesteps 4
    actquant calibrate --manifest SET/manifest.json --out PLAN
    actquant apply --plan PLAN/plan.json --manifest SET/manifest.json --out REP
    actquant compare --plans P1/plan.json,P2/plan.json --manifest SET/manifest.json
"""

from pathlib import Path

from actquant import PipelineConfig, run_apply, run_calibrate, run_compare
from actquant.analysis import bops_rescale
from actquant.pipeline import ActivationPolicy, format_comparison_table
from actquant.synthetic import generate_calibration_set


def main(tmp="/tmp/actquant_demo_pipeline"):
    out = Path(tmp)
    manifest = generate_calibration_set(
        out / "set", num_activation_layers=3, num_attention_layers=1,
        num_timesteps=4, samples_per_timestep=2, seed=0,
    )
    print(f"synthetic calibration set -> {manifest}")

    plans = {}
    for name, policy in (
        ("layer_minmax", ActivationPolicy(bits=6, groups=1)),
        ("layer_mse", ActivationPolicy(bits=6, groups=1, strategy="mse")),
        ("group8", ActivationPolicy(bits=6, groups=8)),
    ):
        config = PipelineConfig(activation=policy)
        plan, path = run_calibrate(config, manifest, out / name)
        plans[name] = plan
        print(f"  plan '{name}': {len(plan.layers)} layers, "
              f"overhead {plan.overhead_bytes()} bytes -> {path}")

    print("\n== apply the group plan back to its own dumps ==")
    report = run_apply(plans["group8"], manifest, out / "report")
    for lid, rec in sorted(report["layers"].items()):
        o = rec["overall"]
        sqnr = "inf" if o.get("sqnr_db") is None else f"{o['sqnr_db']:.1f}"
        print(f"  {lid:<14} mse={o['mse']:.3e}  sqnr={sqnr} dB")

    print("\n== side-by-side comparison (6-bit activations) ==")
    comparison = run_compare(plans, manifest, out / "cmp")
    print(format_comparison_table(comparison))

    print("== compute-cost bookkeeping ==")
    full = 823e12
    for bw, ba in ((8, 8), (8, 6), (4, 8), (4, 6)):
        print(f"  W{bw}A{ba}: {bops_rescale(full, bw, ba) / 1e12:7.2f} TBOPs "
              f"(from {full / 1e12:.0f} T at 32/32)")


if __name__ == "__main__":
    main()
