#!/usr/bin/env python3
"""Linear vs logarithmic fake quantization, and what calibration buys you.

Walks through the two quantizer families on a heavy-tailed activation sample:
uniform codes waste resolution on the tail, log codes keep relative error
flat, and MSE calibration trades a clipped tail for a finer step.
"""

import numpy as np

from actquant import (
    QuantParams,
    calibrate_minmax,
    calibrate_mse,
    calibrate_running_minmax,
    fake_quantize,
)


def report(label, x, p):
    dq = fake_quantize(x, p).astype(np.float64)
    err = dq - x
    print(
        f"  {label:<28} scale={p.scale:.6f}  mse={np.mean(err**2):.3e}  "
        f"max|err|={np.abs(err).max():.4f}"
    )


def main():
    rng = np.random.default_rng(0)

    print("== 8-bit linear quantization of N(0,1) with a heavy tail ==")
    x = np.concatenate([rng.standard_normal(5000), rng.standard_normal(50) * 20])
    x = x.astype(np.float32)
    report("minmax calibration", x, calibrate_minmax(x, 8))
    report("MSE calibration", x, calibrate_mse(x, 8))

    print("\n== running minmax over a stream of batches ==")
    batches = [rng.standard_normal(512).astype(np.float32) * s for s in (1, 1, 1, 8)]
    p_run = calibrate_running_minmax(batches, 8, momentum=0.95)
    p_all = calibrate_minmax(np.concatenate(batches), 8)
    print(f"  EMA-tracked scale  {p_run.scale:.6f}   (momentum damps the burst)")
    print(f"  global minmax scale {p_all.scale:.6f}")

    print("\n== 4-bit log quantization of softmax-like magnitudes ==")
    y = (0.9 ** rng.integers(1, 60, 4000) * 0.5).astype(np.float32)
    p_log = QuantParams("log", 4, scale=float(y.max()))
    dq = fake_quantize(y, p_log).astype(np.float64)
    ratio = dq / y
    print(f"  scale = max = {p_log.scale:.4f}")
    print(f"  reconstruction ratio spread: [{ratio.min():.4f}, {ratio.max():.4f}]")
    print("  (each code is a power of two, so relative error is bounded by 2^±0.5)")

    print("\n== linear codes on the same data, for contrast ==")
    report("8-bit linear minmax", y, calibrate_minmax(y, 8))
    small = y < 0.01
    dq_lin = fake_quantize(y, calibrate_minmax(y, 8)).astype(np.float64)
    gone = float((dq_lin[small] == dq_lin[small].min()).mean())
    print(f"  fraction of tiny values collapsed to one level: {gone:.1%}")


if __name__ == "__main__":
    main()
