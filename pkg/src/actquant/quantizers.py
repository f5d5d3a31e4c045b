"""Scalar fake-quantizers: uniform (linear) and logarithmic, with calibration.

Linear quantization maps x to integer codes via round(x/s) and an offset;
log quantization maps positive x to codes round(-log2(x/s)), so dequantization
is a scale times a power of two (bit-shift friendly). Rounding is
round-half-to-even throughout. Transcendentals run in float64 and results are
narrowed to float32 at the end, keeping behavior platform independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensorio import Tensor

LINEAR = "linear"
LOG = "log"
INTEGER_ZERO_POINT = "integer_zero_point"
REAL_OFFSET = "real_offset"

#: Scale substituted when a calibration range collapses to a point; a single
#: code then reproduces constant inputs exactly under the real-offset form.
DEGENERATE_SCALE = 1e-8

#: Clip-fraction grid searched by MSE calibration.
MSE_GRID = tuple(i / 100 for i in range(50, 101))


@dataclass(frozen=True)
class QuantParams:
    """Parameters of one quantizer instance.

    For ``kind="log"`` the offset is unused and fixed at 0. The offset form
    selects between an integer zero-point (code-domain) and a real offset
    (value-domain, z = min x).
    """

    kind: str
    bits: int
    scale: float
    offset: float = 0.0
    offset_form: str = REAL_OFFSET

    def __post_init__(self) -> None:
        if self.kind not in (LINEAR, LOG):
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.offset_form not in (INTEGER_ZERO_POINT, REAL_OFFSET):
            raise ValueError(f"unknown offset form {self.offset_form!r}")
        if self.kind == LOG and self.offset != 0.0:
            raise ValueError("log quantizer has no offset")
        if self.kind == LINEAR and self.offset_form == INTEGER_ZERO_POINT:
            z = self.offset
            if z != int(z) or not 0 <= z <= 2**self.bits - 1:
                raise ValueError(
                    f"integer zero-point must be an integer in [0, {2**self.bits - 1}], got {z}"
                )

    @property
    def num_codes(self) -> int:
        return 2**self.bits

    @property
    def max_code(self) -> int:
        return 2**self.bits - 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "bits": self.bits,
            "scale": float(self.scale),
            "offset": float(self.offset),
            "offset_form": self.offset_form,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(
            kind=d["kind"],
            bits=int(d["bits"]),
            scale=float(d["scale"]),
            offset=float(d.get("offset", 0.0)),
            offset_form=d.get("offset_form", REAL_OFFSET),
        )


def _unwrap(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _rewrap(template, arr: np.ndarray):
    if isinstance(template, Tensor):
        return Tensor(arr, template.axis_roles)
    return arr


def linear_quantize(x, p: QuantParams):
    """Map values to integer codes (stored as float32) per the linear rule."""
    if p.kind != LINEAR:
        raise ValueError("linear_quantize requires linear params")
    xs = _unwrap(x).astype(np.float64)
    if p.offset_form == INTEGER_ZERO_POINT:
        q = np.rint(xs / p.scale) + p.offset
    else:
        q = np.rint((xs - p.offset) / p.scale)
    q = np.clip(q, 0, p.max_code).astype(np.float32)
    return _rewrap(x, q)


def linear_dequantize(codes, p: QuantParams):
    if p.kind != LINEAR:
        raise ValueError("linear_dequantize requires linear params")
    q = _unwrap(codes).astype(np.float64)
    if q.size and (q.min() < 0 or q.max() > p.max_code):
        raise ValueError(f"codes outside [0, {p.max_code}]")
    if p.offset_form == INTEGER_ZERO_POINT:
        out = p.scale * (q - p.offset)
    else:
        out = p.scale * q + p.offset
    return _rewrap(codes, out.astype(np.float32))


def log_quantize(x, p: QuantParams, zero_policy: str = "max_code"):
    """Map positive values to codes round(-log2(x/s)).

    Exact zeros map to the largest code (the smallest representable value)
    under the default policy, or raise when ``zero_policy="error"``.
    Negative values always raise.
    """
    if p.kind != LOG:
        raise ValueError("log_quantize requires log params")
    xs = _unwrap(x).astype(np.float64)
    if xs.size and xs.min() < 0:
        raise ValueError("log quantizer input must be nonnegative")
    zeros = xs == 0.0
    if zeros.any() and zero_policy != "max_code":
        raise ValueError("zero input with zero_policy='error'")
    with np.errstate(divide="ignore"):
        q = np.rint(-np.log2(xs / p.scale))
    q = np.clip(q, 0, p.max_code)
    q[zeros] = p.max_code
    return _rewrap(x, q.astype(np.float32))


def log_dequantize(codes, p: QuantParams):
    if p.kind != LOG:
        raise ValueError("log_dequantize requires log params")
    q = _unwrap(codes).astype(np.float64)
    if q.size and (q.min() < 0 or q.max() > p.max_code):
        raise ValueError(f"codes outside [0, {p.max_code}]")
    out = (p.scale * np.exp2(-q)).astype(np.float32)
    return _rewrap(codes, out)


def fake_quantize(x, p: QuantParams):
    """Quantize-then-dequantize: the float32 tensor a low-bit kernel would see."""
    if p.kind == LINEAR:
        return linear_dequantize(linear_quantize(x, p), p)
    return log_dequantize(log_quantize(x, p), p)


def _denom(bits: int, denominator: str) -> int:
    if denominator == "2^b":
        return 2**bits
    if denominator == "2^b-1":
        return 2**bits - 1
    raise ValueError(f"unknown denominator {denominator!r} (use '2^b' or '2^b-1')")


def params_from_range(
    lo: float,
    hi: float,
    bits: int,
    kind: str = LINEAR,
    denominator: str = "2^b",
    offset_form: str = REAL_OFFSET,
) -> QuantParams:
    """Build params from a value range, applying the degenerate-range rule."""
    if kind == LOG:
        if hi <= 0:
            raise ValueError("log calibration requires a positive maximum")
        return QuantParams(kind=LOG, bits=bits, scale=float(hi))
    rng = hi - lo
    scale = rng / _denom(bits, denominator) if rng > 0 else DEGENERATE_SCALE
    if offset_form == REAL_OFFSET:
        offset = float(lo)
    else:
        offset = float(np.clip(np.rint(-lo / scale), 0, 2**bits - 1))
    return QuantParams(
        kind=LINEAR, bits=bits, scale=float(scale), offset=offset, offset_form=offset_form
    )


def calibrate_minmax(
    x,
    bits: int,
    kind: str = LINEAR,
    denominator: str = "2^b",
    offset_form: str = REAL_OFFSET,
) -> QuantParams:
    """Min/max calibration: linear s = (max - min)/denom with z = min; log s = max."""
    xs = _unwrap(x)
    if xs.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    lo, hi = float(xs.min()), float(xs.max())
    return params_from_range(lo, hi, bits, kind, denominator, offset_form)


def calibrate_mse(
    x,
    bits: int,
    kind: str = LINEAR,
    denominator: str = "2^b",
    offset_form: str = REAL_OFFSET,
) -> QuantParams:
    """Grid-search MSE calibration over clip fractions of the min/max range.

    Linear ranges shrink symmetrically about the range midpoint; log scales
    shrink toward zero. Ties in MSE resolve to the larger clip fraction, so a
    constant tensor returns the minmax (degenerate) parameters at fraction 1.
    """
    xs = _unwrap(x)
    if xs.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    xd = xs.astype(np.float64)
    lo, hi = float(xs.min()), float(xs.max())
    best: QuantParams | None = None
    best_mse = np.inf
    for alpha in MSE_GRID:
        if kind == LOG:
            p = params_from_range(0.0, alpha * hi, bits, LOG)
        else:
            mid, half = (lo + hi) / 2, (hi - lo) / 2
            p = params_from_range(
                mid - alpha * half, mid + alpha * half, bits, LINEAR, denominator, offset_form
            )
        err = _unwrap(fake_quantize(xs, p)).astype(np.float64) - xd
        mse = float(np.mean(err * err))
        if mse <= best_mse:
            best, best_mse = p, mse
    assert best is not None
    return best


class RunningMinMax:
    """Exponential-moving-average tracker of per-batch min and max.

    The first batch initializes the state; each later batch ``b`` updates
    ``running = m * running + (1 - m) * batch_stat(b)``.
    """

    def __init__(self, momentum: float):
        if not 0 < momentum < 1:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.momentum = momentum
        self.min: float | None = None
        self.max: float | None = None

    def update(self, batch) -> None:
        b = _unwrap(batch)
        if b.size == 0:
            raise ValueError("empty batch")
        lo, hi = float(b.min()), float(b.max())
        if self.min is None:
            self.min, self.max = lo, hi
        else:
            m = self.momentum
            self.min = m * self.min + (1 - m) * lo
            self.max = m * self.max + (1 - m) * hi


def calibrate_running_minmax(
    batches: Iterable,
    bits: int,
    kind: str = LINEAR,
    momentum: float = 0.95,
    denominator: str = "2^b",
    offset_form: str = REAL_OFFSET,
) -> QuantParams:
    """Calibrate from an EMA of per-batch min/max over a stream of tensors."""
    tracker = RunningMinMax(momentum)
    for batch in batches:
        tracker.update(batch)
    if tracker.min is None:
        raise ValueError("running-minmax calibration needs at least one batch")
    return params_from_range(tracker.min, tracker.max, bits, kind, denominator, offset_form)
