"""Quantization error metrics, outlier tooling, and bit-operation accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .groupquant import GroupQuantScheme, _role_axes
from .tensorio import Tensor


@dataclass(frozen=True)
class ErrorReport:
    """MSE, max abs error, SQNR and PSNR (peak = max |reference|) in dB.

    SQNR/PSNR are +inf for an exact match; JSON output maps non-finite
    values to null.
    """

    mse: float
    max_abs_err: float
    sqnr_db: float
    psnr_db: float
    num_values: int
    per_group: list[dict] | None = None

    def to_dict(self) -> dict:
        def _f(v: float):
            return float(v) if math.isfinite(v) else None

        d = {
            "mse": float(self.mse),
            "max_abs_err": float(self.max_abs_err),
            "sqnr_db": _f(self.sqnr_db),
            "psnr_db": _f(self.psnr_db),
            "num_values": self.num_values,
        }
        if self.per_group is not None:
            d["per_group"] = self.per_group
        return d


@dataclass(frozen=True)
class BopsModel:
    """Bit operations: FLOPs times weight bits times activation bits."""

    flops: float
    b_w: int
    b_a: int

    @property
    def bops(self) -> float:
        return self.flops * self.b_w * self.b_a


def _metrics(ref: np.ndarray, cand: np.ndarray) -> tuple[float, float, float, float]:
    err = ref - cand
    sse = float((err * err).sum())
    mse = sse / ref.size
    max_abs = float(np.abs(err).max()) if ref.size else 0.0
    signal = float((ref * ref).sum())
    sqnr = 10 * math.log10(signal / sse) if sse > 0 else math.inf
    peak = float(np.abs(ref).max())
    psnr = 20 * math.log10(peak / math.sqrt(mse)) if mse > 0 and peak > 0 else math.inf
    return mse, max_abs, sqnr, psnr


def error_metrics(
    reference: Tensor | np.ndarray,
    candidate: Tensor | np.ndarray,
    scheme: GroupQuantScheme | None = None,
) -> ErrorReport:
    """Compare a candidate tensor against its full-precision reference.

    When a group scheme is given, a per-group breakdown over the scheme's
    dimension is included (requires the reference to carry matching axes).
    """
    ref_t = reference if isinstance(reference, Tensor) else Tensor(np.asarray(reference))
    ref = ref_t.data.astype(np.float64)
    cand = (candidate.data if isinstance(candidate, Tensor) else np.asarray(candidate)).astype(
        np.float64
    )
    if ref.shape != cand.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {cand.shape}")
    mse, max_abs, sqnr, psnr = _metrics(ref, cand)

    per_group = None
    if scheme is not None:
        axes = _role_axes(ref_t, scheme.dim)
        others = tuple(i for i in range(ref_t.rank) if i not in axes)
        n = int(np.prod([ref_t.shape[a] for a in axes]))
        ref_v = np.transpose(ref, axes + others).reshape(n, -1)
        cand_v = np.transpose(cand, axes + others).reshape(n, -1)
        per_group = []
        for k in range(scheme.num_groups):
            members = np.flatnonzero(scheme.assignment == k)
            g_mse, g_max, g_sqnr, _ = _metrics(ref_v[members], cand_v[members])
            per_group.append(
                {
                    "group": k,
                    "size": int(len(members)),
                    "mse": g_mse,
                    "max_abs_err": g_max,
                    "sqnr_db": g_sqnr if math.isfinite(g_sqnr) else None,
                }
            )
    return ErrorReport(
        mse=mse,
        max_abs_err=max_abs,
        sqnr_db=sqnr,
        psnr_db=psnr,
        num_values=ref.size,
        per_group=per_group,
    )


def find_outliers(t: Tensor | np.ndarray, z_threshold: float = 6.0) -> list[tuple[int, float]]:
    """Entries with |x - mean| > z * std, as (flat index, value), largest |x| first.

    A constant tensor has no spread and yields an empty list.
    """
    x = (t.data if isinstance(t, Tensor) else np.asarray(t)).astype(np.float64).ravel()
    std = float(x.std())
    if std == 0.0:
        return []
    mean = float(x.mean())
    idx = np.flatnonzero(np.abs(x - mean) > z_threshold * std)
    order = np.argsort(-np.abs(x[idx]), kind="stable")
    return [(int(i), float(x[i])) for i in idx[order]]


def drop_activations(t: Tensor, indices) -> Tensor:
    """Copy of the tensor with the given flat indices set to zero."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.size):
        raise ValueError(f"index outside [0, {t.data.size})")
    flat = t.data.copy().ravel()
    flat[idx] = 0.0
    return Tensor(flat.reshape(t.shape), t.axis_roles)


def bops(flops: float, b_w: int, b_a: int) -> float:
    """Bit operations for a workload: FLOPs * b_w * b_a."""
    if flops <= 0 or b_w <= 0 or b_a <= 0:
        raise ValueError("flops and bit-widths must be positive")
    return float(flops) * b_w * b_a


def bops_rescale(full_precision_bops: float, b_w: int, b_a: int) -> float:
    """Rescale a BOPs figure measured at 32/32 bits to the given bit-widths."""
    if full_precision_bops <= 0 or b_w <= 0 or b_a <= 0:
        raise ValueError("inputs must be positive")
    return float(full_precision_bops) * (b_w * b_a) / 1024.0
