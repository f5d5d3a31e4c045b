"""Attention-score fixtures and the attention-aware quantizer.

Softmax scores are log-quantized; for cross-attention the first key column
(the sequence-start token, whose scores spike near 1.0) bypasses quantization
and stays in full precision. The scale is chosen dynamically per score matrix
as the maximum of the remaining scores, so codes are invariant to the overall
magnitude of a prompt's attention pattern.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantizers import LOG, QuantParams, log_dequantize, log_quantize
from .tensorio import Tensor, load_tensor, save_tensor

_ROW_SUM_ATOL = 1e-5


@dataclass(frozen=True)
class AttentionScores:
    """Softmax score matrix [n_q, n_k]; column 0 is the start token when flagged."""

    scores: np.ndarray
    has_start_token: bool = False

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.scores, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"scores must be a 2-D matrix, got rank {arr.ndim}")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)

    def validate(self) -> None:
        """Check softmax invariants: entries in [0, 1], rows summing to 1."""
        if self.scores.min() < 0 or self.scores.max() > 1:
            raise ValueError("scores must lie in [0, 1]")
        sums = self.scores.astype(np.float64).sum(axis=1)
        if np.abs(sums - 1.0).max() > _ROW_SUM_ATOL:
            raise ValueError(f"rows must sum to 1 within {_ROW_SUM_ATOL}")

    @property
    def n_queries(self) -> int:
        return self.scores.shape[0]

    @property
    def n_keys(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class QuantizedAttention:
    """Log-quantized scores with the start column kept in full precision."""

    codes: np.ndarray
    scale: float
    bits: int
    start_column: np.ndarray | None = None

    def __post_init__(self) -> None:
        codes = np.ascontiguousarray(self.codes, dtype=np.int32)
        if codes.min() < 0 or codes.max() > 2**self.bits - 1:
            raise ValueError(f"codes outside [0, {2**self.bits - 1}]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        if self.start_column is not None:
            col = np.ascontiguousarray(self.start_column, dtype=np.float32)
            if col.shape != (codes.shape[0],):
                raise ValueError("start column length must equal the query count")
            col.flags.writeable = False
            object.__setattr__(self, "start_column", col)

    @property
    def has_start_token(self) -> bool:
        return self.start_column is not None


def attention_scores(
    q: np.ndarray, k: np.ndarray, has_start_token: bool = False
) -> AttentionScores:
    """Row-wise softmax of Q K^T / sqrt(d), computed stably with max subtraction."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValueError(f"incompatible Q {q.shape} and K {k.shape}")
    d = q.shape[1]
    if d == 0:
        raise ValueError("feature size d must be >= 1")
    logits = q @ k.T / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    scores = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    out = AttentionScores(scores, has_start_token=has_start_token)
    out.validate()
    return out


def quantize_attention(
    a: AttentionScores,
    bits: int,
    dynamic: bool = True,
    static_scale: float | None = None,
) -> QuantizedAttention:
    """Log-quantize scores, copying the start column untouched when present.

    The scale is the maximum of the non-start scores (dynamic) or a
    calibrated static value; exact zeros take the largest code.
    """
    if a.has_start_token:
        if a.n_keys < 2:
            raise ValueError("start-token matrices need at least 2 key columns")
        start = a.scores[:, 0].copy()
        rest = a.scores[:, 1:]
    else:
        start = None
        rest = a.scores
    if dynamic:
        scale = float(rest.max())
        if scale <= 0:
            raise ValueError("all quantizable scores are zero; dynamic scale degenerate")
    else:
        if static_scale is None:
            raise ValueError("static quantization requires static_scale")
        scale = float(static_scale)
    p = QuantParams(kind=LOG, bits=bits, scale=scale)
    codes = log_quantize(rest, p).astype(np.int32)
    return QuantizedAttention(codes=codes, scale=scale, bits=bits, start_column=start)


def dequantize_attention(qa: QuantizedAttention) -> np.ndarray:
    """Reconstruct the full score matrix; the start column comes back bit exact."""
    p = QuantParams(kind=LOG, bits=qa.bits, scale=qa.scale)
    rest = log_dequantize(qa.codes.astype(np.float32), p)
    if qa.start_column is None:
        return rest
    return np.concatenate([qa.start_column[:, None], rest], axis=1)


def attention_value_product(qa: QuantizedAttention, v: np.ndarray) -> np.ndarray:
    """Multiply quantized scores with V on the split path.

    The start column multiplies V's first row in full precision; the remaining
    scores enter as scale * 2^(-code). This is exact algebra, matching the
    dequantize-then-matmul result up to float rounding.
    """
    v = np.asarray(v, dtype=np.float64)
    n_rest = qa.codes.shape[1]
    n_keys = n_rest + (1 if qa.has_start_token else 0)
    if v.ndim != 2 or v.shape[0] != n_keys:
        raise ValueError(f"V has {v.shape} rows; expected {n_keys}")
    rest = qa.scale * np.exp2(-qa.codes.astype(np.float64))
    if qa.start_column is None:
        return rest @ v
    return np.outer(qa.start_column.astype(np.float64), v[0]) + rest @ v[1:]


def save_quantized_attention(qa: QuantizedAttention, out_dir: str | Path, prefix: str) -> Path:
    """Dump a quantized matrix for inspection: code matrix and start column as
    tensor files (codes stored as floats), scalar scale and bits in a small
    JSON manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"scale": float(qa.scale), "bits": qa.bits,
            "codes": f"{prefix}_codes.npy", "start_column": None}
    save_tensor(Tensor(qa.codes.astype(np.float32)), out / meta["codes"])
    if qa.start_column is not None:
        meta["start_column"] = f"{prefix}_start.npy"
        save_tensor(Tensor(qa.start_column), out / meta["start_column"])
    path = out / f"{prefix}_meta.json"
    path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path


def load_quantized_attention(meta_path: str | Path) -> QuantizedAttention:
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    codes = load_tensor(meta_path.parent / meta["codes"]).data.astype(np.int32)
    start = None
    if meta.get("start_column"):
        start = load_tensor(meta_path.parent / meta["start_column"]).data
    return QuantizedAttention(
        codes=codes, scale=float(meta["scale"]), bits=int(meta["bits"]),
        start_column=start,
    )


def start_token_ablation(a: AttentionScores, mode: str) -> AttentionScores:
    """Zero out (drop) or cap (clamp) the start column; rows are not renormalized."""
    if not a.has_start_token:
        raise ValueError("ablation requires a start-token matrix")
    if mode not in ("drop", "clamp"):
        raise ValueError(f"mode must be 'drop' or 'clamp', got {mode!r}")
    scores = a.scores.copy()
    if mode == "drop":
        scores[:, 0] = 0.0
    else:
        scores[:, 0] = scores[:, 1:].max(axis=1)
    return AttentionScores(scores, has_start_token=True)
