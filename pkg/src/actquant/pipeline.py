"""Calibration/apply/compare orchestration over calibration sets.

A run calibrates one quantization plan per manifest layer: activations get a
group-quantization scheme, attention-score layers get log-quantizer settings
(dynamic scale, or a static scale tracked with running min/max). Plans and
reports are plain JSON; two runs over identical inputs produce byte-identical
plan files.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionScores, dequantize_attention, quantize_attention
from .errors import PlanError, ValidationError
from .groupquant import (
    GroupQuantConfig,
    GroupQuantScheme,
    apply_group_quant,
    fit_group_scheme,
    scheme_overhead_bytes,
)
from .quantizers import RunningMinMax
from .tensorio import CalibrationSet, load_calibration_set

#: Bytes accounted per stored quantization parameter in overhead summaries.
PARAM_BYTES = 8


@dataclass(frozen=True)
class ActivationPolicy:
    bits: int = 8
    groups: int = 8
    denominator: str = "2^b"
    offset_form: str = "real_offset"
    strategy: str = "minmax"


@dataclass(frozen=True)
class AttentionPolicy:
    bits: int = 8
    dynamic: bool = True
    momentum: float = 0.95
    start_token: bool = True


@dataclass(frozen=True)
class MetricsToggles:
    sqnr: bool = True
    psnr: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    """Defaults: 8-bit activations in 8 groups, denominator 2^b, dynamic
    attention scale."""

    manifest: str | None = None
    output_dir: str | None = None
    activation: ActivationPolicy = field(default_factory=ActivationPolicy)
    attention: AttentionPolicy = field(default_factory=AttentionPolicy)
    metrics: MetricsToggles = field(default_factory=MetricsToggles)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.activation.bits <= 16:
            raise ValidationError(f"activation bits {self.activation.bits} outside [2, 16]")
        if not 2 <= self.attention.bits <= 16:
            raise ValidationError(f"attention bits {self.attention.bits} outside [2, 16]")
        if self.activation.groups < 1:
            raise ValidationError("groups must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            manifest=d.get("manifest"),
            output_dir=d.get("output_dir"),
            activation=ActivationPolicy(**d.get("activation", {})),
            attention=AttentionPolicy(**d.get("attention", {})),
            metrics=MetricsToggles(**d.get("metrics", {})),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


@dataclass(frozen=True)
class AttentionPlanEntry:
    bits: int
    dynamic: bool
    start_token: bool
    static_scale: float | None = None

    def to_dict(self) -> dict:
        return {
            "type": "attention",
            "bits": self.bits,
            "dynamic": self.dynamic,
            "start_token": self.start_token,
            "static_scale": self.static_scale,
        }


@dataclass
class QuantPlan:
    """One calibrated quantizer per manifest layer, plus input provenance."""

    layers: dict[str, GroupQuantScheme | AttentionPlanEntry]
    provenance: dict

    def to_dict(self) -> dict:
        out = {"provenance": self.provenance, "layers": {}}
        for lid in sorted(self.layers):
            entry = self.layers[lid]
            if isinstance(entry, GroupQuantScheme):
                out["layers"][lid] = {"type": "group", **entry.to_dict()}
            else:
                out["layers"][lid] = entry.to_dict()
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        layers: dict[str, GroupQuantScheme | AttentionPlanEntry] = {}
        for lid, rec in d["layers"].items():
            if rec["type"] == "group":
                layers[lid] = GroupQuantScheme.from_dict(rec)
            elif rec["type"] == "attention":
                layers[lid] = AttentionPlanEntry(
                    bits=int(rec["bits"]),
                    dynamic=bool(rec["dynamic"]),
                    start_token=bool(rec["start_token"]),
                    static_scale=rec.get("static_scale"),
                )
            else:
                raise PlanError(f"unknown plan entry type {rec['type']!r}")
        return cls(layers=layers, provenance=d.get("provenance", {}))

    @classmethod
    def load(cls, path: str | Path) -> "QuantPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from exc

    def overhead_bytes(self, bytes_per_param: int = PARAM_BYTES) -> int:
        return sum(
            scheme_overhead_bytes(entry, bytes_per_param)
            for entry in self.layers.values()
            if isinstance(entry, GroupQuantScheme)
        )


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _calibrate_attention_layer(
    cal: CalibrationSet, layer_id: str, policy: AttentionPolicy
) -> AttentionPlanEntry:
    if policy.dynamic:
        return AttentionPlanEntry(
            bits=policy.bits, dynamic=True, start_token=policy.start_token
        )
    tracker = RunningMinMax(policy.momentum)
    for _t, _s, tensor in cal.iter_layer(layer_id):
        scores = tensor.data
        rest = scores[..., 1:] if policy.start_token and scores.shape[-1] > 1 else scores
        tracker.update(rest)
    if tracker.max is None or tracker.max <= 0:
        raise ValidationError(f"layer '{layer_id}': running max is not positive")
    return AttentionPlanEntry(
        bits=policy.bits,
        dynamic=False,
        start_token=policy.start_token,
        static_scale=float(tracker.max),
    )


def run_calibrate(
    config: PipelineConfig,
    manifest_path: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> tuple[QuantPlan, Path | None]:
    """Fit a plan from a calibration set; write plan.json and summary.json when
    an output directory is given."""
    manifest_path = Path(manifest_path or config.manifest)
    cal = load_calibration_set(manifest_path)

    gq_config = GroupQuantConfig(
        denominator=config.activation.denominator,
        offset_form=config.activation.offset_form,
        strategy=config.activation.strategy,
        seed=config.seed,
    )

    def _fit(lid: str):
        if cal.layers[lid].is_attention:
            return lid, _calibrate_attention_layer(cal, lid, config.attention)
        return lid, fit_group_scheme(
            cal, lid, config.activation.groups, config.activation.bits, gq_config
        )

    # layers are independent; fit in parallel, assemble in sorted order
    ids = cal.layer_ids()
    with ThreadPoolExecutor(max_workers=min(4, len(ids))) as pool:
        layers: dict[str, GroupQuantScheme | AttentionPlanEntry] = dict(
            pool.map(_fit, ids)
        )

    plan = QuantPlan(
        layers=layers,
        provenance={
            "toolkit_version": __version__,
            "config_sha256": config.sha256(),
            "manifest_sha256": _sha256_file(manifest_path),
        },
    )

    plan_path = None
    if out_dir is not None or config.output_dir is not None:
        out = Path(out_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        plan_path = out / "plan.json"
        plan.save(plan_path)
        summary = {
            "num_layers": len(layers),
            "group_layers": sorted(
                lid for lid, e in layers.items() if isinstance(e, GroupQuantScheme)
            ),
            "attention_layers": sorted(
                lid for lid, e in layers.items() if isinstance(e, AttentionPlanEntry)
            ),
            "overhead_bytes": plan.overhead_bytes(),
            "bytes_per_param": PARAM_BYTES,
        }
        (out / "summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n"
        )
    return plan, plan_path


class _Accumulator:
    """Streaming per-(layer, timestep) error aggregation."""

    def __init__(self) -> None:
        self.sse = 0.0
        self.signal = 0.0
        self.max_abs = 0.0
        self.count = 0
        self.peak = 0.0
        self.start_col_max_abs: float | None = None

    def add(self, ref: np.ndarray, cand: np.ndarray) -> None:
        ref = ref.astype(np.float64)
        err = ref - cand.astype(np.float64)
        self.sse += float((err * err).sum())
        self.signal += float((ref * ref).sum())
        self.max_abs = max(self.max_abs, float(np.abs(err).max()))
        self.peak = max(self.peak, float(np.abs(ref).max()))
        self.count += ref.size

    def metrics(self, toggles: MetricsToggles) -> dict:
        mse = self.sse / self.count if self.count else 0.0
        out: dict = {
            "mse": mse,
            "max_abs_err": self.max_abs,
            "num_values": self.count,
        }
        if toggles.sqnr:
            sqnr = 10 * math.log10(self.signal / self.sse) if self.sse > 0 else None
            out["sqnr_db"] = sqnr
        if toggles.psnr:
            psnr = (
                20 * math.log10(self.peak / math.sqrt(mse))
                if mse > 0 and self.peak > 0
                else None
            )
            out["psnr_db"] = psnr
        if self.start_col_max_abs is not None:
            out["start_column_max_abs_err"] = self.start_col_max_abs
        return out


def _apply_layer_entry(entry, tensor, timestep):
    """Fake-quantize one dump per its plan entry; returns the reconstruction.

    Attention dumps of rank > 2 are treated as stacked score matrices (batch
    and heads on the leading axis) and each matrix gets its own dynamic scale.
    """
    if isinstance(entry, GroupQuantScheme):
        return apply_group_quant(tensor, entry, timestep).data, None
    n_q, n_k = tensor.shape[-2], tensor.shape[-1]
    stack = tensor.data.reshape(-1, n_q, n_k)
    recon = np.empty_like(stack)
    start_err = 0.0 if entry.start_token else None
    for i in range(stack.shape[0]):
        scores = AttentionScores(stack[i], has_start_token=entry.start_token)
        qa = quantize_attention(
            scores, entry.bits, dynamic=entry.dynamic, static_scale=entry.static_scale
        )
        recon[i] = dequantize_attention(qa)
        if entry.start_token:
            start_err = max(
                start_err, float(np.abs(recon[i][:, 0] - stack[i][:, 0]).max())
            )
    return recon.reshape(tensor.shape), start_err


def run_apply(
    plan: QuantPlan,
    eval_manifest: str | Path,
    out_dir: str | Path | None = None,
    config: PipelineConfig | None = None,
) -> dict:
    """Fake-quantize every eval dump per the plan and report error metrics.

    Returns the report dict; writes report.json and an aligned report.txt
    table when an output directory is given.
    """
    config = config or PipelineConfig()
    cal = load_calibration_set(eval_manifest)
    missing = [lid for lid in cal.layer_ids() if lid not in plan.layers]
    if missing:
        raise PlanError(f"plan is missing layers: {', '.join(missing)}")

    def _apply_layer(lid: str):
        entry = plan.layers[lid]
        per_t = []
        layer_rows = []
        overall = _Accumulator()
        for t in range(cal.num_timesteps):
            acc = _Accumulator()
            for s in cal.samples_at(lid, t):
                tensor = cal.tensor(lid, t, s)
                recon, start_err = _apply_layer_entry(entry, tensor, t)
                acc.add(tensor.data, recon)
                overall.add(tensor.data, recon)
                if start_err is not None:
                    acc.start_col_max_abs = max(acc.start_col_max_abs or 0.0, start_err)
                    overall.start_col_max_abs = max(
                        overall.start_col_max_abs or 0.0, start_err
                    )
            m = acc.metrics(config.metrics)
            m["timestep"] = t
            per_t.append(m)
            if isinstance(entry, GroupQuantScheme):
                dim, k = entry.dim, entry.num_groups
            else:
                dim, k = "-", "-"
            layer_rows.append((lid, t, dim, k, m))
        record = {
            "kind": "group" if isinstance(entry, GroupQuantScheme) else "attention",
            "per_timestep": per_t,
            "overall": overall.metrics(config.metrics),
        }
        return lid, record, layer_rows

    ids = cal.layer_ids()
    with ThreadPoolExecutor(max_workers=min(4, len(ids))) as pool:
        results = {lid: (rec, lr) for lid, rec, lr in pool.map(_apply_layer, ids)}

    report: dict = {"layers": {}, "provenance": dict(plan.provenance)}
    rows = []
    for lid in ids:
        record, layer_rows = results[lid]
        report["layers"][lid] = record
        rows.extend(layer_rows)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n"
        )
        (out / "report.txt").write_text(format_report_table(rows))
    return report


def format_report_table(rows) -> str:
    """Aligned plain-text table: layer, timestep, dim, K, mse, max_abs, sqnr_db."""
    header = ("layer", "timestep", "dim", "K", "mse", "max_abs", "sqnr_db")
    body = []
    for lid, t, dim, k, m in rows:
        sqnr = m.get("sqnr_db")
        body.append(
            (
                lid,
                str(t),
                dim,
                str(k),
                f"{m['mse']:.6e}",
                f"{m['max_abs_err']:.6e}",
                "inf" if sqnr is None else f"{sqnr:.2f}",
            )
        )
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
              for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines) + "\n"


def run_compare(
    plans: dict[str, QuantPlan],
    eval_manifest: str | Path,
    out_dir: str | Path | None = None,
    config: PipelineConfig | None = None,
) -> dict:
    """Apply several plans to the same eval set and tabulate metrics side by side."""
    if len(plans) < 2:
        raise ValidationError("compare needs at least two plans")
    layer_sets = {name: set(p.layers) for name, p in plans.items()}
    first = next(iter(layer_sets.values()))
    for name, ls in layer_sets.items():
        if ls != first:
            raise ValidationError(f"plan '{name}' covers different layers than the others")

    config = config or PipelineConfig()
    per_plan = {
        name: run_apply(plan, eval_manifest, out_dir=None, config=config)
        for name, plan in plans.items()
    }
    layers = sorted(next(iter(per_plan.values()))["layers"])
    comparison = {
        "plans": sorted(plans),
        "layers": {
            lid: {name: per_plan[name]["layers"][lid]["overall"] for name in sorted(plans)}
            for lid in layers
        },
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(
            json.dumps(comparison, sort_keys=True, indent=2) + "\n"
        )
        (out / "comparison.txt").write_text(format_comparison_table(comparison))
    return comparison


def format_comparison_table(comparison: dict) -> str:
    names = comparison["plans"]
    header = ["layer"] + [f"{n}:{m}" for n in names for m in ("mse", "max_abs", "sqnr")]
    body = []
    for lid, cols in sorted(comparison["layers"].items()):
        row = [lid]
        for n in names:
            m = cols[n]
            sqnr = m.get("sqnr_db")
            row += [
                f"{m['mse']:.6e}",
                f"{m['max_abs_err']:.6e}",
                "inf" if sqnr is None else f"{sqnr:.2f}",
            ]
        body.append(row)
    widths = [
        max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
        for i in range(len(header))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines) + "\n"
