"""Outlier-preserving group quantization.

Activations are grouped along the dimension (channel or pixel) whose
per-vector value ranges vary the most, so that outlier vectors land in their
own groups and keep a tight quantization scale instead of stretching the
whole layer's. Grouping uses K-means on the 2-D points (min_i, max_i) with a
deterministic quantile initialization; scale and offset are refreshed per
denoising timestep while the group assignment is shared across timesteps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ManifestError, PlanError
from .quantizers import REAL_OFFSET, calibrate_mse, params_from_range
from .tensorio import CalibrationSet, Tensor

CHANNEL = "channel"
PIXEL = "pixel"

_KMEANS_TOL = 1e-6
_KMEANS_MAX_ITER = 100
# below this many vectors, Lloyd restarts from every k-subset of points
_EXHAUSTIVE_SEED_LIMIT = 16


@dataclass(frozen=True)
class GroupQuantConfig:
    """Knobs shared by scheme fitting and application.

    ``denominator`` selects (max-min)/2^b (default) or the conventional
    2^b - 1. ``strategy`` picks per-(timestep, group) range calibration:
    plain min/max or an MSE clip search. ``seed`` is reserved for
    experimentation; the default clustering is fully deterministic.
    """

    denominator: str = "2^b"
    offset_form: str = REAL_OFFSET
    strategy: str = "minmax"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("minmax", "mse"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class DimensionStats:
    """Per-vector extrema along one dimension and the spread score built from them."""

    dim: str
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def score(self) -> float:
        """Spread of per-vector maxima plus spread of per-vector minima."""
        maxs = self.maxs.astype(np.float64)
        mins = self.mins.astype(np.float64)
        return float((maxs.max() - maxs.min()) + (mins.max() - mins.min()))


@dataclass
class GroupQuantScheme:
    """Fitted group-quantization scheme for one layer.

    ``assignment`` maps each index along the selected dimension to a group;
    ``scales``/``offsets`` are [num_timesteps, num_groups] tables applied in
    real-offset form (value = scale * code + offset).
    """

    layer_id: str
    dim: str
    num_groups: int
    bits: int
    assignment: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray
    denominator: str = "2^b"
    offset_form: str = REAL_OFFSET

    def __post_init__(self) -> None:
        self.assignment = np.asarray(self.assignment, dtype=np.int32)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.scales.shape != self.offsets.shape or self.scales.ndim != 2:
            raise ValueError("scales/offsets must both be [timesteps, groups]")
        if self.scales.shape[1] != self.num_groups:
            raise ValueError("parameter table width does not match num_groups")
        if (self.scales <= 0).any():
            raise ValueError("all scales must be positive")
        counts = np.bincount(self.assignment, minlength=self.num_groups)
        if len(counts) != self.num_groups or (counts == 0).any():
            raise ValueError("every group must be non-empty")

    @property
    def num_timesteps(self) -> int:
        return self.scales.shape[0]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "dim": self.dim,
            "K": self.num_groups,
            "bits": self.bits,
            "assignment": [int(g) for g in self.assignment],
            "table": [
                [
                    {"s": float(self.scales[t, k]), "z": float(self.offsets[t, k])}
                    for k in range(self.num_groups)
                ]
                for t in range(self.num_timesteps)
            ],
            "denominator": self.denominator,
            "offset_form": self.offset_form,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupQuantScheme":
        table = d["table"]
        scales = np.array([[cell["s"] for cell in row] for row in table])
        offsets = np.array([[cell["z"] for cell in row] for row in table])
        return cls(
            layer_id=d["layer"],
            dim=d["dim"],
            num_groups=int(d["K"]),
            bits=int(d["bits"]),
            assignment=np.asarray(d["assignment"], dtype=np.int32),
            scales=scales,
            offsets=offsets,
            denominator=d.get("denominator", "2^b"),
            offset_form=d.get("offset_form", REAL_OFFSET),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroupQuantScheme":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _role_axes(t: Tensor, role: str) -> tuple[int, ...]:
    """Axes carrying ``role``; rank-based defaults when the tensor is unlabeled."""
    if t.axis_roles is not None:
        axes = t.role_axes(role)
        if not axes:
            raise ValueError(f"tensor has no '{role}' axis (roles {t.axis_roles})")
        return axes
    defaults = {
        2: {PIXEL: (0,), CHANNEL: (1,)},
        3: {PIXEL: (1,), CHANNEL: (2,)},       # (batch, pixel, channel)
        4: {CHANNEL: (1,), PIXEL: (2, 3)},     # (batch, channel, height, width)
    }
    try:
        return defaults[t.rank][role]
    except KeyError:
        raise ValueError(f"no default '{role}' axis for rank-{t.rank} tensor") from None


def role_minmax(t: Tensor, role: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-vector min/max along the axes labeled ``role``.

    Batch and all other axes are reduced into each vector's slice, so the
    result aligns by vector index across dumps of the same layer.
    """
    axes = _role_axes(t, role)
    others = tuple(i for i in range(t.rank) if i not in axes)
    view = np.transpose(t.data, axes + others).reshape(
        int(np.prod([t.shape[a] for a in axes])), -1
    )
    return view.min(axis=1), view.max(axis=1)


def compute_dimension_score(t: Tensor, dim: str) -> DimensionStats:
    """Spread score of per-vector ranges along ``dim`` ('channel' or 'pixel')."""
    if dim not in (CHANNEL, PIXEL):
        raise ValueError(f"dim must be '{CHANNEL}' or '{PIXEL}', got {dim!r}")
    mins, maxs = role_minmax(t, dim)
    return DimensionStats(dim=dim, mins=mins, maxs=maxs)


def select_dimension(stats_channel: DimensionStats, stats_pixel: DimensionStats) -> str:
    """Pick the dimension with the larger spread score; ties go to channel."""
    return CHANNEL if stats_channel.score >= stats_pixel.score else PIXEL


def _repair_empty_clusters(
    points: np.ndarray, assign: np.ndarray, centroids: np.ndarray, k: int
) -> np.ndarray:
    """Give each empty cluster the farthest point of the largest cluster."""
    counts = np.bincount(assign, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        members = np.flatnonzero(assign == donor)
        dist = ((points[members] - centroids[donor]) ** 2).sum(axis=1)
        mover = members[int(np.argmax(dist))]
        assign[mover] = empty
        counts[donor] -= 1
        counts[empty] += 1
    return assign


def _quantile_seeds(order: np.ndarray, k: int) -> np.ndarray:
    n = len(order)
    if k == 1:
        return order[[(n - 1) // 2]]
    return order[[int(round(j * (n - 1) / (k - 1))) for j in range(k)]]


def _farthest_point_seeds(points: np.ndarray, ranges: np.ndarray, k: int) -> np.ndarray:
    """Maximin seeding anchored at the widest-range vector; ties break by index."""
    seeds = [int(np.lexsort((np.arange(len(ranges)), -ranges))[0])]
    dist = ((points - points[seeds[0]]) ** 2).sum(axis=1)
    while len(seeds) < k:
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return np.asarray(seeds)


def _lloyd(points: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    assign = np.zeros(len(points), dtype=np.int64)
    for _ in range(_KMEANS_MAX_ITER):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dists, axis=1)
        assign = _repair_empty_clusters(points, assign, centroids, k)
        new_centroids = np.stack([points[assign == j].mean(axis=0) for j in range(k)])
        move = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if move <= _KMEANS_TOL:
            break
    return assign


def cluster_ranges(
    mins: np.ndarray, maxs: np.ndarray, k: int, seed: int | None = None
) -> np.ndarray:
    """K-means over the 2-D points (min_i, max_i), deterministically.

    Lloyd iterations (1e-6 centroid-movement tolerance, 100-round cap, empty
    clusters repaired by splitting the largest one) run from a fixed portfolio
    of deterministic initializations - quantile points of the vectors ordered
    by range, by min, and by max, plus a farthest-point seeding; tiny inputs
    restart from every k-subset of points instead. The assignment with the
    lowest within-cluster SSE wins. Output labels are relabeled by ascending
    mean range. ``seed`` is accepted for experimentation but the default path
    ignores it.
    """
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    n = len(mins)
    if len(maxs) != n:
        raise ValueError("mins and maxs must have equal length")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= {n} vectors, got K={k}")

    points = np.stack([mins, maxs], axis=1)
    ranges = maxs - mins
    idx = np.arange(n)
    if n <= _EXHAUSTIVE_SEED_LIMIT:
        seed_sets = [np.asarray(c) for c in combinations(range(n), k)]
    else:
        seed_sets = [
            _quantile_seeds(np.lexsort((idx, maxs, mins, ranges)), k),
            _farthest_point_seeds(points, ranges, k),
            _quantile_seeds(np.lexsort((idx, ranges, maxs, mins)), k),
            _quantile_seeds(np.lexsort((idx, ranges, mins, maxs)), k),
        ]

    best_assign: np.ndarray | None = None
    best_sse = np.inf
    for seeds in seed_sets:
        assign = _lloyd(points, points[seeds].copy(), k)
        sse = 0.0
        for j in range(k):
            member = points[assign == j]
            sse += float(((member - member.mean(axis=0)) ** 2).sum())
        if sse < best_sse - _KMEANS_TOL:
            best_assign, best_sse = assign, sse
    assert best_assign is not None

    mean_range = np.array([ranges[best_assign == j].mean() for j in range(k)])
    relabel = np.empty(k, dtype=np.int64)
    relabel[np.argsort(mean_range, kind="stable")] = np.arange(k)
    return relabel[best_assign].astype(np.int32)


def kmeans_objective(mins: np.ndarray, maxs: np.ndarray, assign: np.ndarray) -> float:
    """Within-cluster sum of squared distances for a (min, max) assignment."""
    points = np.stack(
        [np.asarray(mins, dtype=np.float64), np.asarray(maxs, dtype=np.float64)], axis=1
    )
    total = 0.0
    for j in np.unique(assign):
        member = points[assign == j]
        total += float(((member - member.mean(axis=0)) ** 2).sum())
    return total


def _aggregate_layer_stats(
    cal: CalibrationSet, layer_id: str
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], list[dict[str, np.ndarray]]]:
    """Per-vector extrema for both dims: overall and per timestep."""
    agg_min: dict[str, np.ndarray] = {}
    agg_max: dict[str, np.ndarray] = {}
    per_t: list[dict[str, np.ndarray]] = [
        {} for _ in range(cal.num_timesteps)
    ]
    for t, _sample, tensor in cal.iter_layer(layer_id):
        for dim in (CHANNEL, PIXEL):
            mins, maxs = role_minmax(tensor, dim)
            if dim not in agg_min:
                agg_min[dim] = mins.astype(np.float64)
                agg_max[dim] = maxs.astype(np.float64)
            else:
                np.minimum(agg_min[dim], mins, out=agg_min[dim])
                np.maximum(agg_max[dim], maxs, out=agg_max[dim])
            slot = per_t[t]
            if f"{dim}_min" not in slot:
                slot[f"{dim}_min"] = mins.astype(np.float64)
                slot[f"{dim}_max"] = maxs.astype(np.float64)
            else:
                np.minimum(slot[f"{dim}_min"], mins, out=slot[f"{dim}_min"])
                np.maximum(slot[f"{dim}_max"], maxs, out=slot[f"{dim}_max"])
    return agg_min, agg_max, per_t


def _group_values_at(
    cal: CalibrationSet, layer_id: str, timestep: int, dim: str, members: np.ndarray
) -> np.ndarray:
    """All activation values of the given vectors at one timestep (for MSE calib)."""
    chunks = []
    for sample in cal.samples_at(layer_id, timestep):
        tensor = cal.tensor(layer_id, timestep, sample)
        axes = _role_axes(tensor, dim)
        others = tuple(i for i in range(tensor.rank) if i not in axes)
        view = np.transpose(tensor.data, axes + others).reshape(
            int(np.prod([tensor.shape[a] for a in axes])), -1
        )
        chunks.append(view[members].ravel())
    return np.concatenate(chunks)


def fit_group_scheme(
    cal: CalibrationSet,
    layer_id: str,
    num_groups: int,
    bits: int,
    config: GroupQuantConfig = GroupQuantConfig(),
) -> GroupQuantScheme:
    """Fit a group scheme: pick the dimension, cluster once, calibrate per timestep.

    Per-vector extrema are aggregated over every sample and timestep to score
    the two dimensions and to cluster; the scale/offset table is then computed
    per (timestep, group) from that timestep's values (real-offset form).
    """
    if layer_id not in cal.layers:
        raise ManifestError(f"layer '{layer_id}' not present in calibration set")
    for t in range(cal.num_timesteps):
        if not cal.samples_at(layer_id, t):
            raise ManifestError(f"layer '{layer_id}' has no samples at timestep {t}")

    agg_min, agg_max, per_t = _aggregate_layer_stats(cal, layer_id)
    stats_c = DimensionStats(CHANNEL, agg_min[CHANNEL], agg_max[CHANNEL])
    stats_p = DimensionStats(PIXEL, agg_min[PIXEL], agg_max[PIXEL])
    dim = select_dimension(stats_c, stats_p)

    assignment = cluster_ranges(agg_min[dim], agg_max[dim], num_groups, config.seed)

    T = cal.num_timesteps
    scales = np.empty((T, num_groups), dtype=np.float64)
    offsets = np.empty((T, num_groups), dtype=np.float64)
    for t in range(T):
        vmins = per_t[t][f"{dim}_min"]
        vmaxs = per_t[t][f"{dim}_max"]
        for k in range(num_groups):
            members = np.flatnonzero(assignment == k)
            lo = float(vmins[members].min())
            hi = float(vmaxs[members].max())
            if config.strategy == "mse" and hi > lo:
                values = _group_values_at(cal, layer_id, t, dim, members)
                p = calibrate_mse(
                    values, bits, denominator=config.denominator, offset_form=REAL_OFFSET
                )
                scales[t, k], offsets[t, k] = p.scale, p.offset
            else:
                p = params_from_range(
                    lo, hi, bits, denominator=config.denominator, offset_form=REAL_OFFSET
                )
                scales[t, k], offsets[t, k] = p.scale, p.offset

    return GroupQuantScheme(
        layer_id=layer_id,
        dim=dim,
        num_groups=num_groups,
        bits=bits,
        assignment=assignment,
        scales=scales,
        offsets=offsets,
        denominator=config.denominator,
        offset_form=config.offset_form,
    )


def apply_group_quant(t: Tensor, scheme: GroupQuantScheme, timestep: int) -> Tensor:
    """Fake-quantize every vector along the scheme's dimension with its group params."""
    if not 0 <= timestep < scheme.num_timesteps:
        raise ValueError(
            f"timestep {timestep} outside [0, {scheme.num_timesteps})"
        )
    axes = _role_axes(t, scheme.dim)
    n = int(np.prod([t.shape[a] for a in axes]))
    if n != len(scheme.assignment):
        raise PlanError(
            f"tensor has {n} '{scheme.dim}' vectors but scheme expects "
            f"{len(scheme.assignment)}"
        )
    s_vec = scheme.scales[timestep][scheme.assignment]
    z_vec = scheme.offsets[timestep][scheme.assignment]
    bshape = [1] * t.rank
    for a in axes:
        bshape[a] = t.shape[a]
    s = s_vec.reshape(bshape)
    z = z_vec.reshape(bshape)

    x = t.data.astype(np.float64)
    q = np.clip(np.rint((x - z) / s), 0, 2**scheme.bits - 1)
    out = (s * q + z).astype(np.float32)
    return Tensor(out, t.axis_roles)


def scheme_overhead_bytes(scheme: GroupQuantScheme, bytes_per_param: int) -> int:
    """Memory for the per-timestep parameter tables: T * K * bytes * 2 (scale and offset)."""
    return int(scheme.num_timesteps) * int(scheme.num_groups) * int(bytes_per_param) * 2
