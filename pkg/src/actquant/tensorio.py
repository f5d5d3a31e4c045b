"""Dense float32 tensors, activation-dump IO, and calibration-set manifests.

Dump files are NPY v1.0 restricted to little-endian 32-bit float, C order.
A calibration set is a JSON manifest keying dump files by
(layer, timestep, sample); see ``load_calibration_set`` for the schema.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ManifestError,
    TensorDataError,
    TensorFormatError,
    UnsupportedTensorError,
)

AXIS_ROLES = ("pixel", "channel", "token", "other")
MAX_RANK = 4

_MAGIC = b"\x93NUMPY"
_VERSION = b"\x01\x00"
_ALIGN = 64
_DESCR = "<f4"


@dataclass(frozen=True)
class Tensor:
    """Immutable dense float32 array with optional per-axis role labels.

    ``axis_roles``, when given, assigns each axis one of ``AXIS_ROLES``.
    Several axes may share a role (e.g. height and width both ``pixel``);
    the batch convention is an ``other`` axis in position 0.
    """

    data: np.ndarray
    axis_roles: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, order="C")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"shape {arr.shape} has a non-positive dimension")
        if not np.isfinite(arr).all():
            raise TensorDataError("tensor contains NaN or Inf values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        if self.axis_roles is not None:
            roles = tuple(self.axis_roles)
            if len(roles) != arr.ndim:
                raise ValueError(
                    f"axis_roles {roles} do not match tensor rank {arr.ndim}"
                )
            bad = [r for r in roles if r not in AXIS_ROLES]
            if bad:
                raise ValueError(f"unknown axis roles {bad}; expected one of {AXIS_ROLES}")
            object.__setattr__(self, "axis_roles", roles)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def rank(self) -> int:
        return self.data.ndim

    def role_axes(self, role: str) -> tuple[int, ...]:
        """Indices of the axes carrying ``role`` (empty if unlabeled)."""
        if self.axis_roles is None:
            return ()
        return tuple(i for i, r in enumerate(self.axis_roles) if r == role)

    def with_roles(self, roles: tuple[str, ...] | None) -> "Tensor":
        return Tensor(self.data, roles)


def _build_header(shape: tuple[int, ...]) -> bytes:
    header = (
        "{'descr': '%s', 'fortran_order': False, 'shape': %s, }"
        % (_DESCR, str(tuple(int(d) for d in shape)))
    )
    base = len(_MAGIC) + 2 + 2 + len(header) + 1
    header += " " * ((_ALIGN - base % _ALIGN) % _ALIGN) + "\n"
    return header.encode("latin1")


def _parse_header(buf: bytes, path: Path) -> tuple[int, ...]:
    """Parse an NPY v1.0 header, returning the shape. Raises on anything else."""
    if len(buf) < 10 or buf[: len(_MAGIC)] != _MAGIC:
        raise TensorFormatError(f"{path}: not an NPY file (bad magic)")
    if buf[6:8] != _VERSION:
        raise UnsupportedTensorError(
            f"{path}: NPY version {buf[6]}.{buf[7]} not supported (expected 1.0)"
        )
    (hlen,) = struct.unpack("<H", buf[8:10])
    if len(buf) < 10 + hlen:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        meta = ast.literal_eval(buf[10 : 10 + hlen].decode("latin1"))
        descr = meta["descr"]
        fortran = meta["fortran_order"]
        shape = tuple(int(d) for d in meta["shape"])
    except (ValueError, KeyError, SyntaxError, TypeError) as exc:
        raise TensorFormatError(f"{path}: unparseable NPY header") from exc
    if descr != _DESCR:
        raise UnsupportedTensorError(
            f"{path}: dtype {descr!r} not supported (expected {_DESCR!r})"
        )
    if fortran:
        raise UnsupportedTensorError(f"{path}: Fortran-ordered data not supported")
    if len(shape) > MAX_RANK:
        raise UnsupportedTensorError(f"{path}: rank {len(shape)} exceeds {MAX_RANK}")
    if any(d <= 0 for d in shape):
        raise TensorFormatError(f"{path}: non-positive dimension in shape {shape}")
    return shape


def read_tensor_header(path: str | Path) -> tuple[int, ...]:
    """Read only the shape of a dump file (cheap existence/shape validation)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[: len(_MAGIC)] != _MAGIC:
            raise TensorFormatError(f"{path}: not an NPY file (bad magic)")
        (hlen,) = struct.unpack("<H", head[8:10])
        return _parse_header(head + fh.read(hlen), path)


def load_tensor(path: str | Path) -> Tensor:
    """Load an NPY v1.0 little-endian float32 C-order file, bit exactly.

    Raises ``TensorFormatError`` for malformed files, ``UnsupportedTensorError``
    for wrong dtype/order/version, ``TensorDataError`` for NaN/Inf payloads.
    """
    path = Path(path)
    buf = path.read_bytes()
    shape = _parse_header(buf, path)
    (hlen,) = struct.unpack("<H", buf[8:10])
    payload = buf[10 + hlen :]
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != count * 4:
        raise TensorFormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {count * 4}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if not np.isfinite(arr).all():
        raise TensorDataError(f"{path}: payload contains NaN or Inf")
    return Tensor(arr)


def save_tensor(t: Tensor, path: str | Path) -> None:
    """Write a tensor as NPY v1.0; ``load_tensor`` recovers it bit exactly."""
    path = Path(path)
    header = _build_header(t.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(_VERSION)
            fh.write(struct.pack("<H", len(header)))
            fh.write(header)
            fh.write(t.data.tobytes("C"))
    except OSError as exc:
        raise OSError(f"failed to write tensor to {path}: {exc}") from exc


def axis_minmax(t: Tensor, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-index min and max along axis ``dim``, reducing over all other axes."""
    if not 0 <= dim < t.rank:
        raise ValueError(f"axis {dim} out of range for rank-{t.rank} tensor")
    others = tuple(i for i in range(t.rank) if i != dim)
    if others:
        return t.data.min(axis=others), t.data.max(axis=others)
    return t.data.copy(), t.data.copy()


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    shape: tuple[int, ...]
    axis_roles: tuple[str, ...]

    @property
    def is_attention(self) -> bool:
        """Layers with a token axis hold attention-score matrices."""
        return "token" in self.axis_roles

    @property
    def has_batch_axis(self) -> bool:
        """Axis 0 labeled ``other`` is the batch axis and may vary per dump."""
        return len(self.axis_roles) > 1 and self.axis_roles[0] == "other"


@dataclass
class CalibrationSet:
    """Validated collection of activation dumps keyed by (layer, timestep, sample)."""

    layers: dict[str, LayerInfo]
    entries: dict[tuple[str, int, int], Path]
    num_timesteps: int
    manifest_path: Path = field(default_factory=Path)

    def layer_ids(self) -> list[str]:
        return sorted(self.layers)

    def samples_at(self, layer_id: str, timestep: int) -> list[int]:
        return sorted(
            s for (l, t, s) in self.entries if l == layer_id and t == timestep
        )

    def tensor(self, layer_id: str, timestep: int, sample: int) -> Tensor:
        path = self.entries[(layer_id, timestep, sample)]
        return load_tensor(path).with_roles(self.layers[layer_id].axis_roles)

    def iter_layer(self, layer_id: str):
        """Yield (timestep, sample, tensor) in deterministic order."""
        for t in range(self.num_timesteps):
            for s in self.samples_at(layer_id, t):
                yield t, s, self.tensor(layer_id, t, s)


def _check_entry_shape(layer: LayerInfo, shape: tuple[int, ...], path: Path) -> None:
    declared = layer.shape
    if len(shape) != len(declared):
        raise ManifestError(
            f"{path}: rank {len(shape)} does not match layer "
            f"'{layer.layer_id}' rank {len(declared)}"
        )
    start = 1 if layer.has_batch_axis else 0
    if shape[start:] != declared[start:]:
        raise ManifestError(
            f"{path}: shape {shape} does not match layer "
            f"'{layer.layer_id}' shape {declared}"
        )


def load_calibration_set(manifest_path: str | Path) -> CalibrationSet:
    """Load and validate a calibration-set manifest.

    Manifest schema (JSON)::

        { "num_timesteps": int,
          "layers":  [ { "id": str, "shape": [int], "axis_roles": [str] } ],
          "entries": [ { "layer": str, "timestep": int, "sample": int,
                         "file": str } ] }

    Entry files are resolved relative to the manifest. Validation is eager
    for existence and shape (header-only read); tensor payloads load lazily.
    Timesteps must be dense in [0, num_timesteps) for every layer.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc

    try:
        num_timesteps = int(doc["num_timesteps"])
        raw_layers = doc["layers"]
        raw_entries = doc["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{manifest_path}: missing or malformed top-level keys") from exc
    if num_timesteps < 1:
        raise ManifestError(f"{manifest_path}: num_timesteps must be >= 1")

    layers: dict[str, LayerInfo] = {}
    for rec in raw_layers:
        try:
            info = LayerInfo(
                layer_id=str(rec["id"]),
                shape=tuple(int(d) for d in rec["shape"]),
                axis_roles=tuple(str(r) for r in rec["axis_roles"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{manifest_path}: malformed layer record {rec}") from exc
        if info.layer_id in layers:
            raise ManifestError(f"{manifest_path}: duplicate layer id '{info.layer_id}'")
        if len(info.axis_roles) != len(info.shape):
            raise ManifestError(
                f"{manifest_path}: layer '{info.layer_id}' axis_roles/shape length mismatch"
            )
        bad = [r for r in info.axis_roles if r not in AXIS_ROLES]
        if bad:
            raise ManifestError(
                f"{manifest_path}: layer '{info.layer_id}' has unknown roles {bad}"
            )
        if any(d <= 0 for d in info.shape):
            raise ManifestError(
                f"{manifest_path}: layer '{info.layer_id}' has non-positive dims"
            )
        layers[info.layer_id] = info

    base = manifest_path.parent
    entries: dict[tuple[str, int, int], Path] = {}
    for rec in raw_entries:
        try:
            lid = str(rec["layer"])
            timestep = int(rec["timestep"])
            sample = int(rec["sample"])
            fpath = base / str(rec["file"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{manifest_path}: malformed entry record {rec}") from exc
        if lid not in layers:
            raise ManifestError(f"{manifest_path}: entry references unknown layer '{lid}'")
        if not 0 <= timestep < num_timesteps:
            raise ManifestError(
                f"{manifest_path}: entry timestep {timestep} outside [0, {num_timesteps})"
            )
        if sample < 0:
            raise ManifestError(f"{manifest_path}: negative sample id {sample}")
        key = (lid, timestep, sample)
        if key in entries:
            raise ManifestError(f"{manifest_path}: duplicate entry {key}")
        if not fpath.is_file():
            raise ManifestError(f"{manifest_path}: missing tensor file {fpath}")
        _check_entry_shape(layers[lid], read_tensor_header(fpath), fpath)
        entries[key] = fpath

    for lid in layers:
        seen = {t for (l, t, _) in entries if l == lid}
        if seen != set(range(num_timesteps)):
            raise ManifestError(
                f"{manifest_path}: layer '{lid}' timesteps {sorted(seen)} are not "
                f"dense in [0, {num_timesteps})"
            )

    return CalibrationSet(
        layers=layers,
        entries=entries,
        num_timesteps=num_timesteps,
        manifest_path=manifest_path,
    )
