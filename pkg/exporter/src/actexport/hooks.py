"""Forward-hook capture of intermediate tensors into a calibration-set layout.

The exporter registers hooks on modules selected by fnmatch patterns, records
their outputs per (timestep, sample), casts everything to contiguous float32,
and writes NPY dumps plus the JSON manifest consumed by activation-quantization
tooling. It never quantizes anything; capture is the whole job.

Axis-role conventions written to the manifest:

- activation, rank 2: (pixel, channel) - batch rows double as pixels
- activation, rank 3: (other, pixel, channel)
- activation, rank 4: (other, channel, pixel, pixel) - NCHW
- attention_scores: trailing two axes are (pixel, token); any leading axes
  (batch, heads) are flattened into a single leading "other" axis

A leading "other" axis may vary across dumps; all other dims are fixed by the
first capture of each layer.
"""

from __future__ import annotations

import fnmatch
import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

ACTIVATION = "activation"
ATTENTION_SCORES = "attention_scores"

_ACTIVATION_ROLES = {
    1: ("channel",),
    2: ("pixel", "channel"),
    3: ("other", "pixel", "channel"),
    4: ("other", "channel", "pixel", "pixel"),
}


class ExportError(Exception):
    pass


@dataclass(frozen=True)
class CaptureSpec:
    """One capture rule: which modules (fnmatch pattern) and what they emit."""

    pattern: str
    kind: str = ACTIVATION

    def __post_init__(self) -> None:
        if self.kind not in (ACTIVATION, ATTENTION_SCORES):
            raise ExportError(f"unknown capture kind {self.kind!r}")


def _to_array(layer: str, output) -> np.ndarray:
    if isinstance(output, (tuple, list)):
        output = output[0]
    if not isinstance(output, torch.Tensor):
        raise ExportError(f"layer '{layer}' produced {type(output).__name__}, not a tensor")
    arr = output.detach().to(torch.float32).cpu().contiguous().numpy()
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ExportError(f"layer '{layer}' produced non-finite values")
    return arr


def _shape_for(kind: str, layer: str, arr: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    if kind == ATTENTION_SCORES:
        if arr.ndim < 2:
            raise ExportError(f"attention layer '{layer}' output must be at least 2-D")
        if arr.ndim == 2:
            return arr, ("pixel", "token")
        arr = arr.reshape(-1, arr.shape[-2], arr.shape[-1])
        return arr, ("other", "pixel", "token")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim not in _ACTIVATION_ROLES:
        raise ExportError(f"layer '{layer}' has unsupported rank {arr.ndim}")
    return arr, _ACTIVATION_ROLES[arr.ndim]


class ActivationExporter:
    """Collects hooked outputs per (timestep, sample) and writes the dump set.

    Usage::

        exporter = ActivationExporter(model, [CaptureSpec("fc*")], out_dir)
        for t in range(T):
            for s in range(S):
                with exporter.capture(timestep=t, sample=s):
                    model(make_inputs(t, s))
        manifest = exporter.finalize()

    Timesteps may come from any source (an external counter or a scheduler
    callback); the capture context just records the pair it is given.
    """

    def __init__(self, model: torch.nn.Module, captures, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._kinds: dict[str, str] = {}
        self._shapes: dict[str, tuple[int, ...]] = {}
        self._roles: dict[str, tuple[str, ...]] = {}
        self._entries: dict[tuple[str, int, int], str] = {}
        self._handles = []
        self._active: tuple[int, int] | None = None

        names = [name for name, _ in model.named_modules() if name]
        for spec in captures:
            matched = fnmatch.filter(names, spec.pattern)
            if not matched:
                raise ExportError(
                    f"pattern {spec.pattern!r} matches no modules; available: "
                    + ", ".join(sorted(names))
                )
            for name in matched:
                if name in self._kinds and self._kinds[name] != spec.kind:
                    raise ExportError(f"layer '{name}' matched with two different kinds")
                self._kinds[name] = spec.kind

        modules = dict(model.named_modules())
        for name in self._kinds:
            self._handles.append(
                modules[name].register_forward_hook(self._make_hook(name))
            )

    def _make_hook(self, name: str):
        def hook(_module, _inputs, output):
            if self._active is None:
                return
            timestep, sample = self._active
            arr = _to_array(name, output)
            arr, roles = _shape_for(self._kinds[name], name, arr)
            self._record(name, timestep, sample, arr, roles)

        return hook

    def _record(self, name, timestep, sample, arr, roles):
        declared = self._shapes.get(name)
        if declared is None:
            self._shapes[name] = arr.shape
            self._roles[name] = roles
        else:
            start = 1 if roles[0] == "other" else 0
            if len(arr.shape) != len(declared) or arr.shape[start:] != declared[start:]:
                raise ExportError(
                    f"layer '{name}' shape {arr.shape} conflicts with first "
                    f"capture {declared}"
                )
        fname = f"{name.replace('.', '_')}_t{timestep}_s{sample}.npy"
        np.save(self.out_dir / fname, arr)
        self._entries[(name, timestep, sample)] = fname

    @contextmanager
    def capture(self, timestep: int, sample: int):
        """Record everything the hooked modules emit during the block."""
        if timestep < 0 or sample < 0:
            raise ExportError("timestep and sample must be non-negative")
        if self._active is not None:
            raise ExportError("capture contexts cannot nest")
        self._active = (int(timestep), int(sample))
        try:
            yield self
        finally:
            self._active = None

    def close(self) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles = []

    def finalize(self, num_timesteps: int | None = None) -> Path:
        """Write manifest.json and detach the hooks; returns the manifest path."""
        self.close()
        if not self._entries:
            raise ExportError("nothing captured")
        seen = sorted({t for (_, t, _) in self._entries})
        derived = seen[-1] + 1
        num_timesteps = derived if num_timesteps is None else int(num_timesteps)
        for layer in self._shapes:
            layer_ts = {t for (l, t, _) in self._entries if l == layer}
            if layer_ts != set(range(num_timesteps)):
                raise ExportError(
                    f"layer '{layer}' captured timesteps {sorted(layer_ts)}, "
                    f"expected dense 0..{num_timesteps - 1}"
                )
        manifest = {
            "num_timesteps": num_timesteps,
            "layers": [
                {
                    "id": name,
                    "shape": [int(d) for d in self._shapes[name]],
                    "axis_roles": list(self._roles[name]),
                }
                for name in sorted(self._shapes)
            ],
            "entries": [
                {"layer": l, "timestep": t, "sample": s, "file": self._entries[(l, t, s)]}
                for (l, t, s) in sorted(self._entries)
            ],
        }
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def export_run(
    model: torch.nn.Module,
    captures,
    make_inputs,
    out_dir: str | Path,
    num_timesteps: int,
    samples_per_timestep: int,
) -> Path:
    """Counter-driven export: forward the model once per (timestep, sample).

    ``make_inputs(timestep, sample)`` returns the forward arguments (a tensor
    or a tuple of tensors).
    """
    exporter = ActivationExporter(model, captures, out_dir)
    with torch.no_grad():
        for t in range(num_timesteps):
            for s in range(samples_per_timestep):
                inputs = make_inputs(t, s)
                if not isinstance(inputs, tuple):
                    inputs = (inputs,)
                with exporter.capture(timestep=t, sample=s):
                    model(*inputs)
    return exporter.finalize(num_timesteps)
