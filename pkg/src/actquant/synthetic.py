"""Synthetic calibration sets with planted outliers, for tests and demos.

Activation layers carry a few channels (or pixel rows) of consistently large
magnitude against a standard-normal bulk, alternating sign so the value range
stays roughly symmetric; activations drift across timesteps. Attention layers
hold softmax rows with a spike in the start-token column for most queries.
No model inference is involved.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensorio import Tensor, save_tensor

OUTLIER_MAGNITUDE = 10.0
OUTLIER_JITTER = 0.2
TIMESTEP_DRIFT = 0.25
START_LOGIT_BOOST = 5.0


def _activation(
    rng: np.random.Generator,
    pixels: int,
    channels: int,
    outlier_axis: str,
    outlier_indices: np.ndarray,
    drift: float,
) -> np.ndarray:
    x = rng.standard_normal((pixels, channels))
    for rank, idx in enumerate(outlier_indices):
        sign = 1.0 if rank % 2 == 0 else -1.0
        vec = sign * OUTLIER_MAGNITUDE + OUTLIER_JITTER * rng.standard_normal(
            pixels if outlier_axis == "channel" else channels
        )
        if outlier_axis == "channel":
            x[:, idx] = vec
        else:
            x[idx, :] = vec
    return (x * drift).astype(np.float32)


def _attention(rng: np.random.Generator, n_q: int, n_k: int) -> np.ndarray:
    logits = rng.normal(0.0, 1.5, (n_q, n_k))
    background = rng.random(n_q) < 0.6
    logits[background, 0] += START_LOGIT_BOOST
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def generate_calibration_set(
    out_dir: str | Path,
    num_activation_layers: int = 3,
    num_attention_layers: int = 1,
    num_timesteps: int = 4,
    samples_per_timestep: int = 2,
    pixels: int = 48,
    channels: int = 24,
    tokens: int = 8,
    outliers_per_layer: int = 2,
    seed: int = 0,
) -> Path:
    """Write dump files plus manifest.json under ``out_dir``; returns the manifest path.

    Activation layers alternate between planted channel outliers and planted
    pixel outliers. Everything is deterministic in ``seed``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    layers = []
    plans = []
    for i in range(num_activation_layers):
        axis = "channel" if i % 2 == 0 else "pixel"
        n = channels if axis == "channel" else pixels
        idx = rng.choice(n, size=min(outliers_per_layer, n), replace=False)
        layer_id = f"act{i}_{axis}"
        layers.append(
            {"id": layer_id, "shape": [pixels, channels], "axis_roles": ["pixel", "channel"]}
        )
        plans.append(("activation", layer_id, axis, np.sort(idx)))
    for i in range(num_attention_layers):
        layer_id = f"attn{i}"
        layers.append(
            {"id": layer_id, "shape": [pixels, tokens], "axis_roles": ["pixel", "token"]}
        )
        plans.append(("attention", layer_id, None, None))

    entries = []
    for kind, layer_id, axis, idx in plans:
        for t in range(num_timesteps):
            drift = 1.0 + TIMESTEP_DRIFT * t
            for s in range(samples_per_timestep):
                if kind == "activation":
                    arr = _activation(rng, pixels, channels, axis, idx, drift)
                else:
                    arr = _attention(rng, pixels, tokens)
                fname = f"{layer_id}_t{t}_s{s}.npy"
                save_tensor(Tensor(arr), out_dir / fname)
                entries.append(
                    {"layer": layer_id, "timestep": t, "sample": s, "file": fname}
                )

    manifest = {
        "num_timesteps": num_timesteps,
        "layers": layers,
        "entries": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    planted = {
        layer_id: {"axis": axis, "indices": [int(i) for i in idx]}
        for kind, layer_id, axis, idx in plans
        if kind == "activation"
    }
    (out_dir / "planted.json").write_text(json.dumps(planted, indent=2, sort_keys=True) + "\n")
    return manifest_path


def planted_outliers(manifest_path: str | Path) -> dict[str, dict]:
    """Ground truth for a generated set: per layer, the outlier axis and indices."""
    sidecar = Path(manifest_path).parent / "planted.json"
    return json.loads(sidecar.read_text())
