import json

import numpy as np
import pytest

from actquant.tensorio import Tensor, save_tensor


def write_manifest(tmp_path, layers, entries, num_timesteps):
    """Write tensor files + manifest; ``entries`` maps (layer, t, s) -> array."""
    recs = []
    for (lid, t, s), arr in entries.items():
        fname = f"{lid}_t{t}_s{s}.npy"
        save_tensor(Tensor(np.asarray(arr, dtype=np.float32)), tmp_path / fname)
        recs.append({"layer": lid, "timestep": t, "sample": s, "file": fname})
    manifest = {
        "num_timesteps": num_timesteps,
        "layers": layers,
        "entries": recs,
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


@pytest.fixture
def manifest_writer(tmp_path):
    def _write(layers, entries, num_timesteps):
        return write_manifest(tmp_path, layers, entries, num_timesteps)

    return _write
