"""Command line: run a model script under capture hooks and write the dump set.

The model script is a Python file defining two functions:

    build_model() -> torch.nn.Module
    make_inputs(timestep: int, sample: int) -> Tensor | tuple[Tensor, ...]

The hooks file is JSON:

    { "captures": [ { "pattern": "fc*", "kind": "activation" } ],
      "num_timesteps": 4, "samples_per_timestep": 2 }
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import sys
from pathlib import Path

from .hooks import CaptureSpec, ExportError, export_run


def _load_script(path: str):
    path = Path(path)
    spec = importlib.util.spec_from_file_location(path.stem, path)
    if spec is None or spec.loader is None:
        raise ExportError(f"cannot load model script {path}")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    for required in ("build_model", "make_inputs"):
        if not hasattr(module, required):
            raise ExportError(f"model script {path} must define {required}()")
    return module


def _cmd_export(args) -> int:
    script = _load_script(args.model_script)
    doc = json.loads(Path(args.hooks).read_text())
    captures = [
        CaptureSpec(pattern=c["pattern"], kind=c.get("kind", "activation"))
        for c in doc["captures"]
    ]
    manifest = export_run(
        script.build_model(),
        captures,
        script.make_inputs,
        args.out,
        num_timesteps=int(doc.get("num_timesteps", 1)),
        samples_per_timestep=int(doc.get("samples_per_timestep", 1)),
    )
    print(f"wrote calibration set -> {manifest}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="actexport",
                                     description="activation dump exporter")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="capture a model run into NPY dumps + manifest")
    p.add_argument("--model-script", required=True, dest="model_script")
    p.add_argument("--hooks", required=True, help="JSON capture specification")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ExportError, KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
