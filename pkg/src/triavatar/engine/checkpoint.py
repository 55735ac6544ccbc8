"""Checkpoint directories: a versioned JSON manifest plus one flat
little-endian float64 binary per tensor."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _file_for(name: str, used: set[str]) -> str:
    base = re.sub(r"[^A-Za-z0-9_.-]", "_", name) or "tensor"
    candidate = base + ".bin"
    k = 1
    while candidate in used:
        candidate = f"{base}__{k}.bin"
        k += 1
    used.add(candidate)
    return candidate


def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | Tensor"], config: dict | None = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    used: set[str] = set()
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        fname = _file_for(name, used)
        arr.astype("<f8").tofile(out / fname)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "file": fname})
    manifest = {"version": FORMAT_VERSION, "tensors": entries, "config": config or {}}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"checkpoint not found: no {MANIFEST_NAME} in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = np.fromfile(root / entry["file"], dtype="<f8")
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {entry['name']!r}: file size does not match shape {shape}")
        tensors[entry["name"]] = raw.reshape(shape)
    return tensors, manifest.get("config", {})
