"""Dataset directories: frames/ + cameras.json (+ truth.json for oracles).

The trainer-facing loader reads images and cameras only. Ground-truth
expression codes live in truth.json and are loaded through a separate
function so that training code cannot accidentally consume them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import Camera, load_cameras
from . import images


@dataclass
class Dataset:
    root: Path
    names: list[str]
    images: np.ndarray  # [N, H, W, 3] floats in [0, 1]
    cameras: list[Camera]

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            root=self.root,
            names=[self.names[i] for i in idx],
            images=self.images[idx],
            cameras=[self.cameras[i] for i in idx],
        )


def load_dataset(root) -> Dataset:
    root = Path(root)
    entries = load_cameras(root / "cameras.json")
    names = [name for name, _ in entries]
    cams = [cam for _, cam in entries]
    if not entries:
        return Dataset(root=root, names=[], images=np.zeros((0, 0, 0, 3)), cameras=[])
    imgs = np.stack([images.load_png(root / name) for name in names])
    return Dataset(root=root, names=names, images=imgs, cameras=cams)


def load_truth(root) -> np.ndarray:
    """Per-frame ground-truth expression codes, [N, 64]. Oracle/eval only."""
    path = Path(root) / "truth.json"
    if not path.is_file():
        raise FileNotFoundError(f"truth file not found: {path}")
    rows = json.loads(path.read_text())
    out = np.zeros((len(rows), 64))
    for row in rows:
        out[int(row["frame"])] = np.asarray(row["psi"], dtype=np.float64)
    return out
