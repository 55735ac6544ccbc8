"""PNG I/O and contact sheets. Images are float arrays in [0, 1], H x W x 3."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] then round half-up to 8 bits."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def contact_sheet(imgs: Sequence[np.ndarray], cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile images (uniform size) into one sheet with a white gutter."""
    if not imgs:
        return np.ones((8, 8, 3))
    h, w, _ = imgs[0].shape
    cols = min(cols, len(imgs))
    rows = (len(imgs) + cols - 1) // cols
    sheet = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3))
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        sheet[y : y + h, x : x + w] = np.clip(img, 0.0, 1.0)
    return sheet
