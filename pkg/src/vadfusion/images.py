"""Small image helpers shared by the dataset and encoder stages.

All images are numpy uint8 arrays of shape (H, W, 3), RGB order.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingFrameImage


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFrameImage(f"frame image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, frame: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="RGB").save(path)


def resize_image(frame: np.ndarray, size: int) -> np.ndarray:
    """Resize to size x size (bilinear). No-op when already that size."""
    if frame.shape[0] == size and frame.shape[1] == size:
        return frame
    im = Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="RGB")
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.uint8)


def image_digest(frame: np.ndarray) -> str:
    """Content digest of a frame; shape-sensitive so crops never collide."""
    arr = np.ascontiguousarray(frame)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
