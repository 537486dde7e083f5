"""Image and vector files: 8-bit PGM/PPM and plain-text numeric arrays.

Text images carry a ``# shape h w c`` header line followed by ``h`` rows of
``w * c`` values (channels interleaved).  Quantisation and clamping happen
only when writing 8-bit formats.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import ImageBuffer

__all__ = ["read_image", "write_image", "read_vector", "write_vector"]

_NETPBM = {".pgm", ".ppm", ".pnm"}


def read_image(path) -> ImageBuffer:
    path = Path(path)
    if path.suffix.lower() in _NETPBM:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return ImageBuffer(arr)
    header = path.open().readline()
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if header.startswith("# shape"):
        h, w, c = (int(v) for v in header.split()[2:5])
        return ImageBuffer(data.reshape(h, w, c))
    return ImageBuffer(data)


def write_image(path, img) -> None:
    path = Path(path)
    img = img if isinstance(img, ImageBuffer) else ImageBuffer(img)
    h, w, c = img.shape
    if path.suffix.lower() in _NETPBM:
        if c not in (1, 3):
            raise ValueError(f"netpbm needs 1 or 3 channels, got {c}")
        q = np.round(img.clipped() * 255.0).astype(np.uint8)
        Image.fromarray(q[:, :, 0] if c == 1 else q).save(path)
        return
    np.savetxt(path, img.data.reshape(h, w * c), fmt="%.17e", header=f"shape {h} {w} {c}")


def read_vector(path) -> np.ndarray:
    return np.loadtxt(Path(path), dtype=np.float64, ndmin=1).reshape(-1)


def write_vector(path, x) -> None:
    np.savetxt(Path(path), np.asarray(x, dtype=np.float64).reshape(-1), fmt="%.17e")
