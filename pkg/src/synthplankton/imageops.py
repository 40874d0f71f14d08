"""Small image helpers shared by the dataset, feature and audit code.

All arrays are float H x W x 3 in [0, 1] unless stated otherwise.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image


def resize_area(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an H x W x C image to ``size`` = (H', W') by area averaging.

    Integer downscale factors use exact block means; anything else falls back
    to PIL's box filter applied per channel in 32-bit float.
    """
    h, w = pixels.shape[:2]
    th, tw = int(size[0]), int(size[1])
    if (h, w) == (th, tw):
        return pixels
    if h % th == 0 and w % tw == 0:
        fh, fw = h // th, w // tw
        out = pixels.reshape(th, fh, tw, fw, -1).mean(axis=(1, 3))
        return out.astype(pixels.dtype, copy=False)
    channels = []
    for c in range(pixels.shape[2]):
        im = Image.fromarray(np.ascontiguousarray(pixels[:, :, c], dtype=np.float32))
        channels.append(np.asarray(im.resize((tw, th), resample=Image.BOX), dtype=np.float32))
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(pixels.dtype, copy=False)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if arr.max() > 255 else 255.0
            arr = np.repeat((arr / peak)[:, :, None], 3, axis=2)
            return np.clip(arr, 0.0, 1.0).astype(np.float32)
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float32) / 255.0


def image_grid(images: np.ndarray, ncols: int | None = None, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile a batch (N, H, W, 3) into one image, row-major."""
    n, h, w, c = images.shape
    ncols = ncols or int(math.ceil(math.sqrt(n)))
    nrows = int(math.ceil(n / ncols))
    grid = np.full((nrows * h + (nrows + 1) * pad, ncols * w + (ncols + 1) * pad, c), fill, dtype=np.float32)
    for i in range(n):
        r, col = divmod(i, ncols)
        y = pad + r * (h + pad)
        x = pad + col * (w + pad)
        grid[y:y + h, x:x + w] = images[i]
    return grid
