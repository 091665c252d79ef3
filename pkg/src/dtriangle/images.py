"""Binary PGM (P5) output for image grids."""

from __future__ import annotations

import math
import os

import numpy as np


def to_bytes(x: np.ndarray, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Map values in ``[low, high]`` linearly onto ``0..255`` (clipped, rounded)."""
    x = (np.asarray(x, dtype=np.float64) - low) / (high - low)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM payload must be a 2-D uint8 array")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(payload: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pgm` (no comment lines)."""
    parts = payload.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only maxval 255 is supported")
    body = parts[3]
    if len(body) != w * h:
        raise ValueError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def tile(images: np.ndarray, cols: int | None = None, pad: int = 1, pad_value: float = -1.0) -> np.ndarray:
    """Tile ``[n, H, W]`` or ``[n, 1, H, W]`` images into a single float array.

    ``cols`` defaults to ``ceil(sqrt(n))``; unused cells are filled with ``pad_value``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ValueError("only single-channel images can be tiled")
        images = images[:, 0]
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("expected a non-empty stack of 2-D images")
    n, h, w = images.shape
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), pad_value)
    for k in range(n):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y : y + h, x : x + w] = images[k]
    return out


def write_pgm(path: str, img: np.ndarray) -> None:
    """Atomically write a float image in ``[-1, 1]`` (or a uint8 image) as PGM."""
    img = np.asarray(img)
    data = img if img.dtype == np.uint8 else to_bytes(img)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(encode_pgm(data))
    os.replace(tmp, path)


def write_grid(path: str, images: np.ndarray, cols: int | None = None) -> None:
    write_pgm(path, tile(images, cols))
