"""Binary portable-pixmap output (P5 grayscale / P6 color), byte-stable.

Pixel values in [-1, 1] map linearly onto 0..255; writers emit exactly the
same bytes for the same input, which determinism tests rely on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(values: np.ndarray) -> np.ndarray:
    scaled = np.clip((values + 1.0) * 0.5, 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Write one [H, W] or [1, H, W] image in [-1, 1] as binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"write_pgm expects one channel, got {img.shape}")
        img = img[0]
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_u8(img).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write one [3, H, W] image in [-1, 1] as binary PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3, H, W], got {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    interleaved = to_u8(img).transpose(1, 2, 0)
    Path(path).write_bytes(header + interleaved.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM back into float values in [-1, 1], shape [1, H, W]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: {parts[0]!r}")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)
    return (data.astype(np.float64) / 255.0 * 2.0 - 1.0)[None]


__all__ = ["to_u8", "write_pgm", "write_ppm", "read_pgm"]
