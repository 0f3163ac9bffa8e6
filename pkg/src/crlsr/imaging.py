"""PNG I/O, luma conversion and Y-channel PSNR."""

from __future__ import annotations

import math
import os
from pathlib import Path

import cv2
import numpy as np

# BT.601 full-range luma weights for R, G, B.
LUMA = (0.299, 0.587, 0.114)
INF_SENTINEL = "inf"


class ImageError(OSError):
    pass


def load_png(path) -> np.ndarray:
    """Read an 8/16-bit grayscale or RGB PNG as a float64 ``[3, H, W]`` array in [0, 1].

    Grayscale files are replicated into three identical channels; an alpha
    channel is dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"{path}: no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"{path}: unreadable or corrupt image")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise ImageError(f"{path}: unsupported bit depth ({raw.dtype})")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    elif raw.shape[2] != 3:
        raise ImageError(f"{path}: unsupported channel count {raw.shape[2]}")
    rgb = raw[:, :, ::-1].astype(np.float64) / peak
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def to_uint(image, bits: int = 8) -> np.ndarray:
    peak = (1 << bits) - 1
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(img * peak).astype(np.uint8 if bits == 8 else np.uint16)


def save_png(image, path, bits: int = 8) -> None:
    """Write a ``[3, H, W]`` or ``[H, W]`` array (values clipped to [0, 1])."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        out = to_uint(img.transpose(1, 2, 0)[:, :, ::-1], bits)
    elif img.ndim == 2:
        out = to_uint(img, bits)
    else:
        raise ImageError(f"cannot save array of shape {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(out))
    if not ok:
        raise ImageError(f"{path}: PNG encoding failed")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.tobytes())
    os.replace(tmp, path)


def rgb_to_y(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {img.shape}")
    return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]


def psnr_y(a, b, shave: int = 0) -> float:
    """PSNR in dB between the luma planes of ``a`` and ``b`` (peak 1.0).

    ``shave`` border pixels are dropped on every side; the evaluation
    protocol uses the scale factor. Identical inputs return ``math.inf``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if shave:
        ya = ya[shave:-shave, shave:-shave]
        yb = yb[shave:-shave, shave:-shave]
    if ya.size == 0:
        raise ValueError("shave removes the whole image")
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_psnr(value: float) -> str:
    return INF_SENTINEL if math.isinf(value) else f"{value:.6f}"
