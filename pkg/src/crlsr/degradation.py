"""Synthetic degradation: blur, bicubic downsampling, additive white Gaussian noise.

Images are float64 arrays shaped ``[C, H, W]`` with values in ``[0, 1]``.
Noise levels are standard deviations on the 0-255 scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng

SIGMA_MIN, SIGMA_MAX = 0.05, 10.0
NOISE_MAX = 100.0
SCALES = (2, 3, 4)
SCHEMA_VERSION = 1

# Sub-stream key for the noise draw of ``degrade``.
NOISE_STREAM = 1


class DegradationError(ValueError):
    pass


# ------------------------------------------------------------------ specs

@dataclass(frozen=True)
class GaussianKernelSpec:
    """Isotropic (``sigma``) or anisotropic (``theta``, ``lambda1``, ``lambda2``) Gaussian."""

    variant: str = "isotropic"
    sigma: float | None = None
    theta: float | None = None
    lambda1: float | None = None
    lambda2: float | None = None
    size: int = 21

    def __post_init__(self):
        _check_size(self.size)
        if self.variant == "isotropic":
            _check_sigma("sigma", self.sigma)
        elif self.variant == "anisotropic":
            _check_sigma("lambda1", self.lambda1)
            _check_sigma("lambda2", self.lambda2)
            if self.theta is None or not 0.0 <= self.theta < math.pi:
                raise DegradationError(f"theta must lie in [0, pi), got {self.theta}")
        else:
            raise DegradationError(f"unknown kernel variant {self.variant!r}")

    def make(self) -> np.ndarray:
        if self.variant == "isotropic":
            return make_isotropic_kernel(self.sigma, self.size)
        return make_anisotropic_kernel(self.theta, self.lambda1, self.lambda2, self.size)

    def to_dict(self) -> dict:
        if self.variant == "isotropic":
            return {"type": "isotropic", "sigma": self.sigma, "size": self.size}
        return {"type": "anisotropic", "theta": self.theta, "lambda1": self.lambda1,
                "lambda2": self.lambda2, "size": self.size}


@dataclass(frozen=True)
class KernelField:
    """Isotropic blur whose width ramps linearly from the left to the right column."""

    sigma_min: float
    sigma_max: float
    size: int = 21
    axis: str = "horizontal"

    def __post_init__(self):
        _check_size(self.size)
        _check_sigma("sigma_min", self.sigma_min)
        _check_sigma("sigma_max", self.sigma_max)
        if self.sigma_min > self.sigma_max:
            raise DegradationError("sigma_min must not exceed sigma_max")
        if self.axis != "horizontal":
            raise DegradationError(f"unsupported field axis {self.axis!r}")

    def sigmas(self, width: int) -> np.ndarray:
        return _ramp(self.sigma_min, self.sigma_max, width)

    def to_dict(self) -> dict:
        return {"type": "field", "axis": self.axis, "sigma_min": self.sigma_min,
                "sigma_max": self.sigma_max, "size": self.size}


@dataclass(frozen=True)
class NoiseSpec:
    variant: str = "constant"
    level: float = 0.0
    level_min: float | None = None
    level_max: float | None = None

    def __post_init__(self):
        if self.variant == "constant":
            _check_level("level", self.level)
        elif self.variant == "horizontal_ramp":
            _check_level("level_min", self.level_min)
            _check_level("level_max", self.level_max)
        else:
            raise DegradationError(f"unknown noise variant {self.variant!r}")

    def levels(self, width: int) -> np.ndarray | float:
        if self.variant == "constant":
            return float(self.level)
        return _ramp(self.level_min, self.level_max, width)

    def to_dict(self) -> dict:
        if self.variant == "constant":
            return {"type": "constant", "level": self.level}
        return {"type": "horizontal_ramp", "level_min": self.level_min, "level_max": self.level_max}


KernelLike = Union[GaussianKernelSpec, KernelField]


@dataclass(frozen=True)
class DegradationSpec:
    kernel: KernelLike
    scale: int = 2
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        if self.scale not in SCALES:
            raise DegradationError(f"scale must be one of {SCALES}, got {self.scale}")
        if not 0 <= self.seed < 2 ** 64:
            raise DegradationError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "scale": self.scale, "seed": self.seed,
                "kernel": self.kernel.to_dict(), "noise": self.noise.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        try:
            version = d.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise DegradationError(f"schema_version: unsupported value {version}")
            k = dict(d["kernel"])
            kind = k.pop("type")
            if kind == "field":
                kernel: KernelLike = KernelField(**k)
            elif kind in ("isotropic", "anisotropic"):
                kernel = GaussianKernelSpec(variant=kind, **k)
            else:
                raise DegradationError(f"kernel.type: unknown value {kind!r}")
            n = dict(d.get("noise", {"type": "constant", "level": 0.0}))
            noise = NoiseSpec(variant=n.pop("type"), **n)
            return cls(kernel=kernel, scale=int(d["scale"]), noise=noise, seed=int(d.get("seed", 0)))
        except KeyError as exc:
            raise DegradationError(f"missing field {exc.args[0]!r}") from None
        except TypeError as exc:
            raise DegradationError(f"bad field: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DegradationError(f"line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(d)


def _check_size(size: int) -> None:
    if size < 3 or size % 2 == 0:
        raise DegradationError(f"kernel size must be odd and >= 3, got {size}")


def _check_sigma(name: str, value) -> None:
    if value is None or not SIGMA_MIN <= value <= SIGMA_MAX:
        raise DegradationError(f"{name} must lie in [{SIGMA_MIN}, {SIGMA_MAX}], got {value}")


def _check_level(name: str, value) -> None:
    if value is None or not 0.0 <= value <= NOISE_MAX:
        raise DegradationError(f"{name} must lie in [0, {NOISE_MAX}], got {value}")


def _ramp(lo: float, hi: float, width: int) -> np.ndarray:
    if width < 2:
        raise DegradationError("a horizontal ramp needs width >= 2")
    return lo + (hi - lo) * np.arange(width) / (width - 1)


# ---------------------------------------------------------------- kernels

def make_isotropic_kernel(sigma: float, size: int = 21) -> np.ndarray:
    _check_sigma("sigma", sigma)
    _check_size(size)
    c = (size - 1) / 2
    ax = np.arange(size) - c
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def make_anisotropic_kernel(theta: float, lambda1: float, lambda2: float, size: int = 21) -> np.ndarray:
    """Gaussian with covariance ``R(theta) diag(lambda1^2, lambda2^2) R(theta)^T``.

    ``lambda1`` and ``lambda2`` are per-axis standard deviations, so equal values
    reproduce the isotropic kernel. Rows index the vertical (y) offset and
    columns the horizontal (x) offset; ``lambda1`` acts along x when theta = 0.
    """
    _check_sigma("lambda1", lambda1)
    _check_sigma("lambda2", lambda2)
    _check_size(size)
    cos, sin = math.cos(theta), math.sin(theta)
    rot = np.array([[cos, -sin], [sin, cos]])
    cov = rot @ np.diag([lambda1 ** 2, lambda2 ** 2]) @ rot.T
    inv = np.linalg.inv(cov)
    c = (size - 1) / 2
    ax = np.arange(size) - c
    x = ax[None, :]
    y = ax[:, None]
    q = inv[0, 0] * x * x + (inv[0, 1] + inv[1, 0]) * x * y + inv[1, 1] * y * y
    k = np.exp(-0.5 * q)
    return k / k.sum()


def sample_kernel_spec(rng: Rng, variant: str = "isotropic", sigma_range=(0.2, 4.0),
                       size: int = 21) -> GaussianKernelSpec:
    """Draw a kernel the way the training protocol does: sigma ~ U(range),
    or theta ~ U(0, pi) with lambda1, lambda2 ~ U(range)."""
    lo, hi = sigma_range
    if variant == "isotropic":
        return GaussianKernelSpec("isotropic", sigma=float(rng.uniform(lo, hi)), size=size)
    if variant == "anisotropic":
        theta = float(rng.uniform(0.0, math.pi))
        l1, l2 = (float(v) for v in rng.uniform(lo, hi, 2))
        return GaussianKernelSpec("anisotropic", theta=theta, lambda1=l1, lambda2=l2, size=size)
    raise DegradationError(f"unknown kernel variant {variant!r}")


# ------------------------------------------------------------ convolution

def _as_chw(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise DegradationError(f"expected a [C, H, W] image, got shape {img.shape}")
    return img


def _check_kernel_fits(size: int, h: int, w: int) -> None:
    if size > 2 * min(h, w):
        raise DegradationError(f"kernel size {size} exceeds twice the image side {min(h, w)}")


def _reflect_pad(img: np.ndarray, pad: int) -> np.ndarray:
    # numpy's "reflect" excludes the edge sample, i.e. reflect-101.
    return np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")


def convolve(image, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D correlation with reflect-101 borders; output matches input size."""
    img = _as_chw(image)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise DegradationError(f"kernel must be square and odd, got {kernel.shape}")
    _, h, w = img.shape
    _check_kernel_fits(kh, h, w)
    pad = kh // 2
    padded = _reflect_pad(img, pad)
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[:, i:i + h, j:j + w]
    return out


def field_kernels(kfield: KernelField, width: int) -> np.ndarray:
    """One normalized kernel per output column, shape ``[W, size, size]``."""
    return np.stack([make_isotropic_kernel(float(s), kfield.size) for s in kfield.sigmas(width)])


def convolve_spatially_variant(image, kfield: KernelField) -> np.ndarray:
    """Column ``x`` of the output is blurred with the kernel of width ``sigma(x)``."""
    img = _as_chw(image)
    _, h, w = img.shape
    if w < 2:
        raise DegradationError("spatially variant blur needs width >= 2")
    _check_kernel_fits(kfield.size, h, w)
    kernels = field_kernels(kfield, w)
    padded = _reflect_pad(img, kfield.size // 2)
    windows = sliding_window_view(padded, (kfield.size, kfield.size), axis=(1, 2))  # C,H,W,k,k
    return np.einsum("chwij,wij->chw", windows, kernels)


# ---------------------------------------------------------------- bicubic

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``[out_len, in_len]`` interpolation matrix.

    Pixel centres are aligned (output ``x`` samples input ``(x + 0.5) / scale - 0.5``),
    borders are mirrored symmetrically, and when shrinking the cubic kernel is
    stretched by ``1 / scale`` so it also acts as the anti-aliasing filter.
    """
    if scale < 1 and antialias:
        width = 4.0 / scale

        def h(x):
            return scale * cubic(scale * x)
    else:
        width = 4.0
        h = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = h(u[:, None] - idx)
    wts /= wts.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len - 1, -1, -1)])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.reshape(-1)), wts.reshape(-1))
    return mat


def bicubic_resize(image, scale: int, direction: str = "down") -> np.ndarray:
    img = _as_chw(image)
    if scale not in SCALES:
        raise DegradationError(f"scale must be one of {SCALES}, got {scale}")
    _, h, w = img.shape
    if direction == "down":
        oh, ow, factor = h // scale, w // scale, 1.0 / scale
    elif direction == "up":
        oh, ow, factor = h * scale, w * scale, float(scale)
    else:
        raise DegradationError(f"direction must be 'down' or 'up', got {direction!r}")
    if oh < 4 or ow < 4:
        raise DegradationError(f"resized image {oh}x{ow} is smaller than 4x4")
    mh = resize_matrix(h, oh, factor)
    mw = resize_matrix(w, ow, factor)
    return np.einsum("oh,chw,pw->cop", mh, img, mw)


# ------------------------------------------------------------------ noise

def add_awgn(image, level, rng: Rng) -> np.ndarray:
    """Add N(0, (level/255)^2) noise and clip to [0, 1].

    ``level`` is a scalar or a per-column array of length W.
    """
    img = _as_chw(image)
    levels = np.asarray(level, dtype=np.float64)
    if np.any(levels < 0) or np.any(levels > NOISE_MAX):
        raise DegradationError(f"noise level must lie in [0, {NOISE_MAX}]")
    if levels.ndim == 0 and float(levels) == 0.0:
        return img.copy()
    if levels.ndim == 1 and levels.shape[0] != img.shape[2]:
        raise DegradationError(f"ramp has {levels.shape[0]} levels for width {img.shape[2]}")
    noise = rng.normal(img.shape) * (levels / 255.0)
    return np.clip(img + noise, 0.0, 1.0)


# ---------------------------------------------------------------- pipeline

def blur(hr, kernel: KernelLike) -> np.ndarray:
    if isinstance(kernel, KernelField):
        return convolve_spatially_variant(hr, kernel)
    return convolve(hr, kernel.make())


def degrade(hr, spec: DegradationSpec) -> np.ndarray:
    """Blur, bicubic-downsample by ``spec.scale``, then add noise."""
    img = _as_chw(hr)
    _, h, w = img.shape
    if h % spec.scale or w % spec.scale:
        raise DegradationError(f"image {h}x{w} not divisible by scale {spec.scale}; crop first")
    low = bicubic_resize(blur(img, spec.kernel), spec.scale, "down")
    rng = Rng(spec.seed).derive(NOISE_STREAM)
    return add_awgn(low, spec.noise.levels(low.shape[2]), rng)
