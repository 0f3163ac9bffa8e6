"""Descent-mechanism experiment on free feature vectors.

A fixed anchor set ``f_h`` and a fixed LR feature set ``f_l_bar`` (a noisy copy
of the anchors, standing in for features that lost detail) are drawn from a
seed. The positives ``f_s`` are free parameters that start at ``f_l_bar``, the
way an untrained SR output resembles its LR input. They are re-normalized on
every forward pass and optimized against one of three objectives. The recorded
curve is the mean anchor-positive alignment ``mean_m(f_h^m . f_s^m)`` after
every step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .rng import Rng

MODES = ("infonce", "srnce", "pushpull")
CSV_FIELDS = ("step", "mode", "alignment", "loss")


@dataclass(frozen=True)
class AblationConfig:
    m: int = 64
    s: int = 16
    steps: int = 200
    lr: float = 0.5
    seed: int = 0
    lowres_noise: float = 0.6  # how far f_l_bar strays from f_h
    init_noise: float = 0.0  # perturbation of the f_s start around f_l_bar
    tau_infonce: float = 1.0
    tau_srnce: float = 1.0

    def __post_init__(self):
        if self.m < 1 or self.s < 2 or self.steps < 1:
            raise ValueError("need m >= 1, s >= 2 and steps >= 1")
        if self.lowres_noise < 0 or self.init_noise < 0:
            raise ValueError("noise scales must be non-negative")
        if self.lr <= 0 or self.tau_infonce <= 0 or self.tau_srnce <= 0:
            raise ValueError("lr and temperatures must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def make_problem(cfg: AblationConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(f_h, f_l_bar, f_s0)``; the first two are unit rows, ``f_s0`` is raw."""
    root = Rng(cfg.seed)
    f_h = _unit(root.derive(0).normal((cfg.m, cfg.s)))
    f_l = _unit(f_h + cfg.lowres_noise * root.derive(1).normal((cfg.m, cfg.s)))
    f_s0 = f_l + cfg.init_noise * root.derive(2).normal((cfg.m, cfg.s))
    return f_h, f_l, f_s0


def objective(mode: str, f_h: Tensor, f_s: Tensor, f_l: Tensor, cfg: AblationConfig) -> Tensor:
    if mode == "infonce":
        # Reduced by 1/M so every objective carries the same per-row scale.
        return ad.scale(L.contrastive_nce(f_h, f_s, cfg.tau_infonce), 1.0 / cfg.m)
    if mode == "pushpull":
        return L.pushpull_contrastive(f_h, f_s, f_l, cfg.tau_srnce)
    if mode == "srnce":
        return L.srnce(f_h, f_s, f_l, tau=cfg.tau_srnce)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def alignment(f_h: np.ndarray, f_s: np.ndarray) -> float:
    return float(np.mean(np.sum(f_h * _unit(f_s), axis=1)))


def run(mode: str, cfg: AblationConfig | None = None) -> list[dict]:
    """Plain gradient descent on the raw ``f_s``; one row per step, step 0 is the start."""
    cfg = cfg or AblationConfig()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    with ad.precision(np.float64):
        f_h_np, f_l_np, raw = make_problem(cfg)
        f_h, f_l = Tensor(f_h_np), Tensor(f_l_np)
        param = Tensor(raw.copy(), requires_grad=True)
        rows = []
        for step in range(cfg.steps + 1):
            param.grad = None
            loss = objective(mode, f_h, ad.l2_normalize(param), f_l, cfg)
            rows.append({"step": step, "mode": mode,
                         "alignment": alignment(f_h_np, param.data), "loss": loss.item()})
            if step == cfg.steps:
                break
            loss.backward()
            param.data -= cfg.lr * param.grad
    return rows


def curves_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "alignment": repr(r["alignment"]), "loss": repr(r["loss"])})
    return buf.getvalue()
