"""Adam, step-decay schedule, patch sampling and the training loop.

All randomness of step ``t`` comes from ``Rng(seed).derive(t, b)`` for patch
``b``; resuming therefore needs only the step counter, the parameters and the
optimizer moments, which the checkpoint stores.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import network as net
from .degradation import (DegradationSpec, GaussianKernelSpec, NoiseSpec, bicubic_resize, degrade,
                          sample_kernel_spec)
from .rng import Rng

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    def __init__(self, term: str, step: int):
        self.term = term
        self.step = step
        super().__init__(f"non-finite loss term {term!r} at step {step}")


# ------------------------------------------------------------------- Adam

@dataclass
class OptimConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    halve_every: int = 200

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr0 <= 0 or self.halve_every < 1:
            raise ValueError("lr0 must be positive and halve_every >= 1")


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0


def _named(params) -> list[tuple[str, ad.Tensor]]:
    if isinstance(params, net.ModelParams):
        return list(params.items())
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), t) for i, t in enumerate(params)]


def adam_step(params, state: AdamState, cfg: OptimConfig, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place, using each tensor's ``.grad``.

    Tensors whose ``.grad`` is None did not take part in the loss and are left
    untouched, moments included.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in _named(params):
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ad.DimensionError("adam_step", f"grad {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """``lr0 * 0.5 ** floor(epoch / halve_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


# --------------------------------------------------------------- sampling

AUGMENTS = ("rot90", "rot180", "rot270", "hflip")


@dataclass
class TrainConfig:
    batch: int = 8
    patch_lr: int = 32
    scale: int = 2
    sigma_range: tuple[float, float] = (0.2, 4.0)
    noise_range: tuple[float, float] = (0.0, 75.0)
    aniso_prob: float = 0.0
    kernel_size: int = 21
    augment: tuple[str, ...] = AUGMENTS
    steps: int = 500
    steps_per_epoch: int = 100
    seed: int = 0
    staged: str = "joint"
    cde_steps: int = 0
    ckpt_every: int = 0
    workers: int = 1
    schema_version: int = 1

    def __post_init__(self):
        self.sigma_range = tuple(self.sigma_range)
        self.noise_range = tuple(self.noise_range)
        self.augment = tuple(self.augment)
        bad = set(self.augment) - set(AUGMENTS)
        if bad:
            raise ValueError(f"unknown augmentations {sorted(bad)}")
        if self.staged not in ("joint", "cde_then_cfr"):
            raise ValueError(f"staged must be 'joint' or 'cde_then_cfr', got {self.staged!r}")
        if self.batch < 1 or self.patch_lr < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch, patch_lr and steps_per_epoch must be positive")

    @property
    def patch_hr(self) -> int:
        return self.patch_lr * self.scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        d["noise_range"] = list(self.noise_range)
        d["augment"] = list(self.augment)
        return d


@dataclass
class Batch:
    i_h: np.ndarray  # B, 3, s*p, s*p
    i_l: np.ndarray  # B, 3, p, p
    u_l: np.ndarray  # B, 3, s*p, s*p
    specs: list[DegradationSpec]
    crops: list[tuple[int, int, int, int, bool]]  # image, y, x, quarter turns, flipped


def dihedral(img: np.ndarray, turns: int, flip: bool) -> np.ndarray:
    """Rotate ``[C, H, W]`` by ``turns`` quarter turns counter-clockwise, then mirror left-right."""
    out = np.rot90(img, turns, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def _sample_spec(rng: Rng, cfg: TrainConfig) -> DegradationSpec:
    if cfg.aniso_prob > 0 and rng.uniform(0.0, 1.0) < cfg.aniso_prob:
        kernel = sample_kernel_spec(rng, "anisotropic", cfg.sigma_range, cfg.kernel_size)
    else:
        lo, hi = cfg.sigma_range
        kernel = GaussianKernelSpec("isotropic", sigma=float(rng.uniform(lo, hi)), size=cfg.kernel_size)
    lo, hi = cfg.noise_range
    noise = NoiseSpec("constant", level=float(rng.uniform(lo, hi)))
    return DegradationSpec(kernel=kernel, scale=cfg.scale, noise=noise, seed=rng.next_u64())


def _sample_patch(hr_images, cfg: TrainConfig, rng: Rng):
    idx = int(rng.integers(0, len(hr_images)))
    img = hr_images[idx]
    size = cfg.patch_hr
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {idx} ({h}x{w}) smaller than the {size}x{size} crop")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    rots = [0] + [k for k, name in ((1, "rot90"), (2, "rot180"), (3, "rot270")) if name in cfg.augment]
    turns = rots[int(rng.integers(0, len(rots)))]
    flip = "hflip" in cfg.augment and bool(rng.integers(0, 2))
    i_h = dihedral(img[:, y:y + size, x:x + size], turns, flip)
    spec = _sample_spec(rng, cfg)
    i_l = degrade(i_h, spec)
    u_l = bicubic_resize(i_l, cfg.scale, "up")
    return i_h, i_l, u_l, spec, (idx, y, x, turns, flip)


def sample_batch(hr_images, cfg: TrainConfig, step: int, rng: Rng | None = None) -> Batch:
    """Patches for ``step``; a pure function of (images, cfg, seed, step)."""
    base = (rng or Rng(cfg.seed)).derive(step)
    streams = [base.derive(b) for b in range(cfg.batch)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(lambda r: _sample_patch(hr_images, cfg, r), streams))
    else:
        parts = [_sample_patch(hr_images, cfg, r) for r in streams]
    i_h, i_l, u_l, specs, crops = zip(*parts)
    return Batch(np.stack(i_h), np.stack(i_l), np.stack(u_l), list(specs), list(crops))


# ------------------------------------------------------------------ losses

def _batch_mean(values: list[ad.Tensor]) -> ad.Tensor:
    return ad.mean(ad.concat([ad.reshape(v, (1,)) for v in values]))


def compute_terms(out: net.TrainOutputs, i_h: ad.Tensor, cfg: L.LossConfig, cde_only: bool = False):
    terms = {"l_bc": _batch_mean([L.bidirectional_contrastive(h, l_, cfg.tau)
                                  for h, l_ in zip(out.fbar_h, out.fbar_l)])}
    if cde_only:
        return terms
    terms["l_srnce"] = _batch_mean([L.srnce(h, s, l_, cfg.anchor_stop_grad, cfg.tau_srnce)
                                    for h, s, l_ in zip(out.f_h, out.f_s, out.fbar_l)])
    terms["l_rec_sr"] = L.l1_loss(i_h, out.i_s)
    terms["l_rec_hr"] = L.l1_loss(i_h, out.recon)
    return terms


# ----------------------------------------------------------------- trainer

class Trainer:
    """Owns parameters, optimizer state and the step counter of one run."""

    def __init__(self, images, net_cfg: net.NetConfig, train_cfg: TrainConfig,
                 optim_cfg: OptimConfig | None = None, loss_cfg: L.LossConfig | None = None,
                 params: net.ModelParams | None = None, init_seed: int | None = None):
        if net_cfg.scale != train_cfg.scale:
            raise ValueError("network and training scale differ")
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        self.net_cfg = net_cfg
        self.train_cfg = train_cfg
        self.optim_cfg = optim_cfg or OptimConfig()
        self.loss_cfg = loss_cfg or L.LossConfig()
        seed = train_cfg.seed if init_seed is None else init_seed
        self.params = params or net.init_params(net_cfg, seed)
        self.adam = AdamState()
        self.step = 0

    def lr(self) -> float:
        return lr_at(self.step // self.train_cfg.steps_per_epoch, self.optim_cfg)

    def train_step(self) -> L.LossReport:
        batch = sample_batch(self.images, self.train_cfg, self.step)
        dtype = next(iter(self.params)).dtype
        i_h = ad.Tensor(batch.i_h.astype(dtype))
        u_l = ad.Tensor(batch.u_l.astype(dtype))
        cde_only = self.train_cfg.staged == "cde_then_cfr" and self.step < self.train_cfg.cde_steps
        if cde_only:
            fmap_l, fmap_h = net.encode_cde(u_l, i_h, self.params, self.net_cfg)
            out = net.TrainOutputs(fmap_l, fmap_h, None, None, None, None,
                                   net.project(fmap_l, self.params, "proj_l", self.net_cfg, "lr_cde"),
                                   net.project(fmap_h, self.params, "proj_h", self.net_cfg, "hr_cde"),
                                   [], [])
        else:
            out = net.forward_train(u_l, i_h, self.params, self.net_cfg)
        terms = compute_terms(out, i_h, self.loss_cfg, cde_only)
        total, report = L.total_cfrs(terms, self.loss_cfg, self.step)
        report.lr = self.lr()
        bad = report.first_nonfinite()
        if bad is not None:
            raise NumericError(bad, self.step)
        self.params.zero_grad()
        ad.backward(total)
        adam_step(self.params, self.adam, self.optim_cfg, report.lr)
        self.step += 1
        return report

    def run(self, steps: int | None = None, log_path=None, ckpt_path=None, ckpt_every: int | None = None):
        steps = self.train_cfg.steps if steps is None else steps
        every = self.train_cfg.ckpt_every if ckpt_every is None else ckpt_every
        reports = []
        for _ in range(steps):
            report = self.train_step()
            reports.append(report)
            if log_path is not None:
                L.append_log(log_path, report)
            if report.step % 50 == 0:
                log.info("step %d total %.4f", report.step, report.total)
            if ckpt_path is not None and every and self.step % every == 0:
                self.save(ckpt_path)
        if ckpt_path is not None:
            self.save(ckpt_path)
        return reports

    # -------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        extra = OrderedDict()
        for name, m in self.adam.m.items():
            extra[f"adam.m/{name}"] = m
            extra[f"adam.v/{name}"] = self.adam.v[name]
        meta = {"step": self.step, "adam_step": self.adam.step,
                "rng": {"seed": self.train_cfg.seed, "next_step": self.step},
                "train": self.train_cfg.to_dict(), "optim": asdict(self.optim_cfg),
                "loss": asdict(self.loss_cfg)}
        net.save_checkpoint(path, self.params, extra, meta)

    @classmethod
    def resume(cls, path, images) -> "Trainer":
        params, meta, extra = net.load_checkpoint(path)
        trainer = cls(images, params.config, TrainConfig(**meta["train"]), OptimConfig(**meta["optim"]),
                      L.LossConfig(**meta["loss"]), params=params)
        trainer.step = int(meta["step"])
        trainer.adam.step = int(meta["adam_step"])
        for key, arr in extra.items():
            kind, name = key.split("/", 1)
            if kind == "adam.m":
                trainer.adam.m[name] = arr.copy()
            elif kind == "adam.v":
                trainer.adam.v[name] = arr.copy()
        return trainer


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ValueError("series shorter than the window")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def load_train_config(path) -> tuple[net.NetConfig, TrainConfig, OptimConfig, L.LossConfig, dict]:
    """Parse a training JSON with ``net``, ``train``, ``optim``, ``loss`` and ``data`` sections."""
    doc = json.loads(Path(path).read_text())
    version = doc.get("schema_version", 1)
    if version != 1:
        raise ValueError(f"schema_version: unsupported value {version}")
    train = TrainConfig(**doc.get("train", {}))
    net_d = dict(doc.get("net", {}))
    net_d.setdefault("scale", train.scale)
    return (net.NetConfig(**net_d), train, OptimConfig(**doc.get("optim", {})),
            L.LossConfig(**doc.get("loss", {})), doc.get("data", {}))
