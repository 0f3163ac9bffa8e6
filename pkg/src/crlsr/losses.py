"""Contrastive and reconstruction objectives.

Feature arguments are ``[M, S]`` tensors of unit-norm rows (or objects with a
``vectors`` attribute holding one). Row ``m`` of every argument refers to the
same spatial location, so index-matched rows are positives and all other rows
of the same image are negatives.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def _vec(x) -> Tensor:
    return getattr(x, "vectors", x)


def _check_pair(op: str, *sets: Tensor) -> None:
    ref = sets[0]
    if ref.data.ndim != 2:
        raise DimensionError(op, f"feature sets must be [M, S], got {ref.shape}")
    for other in sets[1:]:
        if other.shape != ref.shape:
            raise DimensionError(op, f"feature sets {ref.shape} and {other.shape} differ", ["M", "S"])


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot products ``[M]``."""
    return ad.sum(ad.mul(a, b), axes=1)


def contrastive_nce(anchor, other, tau: float = 0.07) -> Tensor:
    """Noise-contrastive term summed (not averaged) over the M anchors."""
    a, b = _vec(anchor), _vec(other)
    _check_pair("contrastive_nce", a, b)
    logits = ad.scale(ad.matmul(a, ad.transpose(b)), 1.0 / tau)
    return ad.sum(ad.sub(ad.log_sum_exp(logits, axis=1), ad.diagonal(logits)))


def bidirectional_contrastive(f_h_bar, f_l_bar, tau: float = 0.07) -> Tensor:
    return ad.add(contrastive_nce(f_h_bar, f_l_bar, tau), contrastive_nce(f_l_bar, f_h_bar, tau))


def penalty(f_h, f_l_bar) -> Tensor:
    """``p_m = 1 - f_h^m . f_l_bar^m``, in [0, 2] for unit rows."""
    h, l_ = _vec(f_h), _vec(f_l_bar)
    _check_pair("penalty", h, l_)
    return ad.add_scalar(ad.neg(rowdot(h, l_)), 1.0)


def _conditional(h: Tensor, s: Tensor, l_: Tensor, p: Tensor | None, tau: float) -> Tensor:
    m = h.shape[0]
    sim = ad.matmul(h, ad.transpose(s))  # sim[m, j] = f_h^m . f_s^j
    push = ad.add_scalar(ad.neg(rowdot(s, l_)), 1.0)
    if p is not None:
        sim = ad.sub(sim, ad.diag(p))
        push = ad.sub(push, p)
    if tau != 1.0:
        sim = ad.scale(sim, 1.0 / tau)
        push = ad.scale(push, 1.0 / tau)
    push_col = ad.reshape(push, (m, 1))
    pos_col = ad.reshape(ad.diagonal(sim), (m, 1))
    numer = ad.log_sum_exp(ad.concat([pos_col, push_col], axis=1), axis=1)
    denom = ad.log_sum_exp(ad.concat([sim, push_col], axis=1), axis=1)
    return ad.mean(ad.sub(denom, numer))


def pushpull_contrastive(f_h, f_s, f_l_bar, tau: float = 1.0) -> Tensor:
    """InfoNCE over (anchor f_h, positive f_s) with an extra numerator term
    ``exp(1 - f_s^m . f_l_bar^m)`` that pushes f_s away from the LR feature."""
    h, s, l_ = _vec(f_h), _vec(f_s), _vec(f_l_bar)
    _check_pair("pushpull_contrastive", h, s, l_)
    return _conditional(h, s, l_, None, tau)


def srnce(f_h, f_s, f_l_bar, anchor_stop_grad: bool = False, tau: float = 1.0) -> Tensor:
    """Conditional contrastive loss: the push-pull loss with ``p_m`` subtracted
    from both numerator exponents.

    With ``anchor_stop_grad`` no gradient reaches ``f_h``; the penalty is
    computed from the same (detached) anchor.
    """
    h, s, l_ = _vec(f_h), _vec(f_s), _vec(f_l_bar)
    _check_pair("srnce", h, s, l_)
    if anchor_stop_grad:
        h = h.detach()
    return _conditional(h, s, l_, penalty(h, l_), tau)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error."""
    return ad.mean(ad.abs(ad.sub(a, b)))


def hr_recon_loss(i_h: Tensor, f_h_map: Tensor, params, cfg) -> Tensor:
    from .network import reconstruct

    return l1_loss(i_h, reconstruct(f_h_map, params, cfg))


# ------------------------------------------------------------------ totals

@dataclass
class LossConfig:
    tau: float = 0.07
    tau_srnce: float = 1.0
    w_bc: float = 1.0
    w_srnce: float = 1.0
    w_sr: float = 1.0
    w_hr: float = 1.0
    anchor_stop_grad: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.tau_srnce <= 0:
            raise ValueError("temperatures must be positive")
        if min(self.w_bc, self.w_srnce, self.w_sr, self.w_hr) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_bc: float
    l_srnce: float
    l_rec_sr: float
    l_rec_hr: float
    total: float
    step: int = 0
    lr: float = 0.0

    CSV_FIELDS = ("step", "l_bc", "l_srnce", "l_rec_sr", "l_rec_hr", "total", "lr")

    def row(self) -> dict:
        d = asdict(self)
        return {k: (d[k] if k == "step" else repr(float(d[k]))) for k in self.CSV_FIELDS}

    def terms(self) -> dict[str, float]:
        return {"l_bc": self.l_bc, "l_srnce": self.l_srnce, "l_rec_sr": self.l_rec_sr,
                "l_rec_hr": self.l_rec_hr}

    def first_nonfinite(self) -> str | None:
        for name, value in {**self.terms(), "total": self.total}.items():
            if not math.isfinite(value):
                return name
        return None


def total_cfrs(terms: dict[str, Tensor], cfg: LossConfig, step: int = 0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the four terms plus a report of their values.

    ``terms`` maps ``l_bc``, ``l_srnce``, ``l_rec_sr`` and ``l_rec_hr`` to
    scalar tensors; missing terms count as zero.
    """
    weights = {"l_bc": cfg.w_bc, "l_srnce": cfg.w_srnce, "l_rec_sr": cfg.w_sr, "l_rec_hr": cfg.w_hr}
    total = None
    values = {}
    for name, w in weights.items():
        t = terms.get(name)
        values[name] = 0.0 if t is None else t.item()
        if t is None or w == 0.0:
            continue
        part = ad.scale(t, w)
        total = part if total is None else ad.add(total, part)
    if total is None:
        raise ValueError("no loss term carries a positive weight")
    return total, LossReport(total=total.item(), step=step, **values)


def append_log(path, report: LossReport) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LossReport.CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(report.row())


def read_log(path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
