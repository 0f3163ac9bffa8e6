"""Finite-difference sweep over every differentiable op and composed loss.

Each case builds a scalar function and its inputs from a seeded stream. Ops
with tensor outputs are reduced by a fixed random weighting so that every
output coordinate contributes to the checked scalar. Inputs to ``abs``,
``leaky_relu`` and the L1 terms are kept away from the kink at zero.

Finite differences are always evaluated in 64-bit; in 32-bit rows only the
analytic gradient is 32-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import network as net
from .autodiff import Tensor
from .rng import Rng

TOLERANCE = {"float32": (1e-3, 1e-3), "float64": (1e-5, 1e-6)}  # dtype -> (eps, tol)
SHAPES_PER_CASE = 3


@dataclass
class CheckRow:
    case: str
    variant: int
    dtype: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def row(self) -> dict:
        return {"case": self.case, "variant": self.variant, "dtype": self.dtype,
                "rel_error": f"{self.error:.3e}", "tol": f"{self.tol:.0e}",
                "status": "PASS" if self.passed else "FAIL"}


CSV_FIELDS = ("case", "variant", "dtype", "rel_error", "tol", "status")


def _away_from_zero(rng: Rng, shape, lo=0.1, hi=1.0) -> np.ndarray:
    mag = rng.uniform(lo, hi, shape)
    sign = np.where(rng.integers(0, 2, shape) == 1, 1.0, -1.0)
    return mag * sign


def _weighted(op: Callable[..., Tensor], out_shape, rng: Rng):
    w = Tensor(rng.normal(out_shape))

    def f(*xs):
        return ad.sum(ad.mul(op(*xs), w))
    return f


def _unary(op, gen):
    def build(rng: Rng, k: int):
        shape = [(3, 4), (2, 3, 5), (1, 2, 3, 4)][k]
        x = gen(rng, shape)
        out = op(Tensor(x)).shape
        return _weighted(op, out, rng), [x]
    return build


def _binary(op):
    def build(rng: Rng, k: int):
        shape = [(4,), (3, 5), (2, 3, 4)][k]
        a, b = rng.normal(shape), rng.normal(shape)
        return _weighted(op, shape, rng), [a, b]
    return build


def _normal(rng, shape):
    return rng.normal(shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _reduce(op, axes):
    def build(rng: Rng, k: int):
        shape = [(5,), (3, 4), (2, 3, 4)][k]
        ax = [None, axes[0], axes[1]][k]
        x = rng.normal(shape)
        out = op(Tensor(x), ax).shape
        return _weighted(lambda t: op(t, ax), out, rng), [x]
    return build


def _lse(rng, k):
    shape, axis = [((5,), 0), ((3, 4), 1), ((4, 3), 0)][k]
    x = rng.normal(shape)
    out = ad.log_sum_exp(Tensor(x), axis).shape
    return _weighted(lambda t: ad.log_sum_exp(t, axis), out, rng), [x]


def _reshape(rng, k):
    shape, new = [((2, 6), (3, 4)), ((2, 3, 4), (6, 4)), ((24,), (2, 2, 6))][k]
    return _weighted(lambda t: ad.reshape(t, new), new, rng), [rng.normal(shape)]


def _transpose(rng, k):
    shape, axes = [((3, 4), None), ((2, 3, 4), (2, 0, 1)), ((2, 3, 4, 2), (0, 2, 1, 3))][k]
    x = rng.normal(shape)
    out = ad.transpose(Tensor(x), axes).shape
    return _weighted(lambda t: ad.transpose(t, axes), out, rng), [x]


def _concat(rng, k):
    axis = [0, 1, 2][k]
    a = rng.normal((2, 3, 4))
    shape_b = list(a.shape)
    shape_b[axis] = 1 + k
    b = rng.normal(tuple(shape_b))
    out = ad.concat([Tensor(a), Tensor(b)], axis).shape
    return _weighted(lambda x, y: ad.concat([x, y], axis), out, rng), [a, b]


def _diagonal(rng, k):
    n = [1, 3, 5][k]
    return _weighted(ad.diagonal, (n,), rng), [rng.normal((n, n))]


def _diag(rng, k):
    n = [1, 3, 5][k]
    return _weighted(ad.diag, (n, n), rng), [rng.normal((n,))]


def _take_rows(rng, k):
    shape, index = [((4, 3), [0, 2]), ((3, 2, 2), [2, 2, 0, 1]), ((5,), [4, 0, 0, 3])][k]
    out = (len(index),) + shape[1:]
    return _weighted(lambda t: ad.take_rows(t, index), out, rng), [rng.normal(shape)]


def _matmul(rng, k):
    m, n, p = [(1, 3, 2), (3, 4, 5), (6, 2, 3)][k]
    return _weighted(ad.matmul, (m, p), rng), [rng.normal((m, n)), rng.normal((n, p))]


def _linear(rng, k):
    m, n, p = [(1, 3, 2), (4, 5, 3), (6, 2, 4)][k]
    return (_weighted(ad.linear, (m, p), rng),
            [rng.normal((m, n)), rng.normal((n, p)), rng.normal((p,))])


def _l2n(rng, k):
    shape = [(1, 3), (4, 5), (6, 2)][k]
    return _weighted(ad.l2_normalize, shape, rng), [rng.normal(shape)]


def _conv(rng, k):
    (n, c, h, w), (o, kh), pad = [((1, 1, 4, 4), (1, 3), 1),
                                  ((2, 2, 5, 4), (3, 3), 0),
                                  ((1, 3, 4, 5), (2, 1), 0)][k]
    x, wt, b = rng.normal((n, c, h, w)), rng.normal((o, c, kh, kh)), rng.normal((o,))
    out = ad.conv2d(Tensor(x), Tensor(wt), Tensor(b), pad).shape
    return _weighted(lambda a, ww, bb: ad.conv2d(a, ww, bb, pad), out, rng), [x, wt, b]


def _shuffle(rng, k):
    shape, r = [((1, 4, 2, 2), 2), ((2, 8, 1, 3), 2), ((1, 9, 2, 1), 3)][k]
    out = ad.pixel_shuffle(Tensor(np.zeros(shape)), r).shape
    return _weighted(lambda t: ad.pixel_shuffle(t, r), out, rng), [rng.normal(shape)]


def _unshuffle(rng, k):
    shape, r = [((1, 1, 4, 4), 2), ((2, 2, 2, 6), 2), ((1, 1, 3, 6), 3)][k]
    out = ad.pixel_unshuffle(Tensor(np.zeros(shape)), r).shape
    return _weighted(lambda t: ad.pixel_unshuffle(t, r), out, rng), [rng.normal(shape)]


def _pool(rng, k):
    shape, p = [((1, 1, 4, 4), 2), ((2, 3, 6, 3), 3), ((1, 2, 2, 4), 1)][k]
    out = ad.avg_pool2d(Tensor(np.zeros(shape)), p).shape
    return _weighted(lambda t: ad.avg_pool2d(t, p), out, rng), [rng.normal(shape)]


# ------------------------------------------------------------------ losses

_LOSS_SHAPES = [(2, 4), (5, 3), (8, 4)]
# Below about 0.2 the softmax saturates and some gradient coordinates sink to
# the finite-difference noise floor, where a per-coordinate relative error
# means nothing.
_TAUS = [1.0, 0.5, 0.2]


def _feature_loss(loss, n_sets: int, taus=None):
    """Loss of raw rows; normalization happens inside so the unit-norm precondition holds."""
    def build(rng: Rng, k: int):
        shape = _LOSS_SHAPES[k]
        xs = [rng.normal(shape) for _ in range(n_sets)]
        extra = (taus[k],) if taus else ()

        def f(*ts):
            return loss(*[ad.l2_normalize(t) for t in ts], *extra)
        return f, xs
    return build


def _penalty_case(rng: Rng, k: int):
    shape = _LOSS_SHAPES[k]
    w = Tensor(rng.normal((shape[0],)))

    def f(a, b):
        return ad.sum(ad.mul(L.penalty(ad.l2_normalize(a), ad.l2_normalize(b)), w))
    return f, [rng.normal(shape), rng.normal(shape)]


def _hr_recon(rng: Rng, k: int):
    cfg = net.NetConfig(channels=4, num_blocks=1, proj_dim=8, scale=2, dec_blocks=[0, 1, 0][k], pool=2)
    size = [2, 4, 3][k] * cfg.scale
    params = net.init_params(cfg, seed=int(rng.integers(0, 2 ** 31)), dtype=ad.get_default_dtype())
    fmap = rng.normal((1, cfg.channels, size, size))
    recon = net.reconstruct(Tensor(fmap), params, cfg).data
    # Target sits 0.01 to 0.05 above the reconstruction on every pixel: far from
    # the |.| kink, small loss (so little round-off), and one residual sign so no
    # gradient cancels to exactly zero. Mixed signs are covered by l1_loss.
    i_h = recon + rng.uniform(0.01, 0.05, recon.shape)
    out_w, out_b = params["drec.out.w"], params["drec.out.b"]

    def f(target, fm, w, b):
        params.tensors["drec.out.w"], params.tensors["drec.out.b"] = w, b
        return L.hr_recon_loss(target, fm, params, cfg)
    return f, [i_h, fmap, out_w.data.copy(), out_b.data.copy()]


def _l1(rng: Rng, k: int):
    shape = [(4,), (2, 3), (1, 3, 2, 2)][k]
    b = rng.normal(shape)
    return l1_fn, [b + _away_from_zero(rng, shape), b]


def l1_fn(a, b):
    return L.l1_loss(a, b)


CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "neg": _unary(ad.neg, _normal),
    "scale": _unary(lambda t: ad.scale(t, -1.7), _normal),
    "add_scalar": _unary(lambda t: ad.add_scalar(t, 0.3), _normal),
    "exp": _unary(ad.exp, _normal),
    "log": _unary(ad.log, _positive),
    "abs": _unary(ad.abs, _away_from_zero),
    "leaky_relu": _unary(lambda t: ad.leaky_relu(t, 0.2), _away_from_zero),
    "sum": _reduce(ad.sum, (1, (0, 2))),
    "mean": _reduce(ad.mean, (0, (1, 2))),
    "log_sum_exp": _lse,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "diagonal": _diagonal,
    "diag": _diag,
    "take_rows": _take_rows,
    "matmul": _matmul,
    "linear": _linear,
    "l2_normalize": _l2n,
    "conv2d": _conv,
    "pixel_shuffle": _shuffle,
    "pixel_unshuffle": _unshuffle,
    "avg_pool2d": _pool,
    "contrastive_nce": _feature_loss(L.contrastive_nce, 2, _TAUS),
    "bidirectional_contrastive": _feature_loss(L.bidirectional_contrastive, 2, _TAUS),
    "penalty": _penalty_case,
    "pushpull_contrastive": _feature_loss(L.pushpull_contrastive, 3),
    "srnce": _feature_loss(L.srnce, 3),
    "srnce_stop_grad": None,  # filled below, checks only f_s and f_l_bar
    "srnce_tau": _feature_loss(lambda h, s, l_, tau: L.srnce(h, s, l_, tau=tau), 3, [0.5, 2.0, 0.2]),
    "l1_loss": _l1,
    "hr_recon_loss": _hr_recon,
}


def _srnce_stop_grad(rng: Rng, k: int):
    shape = _LOSS_SHAPES[k]
    h = ad.l2_normalize(Tensor(rng.normal(shape)))

    def f(s, l_):
        return L.srnce(h, ad.l2_normalize(s), ad.l2_normalize(l_), anchor_stop_grad=True)
    return f, [rng.normal(shape), rng.normal(shape)]


CASES["srnce_stop_grad"] = _srnce_stop_grad


def check_case(name: str, variant: int, dtype: str, seed: int = 0) -> CheckRow:
    eps, tol = TOLERANCE[dtype]
    with ad.precision(np.dtype(dtype)):
        rng = Rng(seed).derive(sorted(CASES).index(name), variant)
        f, arrays = CASES[name](rng, variant)
        inputs = [Tensor(np.asarray(a, dtype=dtype)) for a in arrays]
        err = ad.grad_check(f, inputs, eps, numeric_dtype=np.float64)
    return CheckRow(name, variant, dtype, err, tol)


def run_suite(dtypes=("float64", "float32"), seed: int = 0, cases=None, fault=()) -> list[CheckRow]:
    """Every case at every dtype and shape variant; ``fault`` names ops to corrupt."""
    rows = []
    with ad.inject_fault(*fault):
        for dtype in dtypes:
            for name in cases or CASES:
                for k in range(SHAPES_PER_CASE):
                    rows.append(check_case(name, k, dtype, seed))
    return rows


if __name__ == "__main__":  # pragma: no cover
    t0 = time.time()
    for r in run_suite():
        print(r.row())
    print(f"{time.time() - t0:.1f}s")
