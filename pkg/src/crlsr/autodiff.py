"""Dense tensors with reverse-mode automatic differentiation.

Only the operator set needed by the super-resolution graph is provided. Shapes
are explicit: apart from the bias add inside ``conv2d`` and ``linear`` there is
no broadcasting, and mismatches raise :class:`DimensionError`.

Every differentiable op appends a record (inputs, backward rule, creation
index) to the output tensor. ``backward`` gathers the records reachable from
the loss into a :class:`Tape` ordered by creation index and walks it in
reverse, so each record is visited exactly once and fan-out gradients add up.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_faults: set[str] = set()
_record_ids = itertools.count()

# Multiplier applied to a corrupted backward rule (negative-control testing).
FAULT_FACTOR = 1.25


class DimensionError(ValueError):
    """Shape contract violation; ``axes`` names the offending axes."""

    def __init__(self, op: str, message: str, axes: Sequence[str] = ()):
        self.op = op
        self.axes = tuple(axes)
        super().__init__(f"{op}: {message}")


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating-point precision."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def inject_fault(*ops: str) -> Iterator[None]:
    """Corrupt the backward rule of the named ops while the context is active."""
    _faults.update(ops)
    try:
        yield
    finally:
        _faults.difference_update(ops)


@dataclass(eq=False)
class Record:
    index: int
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], tuple]


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "record", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = np.dtype(dtype) if dtype is not None else None
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data, order="C")
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype, order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.record: Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if op in _faults:
            backward_fn = _corrupt(backward_fn)
        out.record = Record(next(_record_ids), op, inputs, backward_fn)
    return out


def _corrupt(fn):
    def wrapped(g):
        return tuple(None if r is None else r * FAULT_FACTOR for r in fn(g))
    return wrapped


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        bad = [f"axis {i}" for i, (x, y) in enumerate(itertools.zip_longest(a.shape, b.shape)) if x != y]
        raise DimensionError(op, f"shapes {a.shape} and {b.shape} differ", bad)


@dataclass
class Tape:
    """Operation records reachable from a loss, in execution order.

    ``entries`` pairs each record with the tensor it produced; inputs of a
    record always precede it.
    """

    entries: list[tuple[Record, Tensor]] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        entries: list[tuple[Record, Tensor]] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            rec = t.record
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            entries.append((rec, t))
            stack.extend(rec.inputs)
        entries.sort(key=lambda e: e[0].index)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor that requires grad and feeds ``loss``.

    Leaf gradients accumulate into an existing ``.grad``; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.size != 1:
        raise DimensionError("backward", f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    if not len(tape):
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec, out in reversed(tape.entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = gi if key not in pending else pending[key] + gi
            if inp.record is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = pending[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ----------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.dtype.type(c), (x,), lambda g: (g,), "add_scalar")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    """Absolute value; the subgradient at 0 is 0."""
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    """``max(x, slope*x)``; the subgradient at 0 is ``negative_slope``."""
    if not 0.0 <= negative_slope < 1.0:
        raise ValueError(f"negative_slope must lie in [0, 1), got {negative_slope}")
    slope = x.dtype.type(negative_slope)
    pos = x.data > 0
    y = np.where(pos, x.data, x.data * slope)
    return _make(y, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ------------------------------------------------------------------ reductions

def _norm_axes(op: str, x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -x.data.ndim <= a < x.data.ndim:
            raise DimensionError(op, f"axis {a} out of range for shape {x.shape}", [f"axis {a}"])
        a %= x.data.ndim
        if x.shape[a] == 0:
            raise DimensionError(op, f"empty reduction axis {a}", [f"axis {a}"])
        out.append(a)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes("sum", x, axes)
    y = np.sum(x.data, axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(y), (x,), bw, "sum")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes("mean", x, axes)
    count = int(np.prod([x.shape[a] for a in ax]))
    return scale(sum(x, ax, keepdims), 1.0 / count)


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted ``log(sum(exp(x)))`` along ``axis``.

    A 1-D input yields a scalar; a 2-D input reduced over its rows yields one
    value per row.
    """
    (ax,) = _norm_axes("log_sum_exp", x, axis)
    m = np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=ax, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=ax)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, ax) * soft,)
    return _make(np.asarray(y), (x,), bw, "log_sum_exp")


# ---------------------------------------------------------------- shape moves

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError("reshape", f"cannot reshape {x.shape} to {shape}")
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or any(
                t.shape[i] != ref.shape[i] for i in range(ref.data.ndim) if i != ax):
            raise DimensionError("concat", f"{t.shape} incompatible with {ref.shape} off axis {ax}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def diagonal(x: Tensor) -> Tensor:
    """Main diagonal of a square matrix."""
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError("diagonal", f"expected square matrix, got {x.shape}")
    n = x.shape[0]

    def bw(g):
        out = np.zeros_like(x.data)
        out[np.arange(n), np.arange(n)] = g
        return (out,)
    return _make(np.diagonal(x.data).copy(), (x,), bw, "diagonal")


def diag(v: Tensor) -> Tensor:
    """Square matrix with ``v`` on the diagonal."""
    if v.data.ndim != 1:
        raise DimensionError("diag", f"expected vector, got {v.shape}")
    return _make(np.diag(v.data), (v,), lambda g: (np.diagonal(g).copy(),), "diag")


def take_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` selected by integer ``index`` (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)
    return _make(x.data[index], (x,), bw, "take_rows")


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul", f"expected matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", f"inner dimensions {a.shape[1]} and {b.shape[0]} differ",
                             ["a axis 1", "b axis 0"])
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias added to every row."""
    y = matmul(x, weight)
    if bias is None:
        return y
    if bias.shape != (weight.shape[1],):
        raise DimensionError("linear", f"bias {bias.shape} does not match {weight.shape[1]} outputs",
                             ["bias axis 0"])
    return _make(y.data + bias.data, (y, bias), lambda g: (g, g.sum(axis=0)), "bias_add")


def l2_normalize(v: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Divide each row by ``sqrt(sum of squares + epsilon)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if v.data.ndim != 2:
        raise DimensionError("l2_normalize", f"expected [M, S], got {v.shape}")
    n = np.sqrt(np.sum(v.data * v.data, axis=1, keepdims=True) + v.dtype.type(epsilon))
    y = v.data / n

    def bw(g):
        return (g / n - v.data * (np.sum(g * v.data, axis=1, keepdims=True) / n ** 3),)
    return _make(y, (v,), bw, "l2_normalize")


# -------------------------------------------------------------- image layers

def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patches of a padded [N, C, H, W] array as a [C*kh*kw, N*Ho*Wo] matrix."""
    n, c, h, w = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _correlate(cols: np.ndarray, weight: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    y = weight.reshape(weight.shape[0], -1) @ cols  # O, N*Ho*Wo
    return np.ascontiguousarray(y.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Zero-padded, stride-1 cross-correlation over NCHW input."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError("conv2d", f"input channels {c} != weight channels {cw}",
                             ["input axis 1", "weight axis 1"])
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d", f"kernel {kh}x{kw} must be odd", ["weight axis 2", "weight axis 3"])
    if padding < 0:
        raise ValueError("padding must be >= 0")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{w}",
                             ["input axis 2", "input axis 3"])
    if bias is not None and bias.shape != (o,):
        raise DimensionError("conv2d", f"bias {bias.shape} does not match {o} outputs", ["bias axis 0"])

    cols = _im2col(_pad_hw(x.data, padding), kh, kw)
    y = _correlate(cols, weight.data, n, ho, wo)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        # Full correlation of the output gradient with the flipped, transposed kernel.
        flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols = _im2col(gpad, kh, kw)
        gxp = _correlate(gcols, flipped, n, h + 2 * padding, w + 2 * padding)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(y, inputs, bw, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``[N, C*r*r, H, W] -> [N, C, H*r, W*r]``."""
    n, cr, h, w = x.shape
    if cr % (r * r):
        raise DimensionError("pixel_shuffle", f"channels {cr} not divisible by {r * r}", ["input axis 1"])
    c = cr // (r * r)
    y = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)
    return _make(np.ascontiguousarray(y), (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError("pixel_unshuffle", f"spatial size {hr}x{wr} not divisible by {r}",
                             ["input axis 2", "input axis 3"])
    h, w = hr // r, wr // r
    y = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bw(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)
    return _make(np.ascontiguousarray(y), (x,), bw, "pixel_unshuffle")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling; spatial sizes must divide by ``k``."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError("avg_pool2d", f"spatial size {h}x{w} not divisible by {k}",
                             ["input axis 2", "input axis 3"])
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (k * k))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * inv,)
    return _make(y, (x,), bw, "avg_pool2d")


# ------------------------------------------------------------ gradient checks

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               numeric_dtype=None) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    With ``numeric_dtype`` the finite differences are taken on copies of the
    inputs cast to that dtype, so a 32-bit backward pass can be compared with
    a reference that is not itself dominated by 32-bit rounding.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise DimensionError("grad_check", f"f must be scalar-valued, got shape {out.shape}")
    backward(out)
    probes = list(inputs)
    if numeric_dtype is not None:
        probes = [Tensor(t.data.astype(numeric_dtype)) for t in inputs]
    worst = 0.0
    with no_grad(), precision(probes[0].dtype if probes else get_default_dtype()):
        for t, probe in zip(inputs, probes):
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = probe.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*probes).data.sum(dtype=np.float64))
                flat[i] = orig - eps
                fm = float(f(*probes).data.sum(dtype=np.float64))
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                a = float(analytic.reshape(-1)[i])
                err = np.abs(a - num) / max(np.abs(a), np.abs(num), 1e-8)
                worst = max(worst, float(err))
    return worst
