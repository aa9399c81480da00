"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape, the same functions are
plain numpy computations, which is what inference uses.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(sigmoid(w * 0.5))
    >>> backward(loss, tape)
    >>> w.grad.shape
    (1,)
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NonFiniteError, ShapeError

DTYPE = np.float32

_ids = itertools.count()
_active_tapes: list["Tape"] = []


class _Precision(threading.local):
    dtype = DTYPE


_precision = _Precision()


def compute_dtype():
    """float32, or float64 while a finite-difference oracle is evaluating."""
    return _precision.dtype


@contextmanager
def oracle_precision():
    prev = _precision.dtype
    _precision.dtype = np.float64
    try:
        yield
    finally:
        _precision.dtype = prev


# Sigmoid outputs are clipped here so probabilities stay strictly inside (0, 1).
_SIG_LO = np.float32(2.0**-24)
_SIG_HI = np.float32(1.0 - 2.0**-24)


class Tensor:
    """Row-major float32 array plus gradient bookkeeping.

    ``grad`` is an accumulator: :func:`backward` adds into it and callers
    reset it with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        # np.ascontiguousarray would promote 0-d scalars to shape (1,)
        a = np.asarray(data, dtype=_precision.dtype)
        self.data = a if a.flags.c_contiguous else a.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on gradient-requiring tensors are appended in execution order. A tape is
    owned by one thread.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _active_tapes.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


def active_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in the order of ``inputs``.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.entries.append(TapeEntry(kind, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Intermediate gradients are dropped as soon as they have been propagated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    produced = {e.output.id for e in tape.entries}
    leaves = {}
    if loss.requires_grad and loss.id not in produced:
        leaves[loss.id] = loss
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.id, None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if t.id not in produced:
                leaves[t.id] = t
    for tid, t in leaves.items():
        g = grads[tid].astype(DTYPE, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NonFiniteError(f"{what} has {bad} non-finite value(s)")
    return x


# ---------------------------------------------------------------- elementwise


def _scalar_operand(b):
    return not isinstance(b, Tensor)


def add(a: Tensor, b) -> Tensor:
    if _scalar_operand(b):
        c = a.data.dtype.type(b)
        return record("add_scalar", [a], a.data + c, lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return record("neg", [a], -a.data, lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    if _scalar_operand(b):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return record("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _scalar_operand(b):
        c = a.data.dtype.type(b)
        return record("scale", [a], a.data * c, lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def sum_all(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64)
    shape = x.shape
    return record("sum", [x], total, lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    total = np.sum(x.data, dtype=np.float64) / n
    shape = x.shape
    return record("mean", [x], total, lambda g: (np.full(shape, g / DTYPE(n), dtype=DTYPE),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return record("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(old),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", [x], s, lambda g: (g * s * (1 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", [x], np.where(mask, x.data, DTYPE(0)), lambda g: (g * mask,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout. Identity when ``rate == 0`` or outside training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
    return record("dropout", [x], x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- layers


def _check_rank(x: Tensor, rank: int, op: str, label: str = "input"):
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: {label} must have rank {rank}, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel {k} larger than padded extent {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"conv2d: ({size} + 2*{padding} - {k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via im2col and one matmul."""
    _check_rank(x, 4, "conv2d")
    _check_rank(weight, 4, "conv2d", "weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be positive and padding non-negative")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, OH, OW, kh, kw) -> rows of (C*kh*kw) per output pixel
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))
    hp, wp = xp.shape[2], xp.shape[3]
    need_dx = x.requires_grad

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0, dtype=np.float64).astype(DTYPE)
        dx = None
        if need_dx:
            dcols = (g2 @ wmat).reshape(n, oh, ow, cin, kh, kw)
            dxp = np.zeros((n, cin, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    return record("conv2d", [x, weight, bias], out, grad_fn)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties resolve to the first row-major index."""
    _check_rank(x, 4, "max_pool2d")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: extents {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        scat = np.zeros((n, c, h // k, w // k, k * k), dtype=DTYPE)
        np.put_along_axis(scat, arg[..., None], g[..., None], axis=-1)
        dx = scat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return record("max_pool2d", [x], out, grad_fn)


def adaptive_pool_matrix(size: int, out: int) -> np.ndarray:
    """Averaging matrix for windows floor(i*size/out) .. floor((i+1)*size/out) - 1."""
    m = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        lo = (i * size) // out
        hi = ((i + 1) * size) // out
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_rank(x, 4, "adaptive_avg_pool2d")
    n, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive_avg_pool2d: cannot pool {h}x{w} to {out_h}x{out_w}")
    ph = adaptive_pool_matrix(h, out_h)
    pw = adaptive_pool_matrix(w, out_w)
    out = np.einsum("ih,nchw,jw->ncij", ph, x.data.astype(np.float64), pw, optimize=True)

    def grad_fn(g):
        return (np.einsum("ih,ncij,jw->nchw", ph, g.astype(np.float64), pw, optimize=True).astype(DTYPE),)

    return record("adaptive_avg_pool2d", [x], out, grad_fn)


def upsample_nearest2d(x: Tensor, scale: int = 2) -> Tensor:
    _check_rank(x, 4, "upsample_nearest2d")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return record("upsample_nearest2d", [x], out, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_rank(x, 2, "linear")
    _check_rank(weight, 2, "linear", "weight")
    dout, din = weight.shape
    if x.shape[1] != din:
        raise ShapeError(f"linear: input width {x.shape[1]} != weight in-features {din}")
    if bias.shape != (dout,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({dout},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def grad_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0, dtype=np.float64).astype(DTYPE)

    return record("linear", [x, weight, bias], out, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank(a, 4, "concat_channels", "a")
    _check_rank(b, 4, "concat_channels", "b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", [a, b], out, lambda g: (g[:, :ca], g[:, ca:]))


def split_channels(x: Tensor, first: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`: channels ``[:first]`` and ``[first:]``."""
    _check_rank(x, 4, "split_channels")
    c = x.shape[1]
    if not 0 <= first <= c:
        raise ShapeError(f"split_channels: split point {first} outside 0..{c}")
    shape = x.shape

    def part(lo, hi):
        def grad_fn(g):
            full = np.zeros(shape, dtype=DTYPE)
            full[:, lo:hi] = g
            return (full,)

        return record("slice_channels", [x], x.data[:, lo:hi], grad_fn)

    return part(0, first), part(first, c)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(f, x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` takes a Tensor and returns a scalar Tensor or float. Every
    evaluation runs under :func:`oracle_precision`, so the oracle carries
    float64 values end to end while the analytic path it checks stays float32.
    """
    if eps <= 0:
        raise ContractError("finite_diff_grad: eps must be positive")
    base = x.data.astype(np.float64).reshape(-1)
    out = np.zeros(base.size, dtype=np.float64)

    def value(v):
        with oracle_precision():
            r = f(Tensor(v.reshape(x.shape)))
        return float(np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64).reshape(-1)[0])

    for i in range(base.size):
        up = base.copy()
        dn = base.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (value(up) - value(dn)) / (2 * eps)
    return Tensor(out.reshape(x.shape))
