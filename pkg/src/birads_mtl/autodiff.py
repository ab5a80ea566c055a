"""A minimal reverse-mode tape over numpy arrays, plus a central finite-difference verifier.

Each primitive records its parents and a closure mapping the output cotangent
to parent cotangents. Only nodes that descend from a parameter (a leaf created
with ``requires_grad=True``) are recorded; everything else is folded into
constants, so images and targets never pay for a backward pass.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import grid
from .errors import InvalidInputError, UnsupportedGraphError


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "parents", "grad_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), grad_fn=None, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype != np.float32:
            data = data.astype(np.float64, copy=False)
        self.data = data
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(values, name=None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(values, dtype=dtype), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, grad_fn) -> Tensor:
    live = [p for p in parents if p.requires_grad]
    if not live:
        return Tensor(data)
    return Tensor(data, parents=parents, grad_fn=grad_fn, requires_grad=True)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Lift both operands; bare scalars take the other operand's dtype so float32 stays float32."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor) and np.ndim(a) == 0:
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor) and np.ndim(b) == 0:
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# --------------------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size / max(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size, 1)
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _node(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


# --------------------------------------------------------------------------- elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = grid.stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _node(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with subgradient 1 strictly inside (lo, hi) and 0 elsewhere, boundaries included."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), grad_fn)


def bce_with_logits(logits, targets, axis=None) -> Tensor:
    """Mean binary cross-entropy on logits, ``max(s,0) - s*t + log1p(exp(-|s|))``."""
    s = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=s.data.dtype)
    if s.shape != t.shape:
        raise InvalidInputError(f"logits shape {s.shape} does not match targets {t.shape}")
    x = s.data
    per_elem = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = per_elem.mean(axis=axis)
    count = x.size / np.asarray(out).size

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((grid.stable_sigmoid(x) - t) * g / count,)

    return _node(out, (s,), grad_fn)


# --------------------------------------------------------------------------- image ops

def sobel(a, kernel: np.ndarray) -> Tensor:
    """3x3 correlation with replicate padding over the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] < 3 or a.shape[-2] < 3:
        raise InvalidInputError(f"grid must be at least 3x3, got shape {a.shape}")
    return _node(grid.correlate3x3(a.data, kernel), (a,),
                 lambda g: (grid.correlate3x3_adjoint(g, kernel),))


def edge_magnitude(a) -> Tensor:
    gx = sobel(a, grid.SOBEL_X)
    gy = sobel(a, grid.SOBEL_Y)
    return sqrt(square(gx) + square(gy) + grid.EDGE_EPS)


CONV_CHUNK = 4096


def conv2d(x, weight, bias=None) -> Tensor:
    """'Same' convolution (cross-correlation) with zero padding; x is (N, C, H, W).

    Shifted-GEMM formulation: the zero-padded batch is laid out as one
    (C, N * padded_pixels) matrix, so each kernel tap is a single matmul against
    an offset column window. Positions landing in padding are computed and
    discarded. Columns are processed in cache-sized chunks shared by all taps.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    dtype = x.data.dtype
    xc = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3).reshape(c, -1)
    length = xc.shape[1] - (k - 1) * (wp + 1)
    offsets = [di * wp + dj for di in range(k) for dj in range(k)]
    # per-tap (O, C) blocks must be contiguous or matmul bypasses BLAS
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1).reshape(k * k, o, c), dtype=dtype)
    chunks = [(st, min(CONV_CHUNK, length - st)) for st in range(0, length, CONV_CHUNK)]
    out2 = np.zeros((o, xc.shape[1]), dtype=dtype)
    tmp = np.empty((o, CONV_CHUNK), dtype=dtype)
    for st, cs in chunks:
        acc, t = out2[:, st:st + cs], tmp[:, :cs]
        for tap, off in enumerate(offsets):
            np.matmul(wt[tap], xc[:, st + off:st + off + cs], out=t)
            acc += t
    out = out2.reshape(o, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    else:
        out = np.ascontiguousarray(out)

    def grad_fn(g):
        gpad = np.zeros((o, n, hp, wp), dtype=dtype)
        gpad[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
        g2 = gpad.reshape(o, -1)
        gw = np.zeros((k * k, o, c), dtype=dtype)
        gxc = np.zeros_like(xc) if x.requires_grad else None
        wt_t = np.ascontiguousarray(wt.transpose(0, 2, 1))
        tmp_x = np.empty((c, CONV_CHUNK), dtype=dtype)
        for st, cs in chunks:
            gchunk = g2[:, st:st + cs]
            for tap, off in enumerate(offsets):
                window = xc[:, st + off:st + off + cs]
                gw[tap] += gchunk @ window.T
                if gxc is not None:
                    t = tmp_x[:, :cs]
                    np.matmul(wt_t[tap], gchunk, out=t)
                    gxc[:, st + off:st + off + cs] += t
        gx = None
        if gxc is not None:
            gx = gxc.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
        grads = [gx, gw.reshape(k, k, o, c).transpose(2, 3, 0, 1)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, grad_fn)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    *lead, h, w = x.shape
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _node(out, (x,), grad_fn)


def _bilinear_matrix(n: int) -> np.ndarray:
    """Half-pixel-centred 2x bilinear interpolation matrix of shape (2n, n)."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        m[o, min(max(i0, 0), n - 1)] += 1.0 - frac
        m[o, min(max(i0 + 1, 0), n - 1)] += frac
    return m


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    uh = _bilinear_matrix(x.shape[-2]).astype(x.data.dtype)
    uw = _bilinear_matrix(x.shape[-1]).astype(x.data.dtype)
    out = uh @ x.data @ uw.T
    return _node(out, (x,), lambda g: (uh.T @ g @ uw,))


# --------------------------------------------------------------------------- backward

def _topological(output: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(output, parameters: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar tensor with respect to each leaf in ``parameters``.

    Parameters that the output does not depend on receive exact zeros.
    """
    if not isinstance(output, Tensor):
        raise UnsupportedGraphError(f"expected a Tensor output, got {type(output).__name__}")
    if output.size != 1:
        raise UnsupportedGraphError(f"output must be scalar, got shape {output.shape}")
    for p in parameters:
        if not isinstance(p, Tensor) or not p.is_leaf or not p.requires_grad:
            raise UnsupportedGraphError("parameters must be leaf tensors with requires_grad=True")

    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topological(output)):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg).astype(parent.data.dtype, copy=False)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    return [np.asarray(grads.get(id(p), np.zeros_like(p.data))).reshape(p.shape)
            for p in parameters]


# --------------------------------------------------------------------------- finite differences

@dataclass
class FiniteDiffReport:
    max_abs_err: float
    max_rel_err: float
    probed_entries: int
    step: float
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0

    def passed(self, rtol: float = 1e-4, atol: float | None = None) -> bool:
        if self.max_rel_err < rtol:
            return True
        return atol is not None and self.max_abs_err < atol

    def to_dict(self) -> dict:
        return asdict(self)

    def merge(self, other: "FiniteDiffReport") -> "FiniteDiffReport":
        worst = other if other.max_rel_err > self.max_rel_err else self
        return FiniteDiffReport(
            max_abs_err=max(self.max_abs_err, other.max_abs_err),
            max_rel_err=max(self.max_rel_err, other.max_rel_err),
            probed_entries=self.probed_entries + other.probed_entries, step=self.step,
            worst_analytic=worst.worst_analytic, worst_numeric=worst.worst_numeric)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(scalar_fn: Callable[..., Tensor], parameters: Sequence, step: float = 1e-5,
                      probes: int = 20, seed: int = 0,
                      exhaustive: Sequence[int] = ()) -> FiniteDiffReport:
    """Compare tape gradients of ``scalar_fn(*params)`` with central differences.

    ``parameters`` are arrays; ``probes`` coordinates are drawn without
    replacement (seeded) from their concatenated entries. Every entry of the
    parameters listed in ``exhaustive`` is probed in addition.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    if probes < 1:
        raise InvalidInputError("probes must be at least 1")
    values = [np.array(p, dtype=np.float64) for p in parameters]
    leaves = [parameter(v) for v in values]
    out = scalar_fn(*leaves)
    if not np.all(np.isfinite(as_tensor(out).data)):
        raise InvalidInputError("forward value is not finite")
    analytic = backward(out, leaves)

    sizes = [v.size for v in values]
    total = int(sum(sizes))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(probes, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    for which in exhaustive:
        picks = np.concatenate([picks, np.arange(offsets[which], offsets[which + 1])])
    picks = np.unique(picks)

    def evaluate() -> float:
        val = float(as_tensor(scalar_fn(*[Tensor(v) for v in values])).data)
        if not np.isfinite(val):
            raise InvalidInputError("forward value is not finite")
        return val

    max_abs = max_rel = 0.0
    worst = (0.0, 0.0)
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[which]), values[which].shape)
        orig = values[which][idx]
        values[which][idx] = orig + step
        f_plus = evaluate()
        values[which][idx] = orig - step
        f_minus = evaluate()
        values[which][idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[which][idx])
        abs_err = abs(a - numeric)
        rel_err = relative_error(a, numeric)
        if rel_err > max_rel:
            worst = (a, numeric)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)
    return FiniteDiffReport(max_abs_err=max_abs, max_rel_err=max_rel,
                            probed_entries=len(picks), step=step,
                            worst_analytic=worst[0], worst_numeric=worst[1])
