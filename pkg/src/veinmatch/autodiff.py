"""Small reverse-mode automatic differentiation engine on top of numpy.

Every primitive is a function ``fn(*arrays, **kwargs) -> (value, backward)``
where ``backward(grad_out)`` returns one gradient per array input. Applying a
primitive through :func:`apply` evaluates it and, while a :class:`Tape` is
active and some input requires a gradient, appends a node to that tape. Nodes
arrive in evaluation order, so walking them backwards is a valid reverse
topological order.

Outside a tape nothing is recorded, which keeps inference as cheap as plain
numpy.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ParameterError

DTYPE = np.float64

_local = threading.local()


def current_dtype():
    return getattr(_local, "dtype", DTYPE)


class precision:
    """Context manager switching the dtype new tensors are created with.

    Training and gradient checks always run in float64; float32 is an
    inference-only option for latency-bound matching.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        if self.dtype not in (np.float32, np.float64):
            raise ParameterError(f"unsupported precision {dtype!r}")

    def __enter__(self):
        self._saved = current_dtype()
        _local.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _local.dtype = self._saved
        return False


class record_switches:
    """Collect the discrete decisions (ReLU signs, max positions, log clamps)
    made by primitives evaluated inside the block. Two evaluations with equal
    records lie on the same smooth piece of the function."""

    def __enter__(self) -> list:
        self._saved = getattr(_local, "switches", None)
        _local.switches = []
        return _local.switches

    def __exit__(self, *exc):
        _local.switches = self._saved
        return False


def _note(decision: np.ndarray) -> None:
    log_ = getattr(_local, "switches", None)
    if log_ is not None:
        log_.append(np.asarray(decision).tobytes())


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=current_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("fn", "inputs", "kwargs", "output", "backward")

    def __init__(self, fn, inputs, kwargs, output, backward):
        self.fn = fn
        self.inputs = inputs
        self.kwargs = kwargs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> bool:
        """Re-evaluate every recorded node from its inputs and compare bit-for-bit."""
        for node in self.nodes:
            value, _ = node.fn(*[t.data for t in node.inputs], **node.kwargs)
            if value.shape != node.output.data.shape or not np.array_equal(value, node.output.data):
                return False
        return True

    def gradient(self, output: Tensor, sources: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return grad(output, self, sources)


def apply(fn: Callable, *inputs, **kwargs) -> Tensor:
    tensors = tuple(as_tensor(x) for x in inputs)
    value, backward = fn(*[t.data for t in tensors], **kwargs)
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape.nodes.append(_Node(fn, tensors, kwargs, out, backward))
    return out


def grad(output: Tensor, tape: Tape, sources: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode derivatives of a scalar ``output`` recorded on ``tape``.

    Returns a mapping from each leaf tensor that requires a gradient (or from
    each tensor in ``sources``) to its gradient array. Leaves that the output
    does not depend on get zero gradients.
    """
    if output.data.size != 1:
        raise ContractError(f"gradient root must be a scalar, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if sources is None:
        targets = list(leaves.values())
        if output.requires_grad and id(output) not in produced:
            targets.append(output)
    else:
        targets = list(sources)
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


# --- helpers ------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise & reductions ----------------------------------------------

def _add(a, b):
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def add(a, b):
    return apply(_add, a, b)


def sub(a, b):
    return apply(_sub, a, b)


def mul(a, b):
    return apply(_mul, a, b)


def div(a, b):
    return apply(_div, a, b)


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def matmul(a, b):
    return apply(_matmul, a, b)


def _transpose(a):
    return a.T.copy(), lambda g: (g.T,)


def transpose(a):
    return apply(_transpose, a)


def _reshape(a, shape):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


def reshape(a, shape):
    return apply(_reshape, a, shape=tuple(shape))


def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return np.asarray(out), back


def tsum(a, axis=None, keepdims=False):
    return apply(_sum, a, axis=axis, keepdims=keepdims)


def _mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // np.asarray(out).size if np.asarray(out).size else 1

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return np.asarray(out), back


def tmean(a, axis=None, keepdims=False):
    return apply(_mean, a, axis=axis, keepdims=keepdims)


def _amax(a, axis, keepdims=False):
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    out = np.take_along_axis(a, idx, axis=axis)
    _note(idx)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        dx = np.zeros_like(a)
        np.put_along_axis(dx, idx, g, axis=axis)
        return (dx,)
    return (out if keepdims else np.squeeze(out, axis)), back


def amax(a, axis: int, keepdims: bool = False):
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    return apply(_amax, a, axis=axis, keepdims=keepdims)


def _sqrt(a):
    out = np.sqrt(a)
    return out, lambda g: (g * 0.5 / out,)


def sqrt(a):
    return apply(_sqrt, a)


def _log_clamped(a, floor=0.0):
    clamped = a < floor
    _note(clamped)
    safe = np.where(clamped, floor, a)
    return np.log(safe), lambda g: (np.where(clamped, 0.0, g / safe),)


def log(a, floor: float = 0.0):
    """Natural log of ``max(a, floor)``; clamped entries get zero gradient."""
    return apply(_log_clamped, a, floor=floor)


def _concat(*arrays, axis=0):
    sizes = [x.shape[axis] for x in arrays]
    bounds = np.cumsum(sizes)[:-1]
    return np.concatenate(arrays, axis=axis), lambda g: tuple(np.split(g, bounds, axis=axis))


def concat(tensors: Sequence, axis: int = 0):
    return apply(_concat, *tensors, axis=axis)


def _l2norm(a):
    out = np.sqrt(np.sum(a * a))

    def back(g):
        if out == 0:
            return (np.zeros_like(a),)
        return (g * a / out,)
    return np.asarray(out), back


def l2norm(a):
    """Euclidean norm of the whole tensor (gradient taken as 0 at the origin)."""
    return apply(_l2norm, a)


# --- activations ------------------------------------------------------------

def _relu(x):
    out = np.maximum(x, 0)
    _note(x > 0)
    return out, lambda g: (g * (x > 0),)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, lambda g: (g * out * (1.0 - out),)


def relu(x):
    return apply(_relu, x)


def sigmoid(x):
    return apply(_sigmoid, x)


POINTWISE = {"RELU": relu, "SIGMOID": sigmoid}


def pointwise(x, f: str):
    try:
        return POINTWISE[f.upper()](x)
    except KeyError:
        raise ParameterError(f"unknown pointwise function {f!r}") from None


def _softmax(z, axis=-1):
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)
    return p, back


def softmax(z, axis: int = -1):
    if as_tensor(z).shape[axis] < 1:
        raise DimensionError("softmax needs at least one class")
    return apply(_softmax, z, axis=axis)


def _pick(p, labels):
    rows = np.arange(p.shape[0])

    def back(g):
        dx = np.zeros_like(p)
        dx[rows, labels] = g
        return (dx,)
    return p[rows, labels], back


def pick(p, labels):
    """Select ``p[i, labels[i]]`` for each row ``i``."""
    labels = np.asarray(labels, dtype=np.intp)
    return apply(_pick, p, labels=labels)


def _dropout(x, rate, seed, training):
    if not training or rate == 0:
        return x.copy(), lambda g: (g,)
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return x * scale, lambda g: (g * scale,)


def dropout(x, rate: float, seed: int, training: bool):
    """Inverted dropout; the identity when ``training`` is false."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    return apply(_dropout, x, rate=float(rate), seed=seed, training=bool(training))


# --- layers -----------------------------------------------------------------

def _dense(x, w, b):
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense shapes do not conform: input {x.shape}, weight {w.shape}, bias {b.shape}")
    out = x @ w.T + b

    def back(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.reshape(-1, w.shape[1])
        return (g @ w, g2.T @ x2, g2.sum(axis=0))
    return out, back


def dense(x, weight, bias):
    """``out[..., i] = sum_j weight[i, j] * x[..., j] + bias[i]``."""
    return apply(_dense, x, weight, bias)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _conv2d(x, w, b, stride=1, pad=0):
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [N,]C,H,W input and O,C,kH,kW kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernels expect {ci}")
    if b.shape != (o,):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    # patch matrix rows ordered (c, i, j) to match w.reshape(o, -1)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + b[None, :, None, None]
    if single:
        out = out[0]

    def back(g):
        if single:
            g = g[None]
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (g2 @ cols.T).reshape(w.shape)
        db = g2.sum(axis=1)
        dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        if single:
            dx = dx[0]
        return dx, dw, db
    return np.ascontiguousarray(out), back


def conv2d(x, kernels, bias, stride: int = 1, pad: int = 0):
    """2-D cross-correlation with zero padding. Accepts ``[C,H,W]`` or ``[N,C,H,W]``."""
    return apply(_conv2d, x, kernels, bias, stride=int(stride), pad=int(pad))


def _maxpool2d(x, k=2, stride=2):
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} larger than input {h}x{w}")
    if stride < 1:
        raise DimensionError("pool stride must be >= 1")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = None
    for i in range(k):
        for j in range(k):
            tap = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out = tap.copy() if out is None else np.maximum(out, tap, out=out)
    if single:
        out = out[0]
    if getattr(_local, "switches", None) is not None:
        _note(np.argmax(win.reshape(n, c, ho, wo, k * k), axis=-1))

    def back(g):
        if single:
            g = g[None]
        idx = np.argmax(win.reshape(n, c, ho, wo, k * k), axis=-1)
        dx = np.zeros_like(x)
        rows = np.arange(ho)[None, None, :, None] * stride + idx // k
        cols = np.arange(wo)[None, None, None, :] * stride + idx % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        if k <= stride:
            dx[nn, cc, rows, cols] += g
        else:
            np.add.at(dx, (np.broadcast_to(nn, idx.shape), np.broadcast_to(cc, idx.shape), rows, cols), g)
        return (dx[0] if single else dx,)
    return np.ascontiguousarray(out), back


def maxpool2d(x, k: int = 2, stride: int | None = None):
    """Max pooling over ``k`` x ``k`` windows; ties route to the first index (row-major)."""
    return apply(_maxpool2d, x, k=int(k), stride=int(stride if stride is not None else k))


# --- finite-difference check ------------------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    checked: int
    kinks: int


def gradient_report(f: Callable[..., Tensor], point: Sequence, eps: float = 1e-4,
                    max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    A coordinate whose probes ``x - eps``, ``x``, ``x + eps`` do not all make
    the same discrete decisions (see :class:`record_switches`) straddles a
    point where the function is not differentiable; it is counted as a kink
    and left out. ``max_coords`` checks a seeded random subset of coordinates.
    """
    arrays = [np.array(p, dtype=DTYPE, copy=True) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with record_switches() as base_switches, Tape() as tape:
        out = f(*leaves)
    analytic = grad(out, tape, leaves)
    coords = [(slot, pos) for slot, a in enumerate(arrays) for pos in np.ndindex(a.shape)]
    if max_coords is not None and len(coords) > max_coords:
        chosen = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    def probe(values):
        with record_switches() as switches:
            value = f(*[Tensor(a) for a in values]).item()
        return value, switches

    worst, kinks = 0.0, 0
    for slot, pos in coords:
        shifted = [a.copy() for a in arrays]
        orig = arrays[slot][pos]
        shifted[slot][pos] = orig + eps
        fp, sw_p = probe(shifted)
        shifted[slot][pos] = orig - eps
        fm, sw_m = probe(shifted)
        if sw_p != base_switches or sw_m != base_switches:
            kinks += 1
            continue
        ga = analytic[leaves[slot]][pos]
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(ga - numeric) / max(1.0, abs(ga)))
    return GradCheckResult(worst, len(coords) - kinks, kinks)


def gradient_check(f: Callable[..., Tensor], point: Sequence, eps: float = 1e-4, **kwargs) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps tensors (one per entry of ``point``) to a scalar tensor. See
    :func:`gradient_report` for the keyword options.
    """
    return gradient_report(f, point, eps, **kwargs).max_error
