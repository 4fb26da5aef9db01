"""Reverse-mode automatic differentiation over dense numpy tensors.

A single ``Tensor`` value type flows through the whole system. Ops execute
eagerly; when a ``Tape`` is active and an input requires grad, the op records
a node (inputs, output, backward closure) on it. ``Tape.backward`` walks the
nodes in reverse, which is a valid topological order because recording order
is execution order.

Compute is float32 by default. Gradient-check builds switch to float64 via
``using_dtype`` so the finite-difference oracle is tight.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    NonFinite,
    NonPositiveLambda,
    NotScalar,
    LabelOutOfRange,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

_local = threading.local()

_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype.type in _DTYPES:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # light sugar for loss arithmetic; model code calls ops explicitly
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records ops for one backward pass. Thread-local; nestable."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, params=None) -> dict[Tensor, np.ndarray]:
        """Backpropagate from a scalar loss.

        Populates ``.grad`` on every requires-grad leaf reached and returns a
        map from leaf tensor to gradient. Tensors in ``params`` that the loss
        does not depend on get explicit zero grads. Clears the tape.
        """
        if loss.data.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        produced = {id(n.output) for n in self._nodes}
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for t, g_in in zip(node.inputs, node.backward(g_out)):
                if t is None or g_in is None or not t.requires_grad:
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + g_in
                else:
                    grads[tid] = g_in
                holders[tid] = t
        self._nodes.clear()

        out: dict[Tensor, np.ndarray] = {}
        for tid, g in grads.items():
            t = holders[tid]
            if tid in produced or not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g
            out[t] = g
        if params is not None:
            params = list(params)
            reached = False
            for p in params:
                if p in out:
                    reached = True
                else:
                    z = np.zeros_like(p.data)
                    if p.grad is None:
                        p.grad = z
                    out[p] = z
            if params and not reached:
                log.warning("backward: loss is disconnected from every parameter")
        return out


def _tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _finish(kind: str, inputs, out_data: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFinite(f"op {kind!r} produced non-finite values")
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None and any(
        t is not None and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        tape._nodes.append(_Node(kind, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _finish("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _finish("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _finish("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("mul_scalar", (x,), x.data * c, lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _finish("add_scalar", (x,), x.data + float(c), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    return _finish("square", (x,), x.data * x.data, lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _finish("sqrt", (x,), out, lambda g: (g / (2.0 * out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0
    return _finish("relu", (x,), out, lambda g: (g * mask,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    out = np.maximum(x.data, floor)
    mask = x.data > floor  # zero subgradient at and below the floor
    return _finish("clamp_min", (x,), out, lambda g: (g * mask,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select per element from ``a`` where mask else ``b``. Mask carries no grad."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _finish("where", (a, b), out,
                   lambda g: (_unbroadcast(g * mask, a.shape),
                              _unbroadcast(g * ~mask, b.shape)))


# ---------------------------------------------------------------------------
# linear algebra / shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _finish("matmul", (a, b), out,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-d, got {x.shape}")
    return _finish("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", tuple(tensors), out, bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _finish("slice_rows", (x,), out, bwd)


def _axis_size(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = _axis_size(x.shape, axis)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / n,)

    return _finish("mean", (x,), np.asarray(out), bwd)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish("sum", (x,), np.asarray(out), bwd)


# ---------------------------------------------------------------------------
# normalization / softmax
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", (x,), y, bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", (x,), out, bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bwd(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _finish("l2_normalize", (x,), y, bwd)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select one column per row: out[i] = x[i, index[i]]."""
    if x.ndim != 2:
        raise ShapeMismatch(f"pick expects 2-d, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"pick index shape {index.shape} vs rows {x.shape[0]}")
    if index.min(initial=0) < 0 or index.max(initial=-1) >= x.shape[1]:
        raise LabelOutOfRange(f"index outside [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _finish("pick", (x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution / batch norm
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """1-d convolution, stride 1. x: (N, Cin, T), w: (Cout, Cin, K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d x={x.shape} w={w.shape}")
    n, cin, t = x.shape
    cout, _, k = w.shape
    span = dilation * (k - 1) + 1
    if t + 2 * padding < span:
        raise ShapeMismatch(f"kernel span {span} exceeds padded length {t + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    t_out = t + 2 * padding - dilation * (k - 1)
    cols = np.stack([xp[:, :, i * dilation:i * dilation + t_out] for i in range(k)],
                    axis=2)  # (N, Cin, K, T_out)
    cols2 = cols.reshape(n, cin * k, t_out)
    w2 = w.data.reshape(cout, cin * k)
    out = np.matmul(w2[None], cols2)  # (N, Cout, T_out)
    if b is not None:
        out = out + b.data[None, :, None]

    def bwd(g):
        gw = np.matmul(g, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w2.T[None], g).reshape(n, cin, k, t_out)
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, :, i * dilation:i * dilation + t_out] += gcols[:, :, i, :]
        gx = gxp[:, :, padding:padding + t] if padding else gxp
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb)

    return _finish("conv1d", (x, w, b), out, bwd)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Batch norm over (N, C) or (N, C, T); stats per channel.

    Train mode normalizes by batch statistics and folds them into the running
    arrays in place (``running = momentum * running + (1-momentum) * batch``).
    Eval mode uses the running arrays.
    """
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 3:
        axes, view = (0, 2), (1, -1, 1)
    else:
        raise ShapeMismatch(f"batchnorm1d expects 2-d or 3-d, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch("batchnorm1d affine params must be (C,)")

    def shaped(v):
        return v.reshape(view)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - shaped(mu)) * shaped(inv)
    out = shaped(gamma.data) * xhat + shaped(beta.data)

    if training:
        m = _axis_size(x.shape, axes)

        def bwd(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = (shaped(gamma.data) * shaped(inv) / m) * (
                m * g - shaped(gb) - xhat * shaped(gg)
            )
            return (gx, gg, gb)
    else:
        def bwd(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = g * shaped(gamma.data) * shaped(inv)
            return (gx, gg, gb)

    return _finish("batchnorm1d", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# gradient reversal
# ---------------------------------------------------------------------------

def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward replaces the upstream gradient g by -lam*g."""
    lam = float(lam)
    if not lam > 0:
        raise NonPositiveLambda(f"lambda must be > 0, got {lam}")
    return _finish("grad_reverse", (x,), x.data, lambda g: ((-lam) * g,))


# ---------------------------------------------------------------------------
# generic dispatch
# ---------------------------------------------------------------------------

OP_KINDS = (
    "matmul", "conv1d", "relu", "batchnorm1d", "softmax", "log_softmax",
    "mean", "concat", "l2_normalize", "add", "sub", "mul_scalar", "square",
    # extensions needed by margin softmax, attentive pooling and batch slicing
    "mul", "add_scalar", "sqrt", "clamp_min", "where", "sum", "transpose",
    "pick", "slice_rows", "grad_reverse",
)

_DISPATCH = {
    "matmul": lambda ins, at: matmul(*ins),
    "conv1d": lambda ins, at: conv1d(*ins, **at),
    "relu": lambda ins, at: relu(*ins),
    "batchnorm1d": lambda ins, at: batchnorm1d(*ins, **at),
    "softmax": lambda ins, at: softmax(*ins, **at),
    "log_softmax": lambda ins, at: log_softmax(*ins, **at),
    "mean": lambda ins, at: mean(*ins, **at),
    "concat": lambda ins, at: concat(ins, **at),
    "l2_normalize": lambda ins, at: l2_normalize(*ins, **at),
    "add": lambda ins, at: add(*ins),
    "sub": lambda ins, at: sub(*ins),
    "mul": lambda ins, at: mul(*ins),
    "mul_scalar": lambda ins, at: mul_scalar(*ins, **at),
    "add_scalar": lambda ins, at: add_scalar(*ins, **at),
    "square": lambda ins, at: square(*ins),
    "sqrt": lambda ins, at: sqrt(*ins),
    "clamp_min": lambda ins, at: clamp_min(*ins, **at),
    "where": lambda ins, at: where(at["mask"], *ins),
    "sum": lambda ins, at: tensor_sum(*ins, **at),
    "transpose": lambda ins, at: transpose(*ins),
    "pick": lambda ins, at: pick(*ins, **at),
    "slice_rows": lambda ins, at: slice_rows(*ins, **at),
    "grad_reverse": lambda ins, at: grad_reverse(*ins, **at),
}


def apply(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Uniform entry point: route an op kind to its implementation."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(tuple(inputs), attrs or {})


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-element comparison of backward grads against central differences.

    ``rel_err[i]`` has the shape of input ``i`` (zeros for inputs without
    grad). Error metric: |analytic - numeric| / max(|analytic|, |numeric|, 1),
    i.e. relative for large gradients, absolute near zero.
    """

    rel_err: list = field(default_factory=list)
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)
    tol: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f, inputs, tol: float = 1e-3, step: float | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(inputs)`` with central differences.

    ``f`` must be deterministic in its inputs. Every element of every
    requires-grad input is perturbed; elements whose error exceeds ``tol``
    are listed in the report (report-only, never raises).
    """
    inputs = list(inputs)
    with Tape() as tape:
        loss = f(inputs)
        grads = tape.backward(loss, params=[t for t in inputs if t.requires_grad])

    if step is None:
        step = 6e-6 if inputs and inputs[0].data.dtype == np.float64 else 3e-3

    report = GradCheckReport(tol=tol)
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            report.rel_err.append(np.zeros_like(t.data))
            continue
        analytic = grads[t]
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            h = step * max(1.0, abs(float(orig)))
            flat[j] = orig + h
            up = float(f(inputs).data)
            flat[j] = orig - h
            down = float(f(inputs).data)
            flat[j] = orig
            nflat[j] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        err = np.abs(analytic - numeric) / denom
        report.rel_err.append(err)
        report.max_rel_err = max(report.max_rel_err, float(err.max()) if err.size else 0.0)
        for j in np.flatnonzero(err.reshape(-1) > tol):
            report.failures.append((idx, int(j), float(err.reshape(-1)[j])))
    return report
