"""Float64 tensors with reverse-mode automatic differentiation.

Only the primitives the DeWi network and its losses need are provided. Every
primitive records a :class:`Node` holding its inputs and a closure that maps
the output gradient to input gradients; :func:`backward` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward cannot be run on the recorded graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]
    eval_only: bool = False


class Tensor:
    """An n-dimensional float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    # spec-facing aliases
    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple], eval_only: bool = False) -> Tensor:
    """Wrap a forward result and record how to differentiate it.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per entry of ``inputs``.
    """
    result = Tensor(out)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, tuple(inputs), backward_fn, eval_only)
    return result


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Primitive records reachable from a root, in topological order (inputs first)."""

    records: list = field(default_factory=list)
    tensors: list = field(default_factory=list)

    def leaves(self) -> list:
        return [t for t in self.tensors if t.node is None and t.requires_grad]


def build_graph(root: Tensor) -> Graph:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return Graph(records=[t.node for t in order if t.node is not None], tensors=order)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients.

    Gradients add across fan-out and across repeated calls; call
    ``zero_grad`` on parameters between steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor requiring gradients "
                         "(was it computed under no_grad?)")
    graph = graph or build_graph(loss)
    for t in graph.tensors:
        if t.node is not None and t.node.eval_only:
            raise GraphError(f"cannot differentiate through eval-mode record '{t.node.op}'")
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"{t.node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            key = id(inp)
            grads[key] = ig if key not in grads else grads[key] + ig


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    # clamp keeps log finite when a probability underflows to 0
    safe = np.maximum(x.data, np.finfo(DTYPE).tiny)
    return make_op("log", np.log(safe), (x,), lambda g: (g / safe,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_op("sqrt", out, (x,),
                   lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1.0)), 0.0),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = np.exp(d - out)
    return make_op("softplus", out, (x,), lambda g: (g * sig,))


_relu_margins: Optional[list] = None


@contextlib.contextmanager
def watch_relu():
    """Collect min |input| of every relu call in the block (distance to the kink)."""
    global _relu_margins
    prev, _relu_margins = _relu_margins, []
    try:
        yield _relu_margins
    finally:
        _relu_margins = prev


def relu(x: Tensor) -> Tensor:
    if _relu_margins is not None and x.data.size:
        _relu_margins.append(float(np.abs(x.data).min()))
    mask = x.data > 0  # subgradient at 0 is 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return make_op("clamp_min", np.where(mask, x.data, lo), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    return make_op("transpose", x.data.T, (x,), lambda g: (g.T,))


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return make_op("index", np.asarray(x.data[key]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join along ``axis`` (columns by default, so row order is preserved)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    bounds = np.cumsum(sizes)
    if bounds[-1] != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    starts = [0, *bounds[:-1]]
    out = []
    for s, e in zip(starts, bounds):
        key = [slice(None)] * x.ndim
        key[axis] = slice(int(s), int(e))
        out.append(index(x, tuple(key)))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return make_op("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def masked_logsumexp(x: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """log Σ exp(x) over entries where ``mask`` is true; -inf for empty slices."""
    mask = np.asarray(mask, dtype=bool)
    xm = np.where(mask, x.data, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(xm - m_safe), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.squeeze(np.log(s) + m_safe, axis=axis)
    w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return make_op("masked_logsumexp", out, (x,), bw)


# ---------------------------------------------------------------------------
# network primitives


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for a B×Din input and Dout×Din weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape} "
                         f"(Din {x.shape[-1]} vs {weight.shape[-1]})")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} does not match Dout={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return make_op("affine", out, inputs, bw)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col; no kernel flip."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match Cout={O}")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = (np.ascontiguousarray(gx), gw)
        return grads if bias is None else grads + (g2.sum(axis=0),)

    return make_op("conv2d", np.ascontiguousarray(out), inputs, bw)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Normalize per channel (axis 1) over batch and spatial axes.

    In training mode the batch statistics are used and the running buffers are
    updated in place as ``(1 - momentum) * running + momentum * batch`` (the
    running variance takes the unbiased batch estimate). Evaluation mode uses
    the running buffers only.
    """
    C = x.shape[1]
    for label, arr in (("scale", scale.data), ("shift", shift.data),
                       ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise ShapeError(f"batch_norm: {label} has shape {arr.shape}, expected ({C},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    n = x.data.size // C
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def bw(g):
        gshift = g.sum(axis=axes)
        gscale = (g * xhat).sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / n) * (
                n * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gscale, gshift

    return make_op("batch_norm", out, (x, scale, shift), bw, eval_only=not training)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    with np.errstate(over="ignore"):  # a gap beyond the float range underflows to 0 anyway
        z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return make_op("softmax", s, (x,),
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0 (no draw is made then)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training:
        return make_op("dropout", x.data.copy(), (x,), lambda g: (g,), eval_only=True)
    if rate == 0.0:
        return make_op("dropout", x.data.copy(), (x,), lambda g: (g,))
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def adaptive_windows(n: int, out: int) -> list:
    """Near-even [start, end) windows used by adaptive pooling."""
    return [((i * n) // out, -((-(i + 1) * n) // out)) for i in range(out)]


def pool_avg(x: Tensor, target="global") -> Tensor:
    """Average pooling: ``"global"`` gives B×C, ``(h, w)`` gives adaptive B×C×h×w."""
    if x.ndim != 4:
        raise ShapeError(f"pool_avg: expected B×C×H×W input, got {x.shape}")
    B, C, H, W = x.shape
    if target == "global":
        out = x.data.mean(axis=(2, 3))
        return make_op("pool_global", out, (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),))
    h, w = target
    if h < 1 or w < 1 or h > H or w > W:
        raise ShapeError(f"pool_avg: target {h}x{w} outside input extent {H}x{W}")
    rows, cols = adaptive_windows(H, h), adaptive_windows(W, w)
    out = np.empty((B, C, h, w), dtype=DTYPE)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j][:, :, None, None] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return make_op("pool_adaptive", out, (x,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    nonfinite: np.ndarray

    @property
    def ok(self) -> bool:
        return not self.nonfinite.any()

    def passed(self, tolerance: float) -> bool:
        return self.ok and self.max_rel_error < tolerance


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(f: Callable[[Tensor], Tensor], point: ArrayLike, step: float = 1e-6,
               tolerance: float = 1e-4, coords: Optional[Sequence[int]] = None) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``point`` with central differences.

    ``coords`` restricts the check to the given flat coordinates.
    """
    x0 = np.array(point, dtype=DTYPE)
    x = Tensor(x0.copy(), requires_grad=True)
    y = f(x)
    backward(y)
    analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(x0.size)
    idx = np.arange(x0.size) if coords is None else np.asarray(coords, dtype=int)
    numeric = np.empty(idx.size)
    flat = x0.reshape(-1)
    with no_grad():
        for k, i in enumerate(idx):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += step
            xm[i] -= step
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric[k] = (fp - fm) / (xp[i] - xm[i])  # the step actually taken after rounding
    a = analytic[idx]
    nonfinite = ~(np.isfinite(a) & np.isfinite(numeric))
    rel = relative_error(a, numeric)
    rel[nonfinite] = np.inf
    report = GradCheckReport(float(rel.max(initial=0.0)), rel, a, numeric, nonfinite)
    if not report.passed(tolerance):
        logger.debug("grad_check above tolerance %g: max rel error %g", tolerance, report.max_rel_error)
    return report
