"""Dense float64 tensors with a small op set and reverse-mode autodiff.

Everything downstream (models, losses, the trainer) is expressed through
the ops in this module. Arithmetic is 64-bit throughout so that gradient
checks against central finite differences are decisive.

Shapes follow numpy broadcasting with one convention: a leading batch
dimension is always allowed, so every op accepts both a single instance
(e.g. ``(L, D)``) and a batch (``(B, L, D)``). softmax and layer norm act
on the last dimension only.

Graph lifetime: a :class:`Graph` is opened per training step (``with
Graph() as g``), consumed by one :func:`backward` call, and discarded.
Ops record nodes only while a graph is active and some input requires
grad, so evaluation outside a graph is plain numpy.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Graph",
    "ConfigurationError",
    "ContractError",
    "apply",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "gelu",
    "softmax_lastdim",
    "layer_norm_lastdim",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "mean",
    "sum_",
    "causal_masked_fill",
    "scalar_scale",
    "softmax_cross_entropy",
]

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ConfigurationError(ValueError):
    """A caller wired shapes or options that cannot produce a valid op."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class Tensor:
    """Dense n-dimensional array of float64 with an accumulated-gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("kind", "inputs", "out", "bwd")

    def __init__(self, kind, inputs, out, bwd):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Graph:
    """Tape of ops in construction order (inputs always precede consumers)."""

    _active: list["Graph"] = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self._node_of: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        Graph._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._active.pop()

    @classmethod
    def current(cls) -> Optional["Graph"]:
        return cls._active[-1] if cls._active else None

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, bwd) -> None:
        self._node_of[id(out)] = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(inputs), out, bwd))

    def node_id(self, t: Tensor) -> int:
        try:
            return self._node_of[id(t)]
        except KeyError:
            raise ContractError("tensor was not produced by an op on this graph")


def _record(kind, inputs, out_data, bwd) -> Tensor:
    """Wrap op output; push a node if a graph is active and grads are needed."""
    g = Graph.current()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if g is not None and needs:
        g.record(kind, inputs, out, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape_err(op: str, a: Tensor, b: Tensor, detail: str = "") -> ConfigurationError:
    msg = f"{op}: incompatible shapes {a.shape} and {b.shape}"
    if detail:
        msg += f" ({detail})"
    return ConfigurationError(msg)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _fold(x: np.ndarray, k: int) -> Optional[np.ndarray]:
    """View a (..., k) array as (-1, k) when the layout allows it."""
    if x.flags.c_contiguous:
        return x.reshape(-1, k)
    return None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; the left operand may be
    a plain vector (treated as a single row).

    The common batched-times-weight pattern (a stacked, b 2-d) is folded
    into single dgemm calls, both forward and backward.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise _shape_err("matmul", a, b, "inner dimensions must agree")
    if ad.ndim == 1 and bd.ndim != 2:
        raise _shape_err("matmul", a, b, "vector left operand needs a 2-d right operand")
    folded = _fold(ad, ad.shape[-1]) if (ad.ndim > 2 and bd.ndim == 2) else None
    if folded is not None:
        out = (folded @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = np.matmul(ad, bd)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            gf = _fold(g, g.shape[-1]) if (folded is not None) else None
            if gf is not None:
                ga = (gf @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            elif folded is not None and g.flags.c_contiguous:
                gb = folded.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def _ewise(op, kind, a: Tensor, b: Tensor, da, db) -> Tensor:
    try:
        out = op(a.data, b.data)
    except ValueError:
        raise _shape_err(kind, a, b, "not broadcastable")

    def bwd(g):
        ga = _unbroadcast(da(g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(kind, (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _ewise(np.add, "add", a, b, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _ewise(np.subtract, "sub", a, b, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _ewise(np.multiply, "mul", a, b, lambda g: g * bd, lambda g: g * ad)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0.0)
    return _record("relu", (x,), out, lambda g: (g * (xd > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), out, bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - np.max(xd, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_lastdim", (x,), out, bwd)


def layer_norm_lastdim(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine.

    The variance is clamped from below at ``LAYER_NORM_EPS`` so a constant
    row maps to zeros rather than NaN, while non-degenerate rows come out
    with exactly unit variance (up to float rounding).
    """
    xd = x.data
    if gain.shape != xd.shape[-1:] or bias.shape != xd.shape[-1:]:
        raise ConfigurationError(
            f"layer_norm_lastdim: gain/bias shapes {gain.shape}/{bias.shape} "
            f"must equal last dim of {xd.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    live = var > LAYER_NORM_EPS
    inv = 1.0 / np.sqrt(np.maximum(var, LAYER_NORM_EPS))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            # the variance term exists only where the clamp is inactive
            gx = inv * (gh - m1 - live * xhat * m2)
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _record("layer_norm_lastdim", (x, gain, bias), out, bwd)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two dimensions."""
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _record("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(
            f"reshape: cannot view {x.shape} as {shape}"
        )
    orig = x.data.shape
    return _record("reshape", (x,), out, lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bwd)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    out = x.data[key]
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return _record("slice", (x,), out, bwd)


def _reduce(kind, x: Tensor, axis, np_fn, grad_scale) -> Tensor:
    out = np_fn(x.data, axis=axis)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            gx = np.broadcast_to(g, shape)
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis), shape)
        return (gx * grad_scale,)

    return _record(kind, (x,), out, bwd)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return _reduce("mean", x, axis, np.mean, 1.0 / count)


def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return _reduce("sum", x, axis, np.sum, 1.0)


def causal_masked_fill(x: Tensor) -> Tensor:
    """Fill entries above the diagonal of the last two dims with -inf."""
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] != xd.shape[-2]:
        raise ConfigurationError(
            f"causal_masked_fill: last two dims of {xd.shape} must be square"
        )
    L = xd.shape[-1]
    keep = np.tril(np.ones((L, L), dtype=bool))
    out = np.where(keep, xd, -np.inf)
    return _record("causal_masked_fill", (x,), out, lambda g: (np.where(keep, g, 0.0),))


def scalar_scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scalar_scale", (x,), x.data * c, lambda g: (g * c,))


def softmax_cross_entropy(logits: Tensor, onehot: Tensor) -> Tensor:
    """Mean cross-entropy with a fused, shift-stabilized log-softmax.

    ``onehot`` rows are fixed targets (probability vectors allowed); the
    gradient only flows to ``logits``.
    """
    ld = logits.data
    td = onehot.data
    if ld.shape != td.shape:
        raise _shape_err("softmax_cross_entropy", logits, onehot)
    m = np.max(ld, axis=-1, keepdims=True)
    shifted = ld - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    per_row = (td * (lse - ld)).sum(axis=-1)
    out = per_row.mean()
    n_rows = per_row.size

    def bwd(g):
        p = np.exp(ld - lse)
        return ((g / n_rows) * (p - td).reshape(ld.shape), None)

    return _record("softmax_cross_entropy", (logits, onehot), out, bwd)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm_lastdim": layer_norm_lastdim,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "mean": mean,
    "sum": sum_,
    "causal_masked_fill": causal_masked_fill,
    "scalar_scale": scalar_scale,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def apply(op_kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Generic dispatch by op name; the usual entry is the named functions."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ConfigurationError(f"unknown op kind {op_kind!r}")
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(graph: Graph, loss) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` may be the output Tensor of a recorded op or its node id. The
    loss must be scalar. Gradients accumulate additively across fan-out;
    stored arrays are never mutated in place.
    """
    if isinstance(loss, Tensor):
        node_id = graph.node_id(loss)
    else:
        node_id = int(loss)
        if not 0 <= node_id < len(graph.nodes):
            raise ContractError(f"node id {node_id} not in graph")
    loss_t = graph.nodes[node_id].out
    if loss_t.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss_t.shape}"
        )
    loss_t.grad = np.ones_like(loss_t.data)
    for node in reversed(graph.nodes[: node_id + 1]):
        g = node.out.grad
        if g is None:
            continue
        grads = node.bwd(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one Tensor to a scalar loss. Relative error per coordinate is
    |analytic - numeric| / (|numeric| + 1e-8); the max over coordinates is
    returned. Raises :class:`ContractError` if ``f`` is non-finite at a
    probe point, naming the coordinate.
    """
    if not 0.0 < step <= 1e-2:
        raise ContractError(f"step must be in (0, 1e-2], got {step}")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Graph() as g:
        loss = f(x)
        backward(g, loss)
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ContractError(f"grad_check: non-finite loss at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * step)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())
