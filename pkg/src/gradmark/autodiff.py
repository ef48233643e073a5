"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records a :class:`Node` on its output tensor. Backward rules
are themselves written with the recorded operations, so a gradient computed
with ``create_graph=True`` is an ordinary tensor with its own history and can
be differentiated again. That is all the watermark regularizer needs: the
parameter gradient of a loss built from input gradients.

Two views of the same machinery are exposed:

* eager tensors (``x = Tensor(...); y = relu(x @ w)``) with :func:`grad`;
* :class:`ComputeGraph`, a topologically ordered snapshot of a recorded
  expression that can be replayed with :func:`forward` on new leaf values and
  differentiated symbolically with :func:`grad_graph`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ComputeGraph",
    "NonFiniteError",
    "as_tensor",
    "no_record",
    "grad",
    "grad_graph",
    "forward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "take",
    "scatter_add",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "conv2d",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextlib.contextmanager
def no_record():
    """Evaluate operations without recording history (inference, first-order backward)."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    attrs: dict = field(default_factory=dict)


class Tensor:
    """A float64 array with optional recorded history."""

    __slots__ = ("data", "node", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.node: Node | None = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{op}{label})"

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op registry: forward kernels on arrays and backward rules on tensors

_FORWARD: dict[str, Callable[..., np.ndarray]] = {}
_BACKWARD: dict[str, Callable[..., tuple]] = {}


def _register(name: str, fwd: Callable[..., np.ndarray], bwd: Callable[..., tuple]) -> None:
    _FORWARD[name] = fwd
    _BACKWARD[name] = bwd


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _apply(op: str, inputs: Sequence, **attrs) -> Tensor:
    tensors = tuple(as_tensor(t) for t in inputs)
    with np.errstate(all="ignore"):
        out = _FORWARD[op](*(t.data for t in tensors), **attrs)
    _check_finite(op, out)
    result = Tensor(out)
    if _recording() and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.node = Node(op, tensors, attrs)
    return result


def _unbroadcast_shape(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def div(a, b) -> Tensor:
    return _apply("div", (a, b))


def neg(a) -> Tensor:
    return _apply("neg", (a,))


_register("add", np.add, lambda g, a, b, out: (_unbroadcast_shape(g, a.shape), _unbroadcast_shape(g, b.shape)))
_register("sub", np.subtract, lambda g, a, b, out: (_unbroadcast_shape(g, a.shape), _unbroadcast_shape(neg(g), b.shape)))
_register("mul", np.multiply, lambda g, a, b, out: (_unbroadcast_shape(mul(g, b), a.shape), _unbroadcast_shape(mul(g, a), b.shape)))
_register(
    "div",
    np.divide,
    lambda g, a, b, out: (
        _unbroadcast_shape(div(g, b), a.shape),
        _unbroadcast_shape(neg(div(mul(g, out), b)), b.shape),
    ),
)
_register("neg", np.negative, lambda g, a, out: (neg(g),))


def exp(a) -> Tensor:
    return _apply("exp", (a,))


def log(a) -> Tensor:
    return _apply("log", (a,))


_register("exp", np.exp, lambda g, a, out: (mul(g, out),))
_register("log", np.log, lambda g, a, out: (div(g, a),))


def relu(a) -> Tensor:
    return _apply("relu", (a,))


def _zero_bwd(g, *args, **attrs):
    return tuple(Tensor(np.zeros_like(a.data)) for a in args[:-1])


# indicator masks are recorded (so graph replay recomputes them) but have zero
# derivative, which is exact almost everywhere
_register("positive", lambda a: (a > 0).astype(np.float64), _zero_bwd)
_register("inrange", lambda a, lo, hi: ((a >= lo) & (a <= hi)).astype(np.float64), _zero_bwd)


def _relu_bwd(g, a, out):
    # derivative at exactly 0 is taken as 0
    return (mul(g, _apply("positive", (a,))),)


_register("relu", lambda a: np.maximum(a, 0.0), _relu_bwd)


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (a,))


_register("sigmoid", _sigmoid_np, lambda g, a, out: (mul(g, mul(out, sub(1.0, out))),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value was inside."""
    return _apply("clip", (a,), lo=lo, hi=hi)


def _clip_bwd(g, a, out, lo, hi):
    return (mul(g, _apply("inrange", (a,), lo=lo, hi=hi)),)


_register("clip", lambda a, lo, hi: np.clip(a, lo, hi), _clip_bwd)


# shape ---------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    return _apply("reshape", (a,), shape=tuple(shape))


_register("reshape", lambda a, shape: np.reshape(a, shape), lambda g, a, out, shape: (reshape(g, a.shape),))


def transpose(a) -> Tensor:
    return _apply("transpose", (a,))


_register("transpose", lambda a: np.ascontiguousarray(a.T), lambda g, a, out: (transpose(g),))


def broadcast_to(a, shape) -> Tensor:
    return _apply("broadcast_to", (a,), shape=tuple(shape))


def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of numpy broadcasting)."""
    return _apply("sum_to", (a,), shape=tuple(shape))


def _sum_to_np(a: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True) if axes else a
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


_register("broadcast_to", lambda a, shape: np.ascontiguousarray(np.broadcast_to(a, shape)), lambda g, a, out, shape: (sum_to(g, a.shape),))
_register("sum_to", _sum_to_np, lambda g, a, out, shape: (broadcast_to(g, a.shape),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    return _apply("sum", (a,), axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def _sum_bwd(g, a, out, axis, keepdims):
    if not keepdims:
        kshape = tuple(1 if i in axis else s for i, s in enumerate(a.shape))
        g = reshape(g, kshape)
    return (broadcast_to(g, a.shape),)


_register("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return div(sum(a, axis=axes, keepdims=keepdims), float(count))


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _apply("matmul", (a, b))


_register("matmul", np.matmul, lambda g, a, b, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# indexing --------------------------------------------------------------------

def take(a, index, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer index array (any shape)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    return _apply("take", (a,), index=index, axis=axis % a.ndim)


def scatter_add(a, index, axis: int, size: int) -> Tensor:
    """Adjoint of :func:`take`: accumulate ``a`` into a zero axis of length ``size``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    return _apply("scatter_add", (a,), index=index, axis=axis, size=size)


def _take_np(a, index, axis):
    return np.take(a, index, axis=axis)


def _scatter_add_np(a, index, axis, size):
    # a has shape pre + index.shape + post; result has pre + (size,) + post
    pre = a.shape[:axis]
    post = a.shape[axis + index.ndim:]
    flat = a.reshape(pre + (index.size,) + post)
    moved = np.moveaxis(flat, axis, 0)
    out = np.zeros((size,) + moved.shape[1:], dtype=np.float64)
    np.add.at(out, index.reshape(-1), moved)
    return np.moveaxis(out, 0, axis)


_register("take", _take_np, lambda g, a, out, index, axis: (scatter_add(g, index, axis, a.shape[axis]),))
_register("scatter_add", _scatter_add_np, lambda g, a, out, index, axis, size: (take(g, index, axis),))


# softmax family ----------------------------------------------------------------

def _softmax_np(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    return _apply("softmax", (a,))


def log_softmax(a) -> Tensor:
    return _apply("log_softmax", (a,))


def _softmax_bwd(g, a, out):
    inner = sum(mul(g, out), axis=-1, keepdims=True)
    return (mul(out, sub(g, inner)),)


def _log_softmax_bwd(g, a, out):
    return (sub(g, mul(softmax(a), sum(g, axis=-1, keepdims=True))),)


_register("softmax", _softmax_np, _softmax_bwd)
_register("log_softmax", _log_softmax_np, _log_softmax_bwd)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Fused ``-log softmax(logits)[label]`` reduced over the batch (``mean`` or ``sum``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross entropy expects (n, k) logits and (n,) labels, got {logits.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    return _apply("softmax_ce", (logits,), labels=labels, reduction=reduction)


def _softmax_ce_np(a, labels, reduction):
    lp = _log_softmax_np(a)
    losses = -lp[np.arange(a.shape[0]), labels]
    total = losses.sum()
    return np.asarray(total / a.shape[0] if reduction == "mean" else total)


def _softmax_ce_bwd(g, a, out, labels, reduction):
    onehot = np.zeros(a.shape)
    onehot[np.arange(a.shape[0]), labels] = 1.0
    delta = sub(softmax(a), Tensor(onehot))
    if reduction == "mean":
        delta = div(delta, float(a.shape[0]))
    return (mul(broadcast_to(g, a.shape), delta),)


_register("softmax_ce", _softmax_ce_np, _softmax_ce_bwd)


# convolution ---------------------------------------------------------------------

def _im2col_index(h: int, w: int, c: int, k: int, padding: str):
    """Flat gather indices and validity mask for a stride-1 NHWC convolution."""
    pad = (k - 1) // 2 if padding == "same" else 0
    if padding == "same" and k % 2 == 0:
        raise ValueError("same padding needs an odd kernel size")
    ho, wo = (h, w) if padding == "same" else (h - k + 1, w - k + 1)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel {k} larger than input {h}x{w}")
    oi, oj, di, dj, ch = np.meshgrid(np.arange(ho), np.arange(wo), np.arange(k), np.arange(k), np.arange(c), indexing="ij")
    ii = oi + di - pad
    jj = oj + dj - pad
    valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    flat = np.where(valid, (ii * w + jj) * c + ch, 0)
    return flat.reshape(ho * wo, k * k * c), valid.reshape(ho * wo, k * k * c).astype(np.float64), (ho, wo)


def conv2d(x, kernel, bias=None, padding: str = "valid") -> Tensor:
    """Stride-1 convolution of NHWC input with an (k, k, C_in, C_out) kernel.

    Built from gather, mask, reshape and matmul so it inherits their
    (higher-order) derivatives.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    n, h, w, c = x.shape
    k, k2, cin, cout = kernel.shape
    if k != k2 or cin != c:
        raise ValueError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    index, valid, (ho, wo) = _im2col_index(h, w, c, k, padding)
    cols = take(reshape(x, (n, h * w * c)), index, axis=1)  # (n, ho*wo, k*k*c)
    if not valid.all():
        cols = mul(cols, Tensor(valid))
    cols = reshape(cols, (n * ho * wo, k * k * c))
    out = matmul(cols, reshape(kernel, (k * k * cin, cout)))
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (n, ho, wo, cout))


# differentiation -------------------------------------------------------------------

def _topo(outputs: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(t, False) for t in outputs]
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
            for p in t.node.inputs:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False, allow_unused: bool = True) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the results carry history and can be differentiated
    again. Tensors that ``output`` does not depend on get zero gradients.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    order = _topo([output])
    in_graph = {id(t) for t in order}
    for t in wrt:
        if id(t) not in in_graph and not allow_unused:
            raise ValueError(f"{t!r} is not part of the graph")
    targets = {id(t) for t in wrt}
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        for t in reversed(order):
            node = t.node
            g = grads.get(id(t))
            if node is None or g is None:
                continue
            if id(t) not in targets:
                # intermediate results are no longer needed once propagated
                grads.pop(id(t))
            parts = _BACKWARD[node.op](g, *node.inputs, t, **node.attrs)
            for inp, gi in zip(node.inputs, parts):
                if not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


@dataclass
class ComputeGraph:
    """A recorded expression in topological order.

    ``nodes`` lists every tensor reachable from ``outputs``; leaves come
    before anything computed from them. ``leaves`` are the inputs that can be
    rebound in :func:`forward`.
    """

    nodes: list[Tensor]
    outputs: list[Tensor]
    leaves: list[Tensor]

    @classmethod
    def trace(cls, fn: Callable[..., Tensor | Sequence[Tensor]], *leaves: Tensor) -> "ComputeGraph":
        for leaf in leaves:
            leaf.requires_grad = True
        result = fn(*leaves)
        outputs = [result] if isinstance(result, Tensor) else list(result)
        return cls.from_outputs(outputs, leaves)

    @classmethod
    def from_outputs(cls, outputs: Sequence[Tensor], leaves: Sequence[Tensor]) -> "ComputeGraph":
        nodes = _topo(outputs)
        return cls(nodes=nodes, outputs=list(outputs), leaves=list(leaves))

    @property
    def output(self) -> Tensor:
        return self.outputs[0]


def forward(graph: ComputeGraph, bindings: dict[Tensor, np.ndarray] | None = None) -> list[np.ndarray]:
    """Replay ``graph`` with new values for (some of) its leaves.

    Unbound leaves keep the values they had when traced. Recomputed values are
    stored back into the graph so a following :func:`grad_graph` sees them.
    """
    bindings = bindings or {}
    leaf_ids = {id(t) for t in graph.leaves}
    for leaf, value in bindings.items():
        if id(leaf) not in leaf_ids:
            raise KeyError(f"{leaf!r} is not a leaf of this graph")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != leaf.shape:
            raise ValueError(f"binding shape {value.shape} != leaf shape {leaf.shape}")
        leaf.data = value
    for t in graph.nodes:
        if t.node is None:
            continue
        with np.errstate(all="ignore"):
            t.data = _FORWARD[t.node.op](*(i.data for i in t.node.inputs), **t.node.attrs)
        _check_finite(t.node.op, t.data)
    return [t.data for t in graph.outputs]


def grad_graph(graph: ComputeGraph, wrt: Sequence[Tensor] | None = None, output: Tensor | None = None) -> ComputeGraph:
    """Differentiate a graph's scalar output; the result is again a ComputeGraph."""
    output = graph.output if output is None else output
    wrt = list(graph.leaves if wrt is None else wrt)
    ids = {id(t) for t in graph.nodes}
    for t in wrt:
        if id(t) not in ids:
            raise ValueError(f"{t!r} is not in the graph")
    grads = grad(output, wrt, create_graph=True)
    return ComputeGraph.from_outputs(grads, graph.leaves)


def finite_diff_check(fn: Callable[[np.ndarray], float], point: np.ndarray, step: float, analytic: np.ndarray,
                      coords: Sequence[int] | None = None, floor: float = 1e-8) -> float:
    """Max relative error between ``analytic`` and central differences of ``fn`` at ``point``.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``; ``coords``
    restricts the check to some flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = point.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = fn(point)
        flat[i] = orig - step
        down = fn(point)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        numeric = (up - down) / (2 * step)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return float(worst)
