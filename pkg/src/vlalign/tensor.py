"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine provides exactly the primitives the models in this package need:
matmul, add, mul, scale, exp, transpose, reshape, concat, slicing/gather,
embedding lookup, softmax over the last axis, layer norm, GELU, attention
score masking, cross entropy from logits, mean/sum reductions, dropout,
drop path, and L2 normalization.

Gradients are accumulated by walking recorded nodes in exact reverse
construction order (which is a reverse topological order), so backward is
bit-deterministic for a fixed forward graph.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "GraphError",
    "ShapeMismatchError",
    "InvalidAttributeError",
    "tensor",
    "no_grad",
    "backward",
    "trace",
    "primitive_forward",
    "grad_check",
    "GradCheckReport",
]

_SEQ = itertools.count()
_GRAD_ENABLED = [True]

# Additive mask value: exp(_MASKED - rowmax) underflows to exactly 0.0, so
# masked positions receive weight 0 after softmax.
MASK_VALUE = -1e9

LAYER_NORM_EPS = 1e-6


class GraphError(RuntimeError):
    """Backward called on a detached or otherwise unusable graph."""


class ShapeMismatchError(ValueError):
    """Primitive applied to inputs whose shapes do not conform."""


class InvalidAttributeError(ValueError):
    """Primitive applied with an invalid attribute."""


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "seq")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[_Node] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar over the primitives below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Wrap array-like data in a Tensor (float32 unless told otherwise)."""
    if dtype is None:
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
    else:
        arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    if _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        out.node = _Node(op, tuple(inputs), out, backward_fn)
        return out
    return Tensor(out_data, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: inputs must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # stacked @ matrix: collapse to one large GEMM instead of a
        # per-batch-row loop
        lead = a.shape[:-1]
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def backward_fn(g):
            g2 = g.reshape(-1, b.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _record("matmul", (a, b), out, backward_fn)

    out = a.data @ b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.dtype)

    def backward_fn(g):
        return (g * c,)

    return _record("scale", (x,), out, backward_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward_fn(g):
        return (g * out,)

    return _record("exp", (x,), out, backward_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidAttributeError(f"transpose: axes {axes} is not a permutation of rank {x.ndim}")
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (x,), out, backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {x.shape} as {shape}")
    in_shape = x.shape

    def backward_fn(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (x,), out, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidAttributeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        )
    sizes = [t.shape[axis] for t in tensors]
    split_points = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, split_points, axis=axis))

    return _record("concat", tuple(tensors), out, backward_fn)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; gradients scatter back into place."""
    out = x.data[key]
    in_shape = x.shape

    def backward_fn(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _record("slice", (x,), np.ascontiguousarray(out), backward_fn)


def index_select(x: Tensor, axis: int, idx) -> Tensor:
    """Gather along one axis with a 1-D integer index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise InvalidAttributeError(f"index_select: index must be 1-D, got shape {idx.shape}")
    out = np.take(x.data, idx, axis=axis)
    in_shape = x.shape

    def backward_fn(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record("index_select", (x,), out, backward_fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Per-batch row gather: x [B, T, D], idx [B, K] -> [B, K, D]."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"gather_rows: expected x [B,T,D], idx [B,K]; got {x.shape}, {idx.shape}")
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    in_shape = x.shape
    rows = np.arange(x.shape[0])[:, None]

    def backward_fn(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _record("gather_rows", (x,), out, backward_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeMismatchError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InvalidAttributeError(
            f"embedding: id out of range [0, {weight.shape[0]}): {ids.min()}..{ids.max()}"
        )
    out = weight.data[ids]
    vocab, dim = weight.shape

    def backward_fn(g):
        gw = np.zeros((vocab, dim), dtype=g.dtype)
        np.add.at(gw, ids.ravel(), g.reshape(-1, dim))
        return (gw,)

    return _record("embedding", (weight,), out, backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, guarded by row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (x,), out, backward_fn)


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (pre-affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv
        return (gx,)

    return _record("layer_norm", (x,), xhat, backward_fn)


# python floats: numpy scalars would promote float32 activations to float64
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the erf form is ~10x slower elementwise)."""
    x2 = x.data * x.data
    inner = _GELU_C * (x.data + _GELU_A * x.data * x2)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * sech2 * d_inner),)

    return _record("gelu", (x,), out, backward_fn)


def masked_fill(x: Tensor, keep_mask) -> Tensor:
    """Replace attention logits outside `keep_mask` with a large negative value.

    After softmax the masked positions receive weight exactly 0 (the shifted
    exponent underflows). Gradients flow only to kept positions.
    """
    keep = np.asarray(keep_mask, dtype=bool)
    try:
        out = np.where(keep, x.data, np.asarray(MASK_VALUE, dtype=x.dtype))
    except ValueError:
        raise ShapeMismatchError(f"masked_fill: mask {keep.shape} does not broadcast to {x.shape}")

    def backward_fn(g):
        return (_unbroadcast(np.where(keep, g, 0.0), x.shape),)

    return _record("masked_fill", (x,), out, backward_fn)


def cross_entropy_from_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean cross entropy from raw logits, computed via log-softmax.

    logits: [N, C]; targets: [N] integer class ids; mask: optional [N]
    weights (positions with weight 0 are excluded; the mean runs over the
    mask total).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise InvalidAttributeError("cross_entropy: target id out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    if mask is None:
        w = np.full(n, 1.0 / n, dtype=logits.dtype)
    else:
        m = np.asarray(mask, dtype=logits.dtype)
        if m.shape != (n,):
            raise ShapeMismatchError(f"cross_entropy: mask shape {m.shape} != ({n},)")
        total = m.sum()
        if total <= 0:
            raise InvalidAttributeError("cross_entropy: mask selects no positions")
        w = m / total
    rows = np.arange(n)
    out = np.asarray(-(logp[rows, targets] * w).sum(), dtype=logits.dtype)
    probs = np.exp(logp)

    def backward_fn(g):
        gl = probs * w[:, None]
        gl[rows, targets] -= w
        return (gl * g,)

    return _record("cross_entropy", (logits,), out, backward_fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record("sum", (x,), np.asarray(out), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    in_shape = x.shape
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape) / count,)

    return _record("mean", (x,), np.asarray(out), backward_fn)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None, train: bool = False) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise InvalidAttributeError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise InvalidAttributeError("dropout: rng required in train mode")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward_fn(g):
        return (g * keep,)

    return _record("dropout", (x,), out, backward_fn)


def drop_path(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None, train: bool = False) -> Tensor:
    """Stochastic depth: zero whole residual branches per leading-axis sample."""
    if not 0.0 <= rate <= 1.0:
        raise InvalidAttributeError(f"drop_path: rate must be in [0, 1], got {rate}")
    if not train or rate == 0.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    if rate >= 1.0:
        keep = np.zeros(shape, dtype=x.dtype)
    else:
        if rng is None:
            raise InvalidAttributeError("drop_path: rng required in train mode")
        keep = (rng.random(shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward_fn(g):
        return (g * keep,)

    return _record("drop_path", (x,), out, backward_fn)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit L2 norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _record("l2_normalize", (x,), out, backward_fn)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "index_select": index_select,
    "gather_rows": gather_rows,
    "embedding": embedding,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "masked_fill": masked_fill,
    "cross_entropy": cross_entropy_from_logits,
    "sum": sum_,
    "mean": mean,
    "dropout": dropout,
    "drop_path": drop_path,
    "l2_normalize": l2_normalize,
}


def primitive_forward(op: str, inputs, **attrs) -> Tensor:
    """Apply a primitive by id. Records a graph node when grads are needed."""
    if op not in _PRIMITIVES:
        raise InvalidAttributeError(f"unknown primitive: {op!r}")
    fn = _PRIMITIVES[op]
    if op == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def primitive_names():
    return tuple(_PRIMITIVES)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


@dataclass
class ComputeGraph:
    """Nodes reachable from a loss, in forward construction order."""

    nodes: list

    def __len__(self):
        return len(self.nodes)


def trace(loss: Tensor) -> ComputeGraph:
    if loss.node is None:
        raise GraphError("backward: loss is detached from any recorded graph")
    seen = set()
    nodes = []
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t.node is not None:
                stack.append(t.node)
    nodes.sort(key=lambda n: n.seq)
    return ComputeGraph(nodes)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Leaves passed explicitly but not reached by the graph get zero grads.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gi if t.grad is None else t.grad + gi
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list  # max relative error per checked input

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[..., Tensor],
    xs: Sequence[Tensor],
    step: float = 1e-5,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f against central differences.

    f must be deterministic (checked by evaluating twice). All inputs are
    perturbed in place, element by element: (f(x+h) - f(x-h)) / 2h. For
    large inputs a seeded random subset of `max_elements` coordinates per
    input is checked.

    Relative error per element is |a - n| / max(|a|, |n|, floor). The floor
    combines 1e-6 * (largest gradient magnitude of the input) with the
    central-difference noise floor eps * |f| / step (times a safety factor):
    coordinates whose gradients sit below what the method can resolve are
    compared in absolute terms against that noise level.
    """
    out1 = f(*xs)
    out2 = f(*xs)
    if not np.array_equal(out1.data, out2.data):
        raise GraphError("grad_check: f is not deterministic (two evaluations differ)")
    if out1.size != 1:
        raise GraphError("grad_check: f must be scalar-valued")

    for x in xs:
        x.zero_grad()
    backward(out1, leaves=xs)

    if rng is None:
        rng = np.random.default_rng(0)
    fd_noise = 1024.0 * np.finfo(np.float64).eps * max(1.0, abs(float(out1.data))) / step

    per_input = []
    for x in xs:
        analytic = x.grad
        flat = x.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            coords = rng.choice(n, size=max_elements, replace=False)
            coords.sort()
        else:
            coords = np.arange(n)
        numeric = np.zeros(len(coords), dtype=np.float64)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                fp = float(f(*xs).data)
            flat[c] = orig - step
            with no_grad():
                fm = float(f(*xs).data)
            flat[c] = orig
            numeric[j] = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[coords].astype(np.float64)
        scale_floor = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        denom = np.maximum(
            np.maximum(np.abs(a), np.abs(numeric)),
            max(1e-6 * scale_floor, fd_noise, 1e-30),
        )
        rel = np.abs(a - numeric) / denom
        # exact zeros on both sides count as exact agreement
        rel[(a == 0.0) & (numeric == 0.0)] = 0.0
        per_input.append(float(rel.max(initial=0.0)))
    return GradCheckReport(max_rel_error=max(per_input, default=0.0), per_input=per_input)
