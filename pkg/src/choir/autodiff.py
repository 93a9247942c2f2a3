"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is a tape: each forward operation appends one node to the active
``Graph``, and ``backward`` walks the tape in reverse append order. Node ids
are list indices, so parents always precede children and the traversal order
is fixed, which makes gradients bitwise-reproducible for a given graph.

Everything is float64 and single-threaded by policy (see package __init__);
determinism is ranked above speed throughout.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericFailure, ShapeMismatch

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE_GRAPH = None
_GRAD_ENABLED = True
_FINITE_CHECKS = True


class Node:
    """One tape entry: operation tag, parent node ids, backward closure."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Graph:
    """Append-only computation tape.

    Use as a context manager around a forward pass; operations on tensors
    record themselves while a graph is active and gradient mode is on.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, "Tensor"] = {}

    def add(self, op: str, parents: tuple[int, ...], backward) -> int:
        self.nodes.append(Node(op, parents, backward))
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        global _ACTIVE_GRAPH
        self._outer = _ACTIVE_GRAPH
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = self._outer
        return False


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-operation NaN/Inf scan (on by default)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """N-dimensional float64 array, optionally tracked on a computation tape.

    ``requires_grad`` marks leaves whose gradient should be accumulated into
    ``.grad`` by ``backward``. Intermediate results are tracked implicitly
    while a Graph is active.
    """

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._graph = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def validate_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericFailure(f"{context}: non-finite values present")
        return self

    def node_in(self, graph: Graph):
        """Node id of this tensor in `graph`, binding leaves on first use."""
        if self._graph is graph:
            return self._node
        if self.requires_grad:
            self._graph = graph
            self._node = graph.add("leaf", (), None)
            graph.leaves[self._node] = self
            return self._node
        return None

    # -- operator sugar ----------------------------------------------------

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

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _record(op: str, out_data: np.ndarray, inputs, backward_factory) -> Tensor:
    """Wrap `out_data`, appending a tape node when recording is active.

    `backward_factory` is called lazily (only when recording) and must return
    a closure mapping the output gradient to per-parent gradients, aligned
    with `inputs`.
    """
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericFailure(f"{op}: forward produced non-finite values")
    out = Tensor(out_data)
    if not _GRAD_ENABLED or _ACTIVE_GRAPH is None:
        return out
    graph = _ACTIVE_GRAPH
    parent_ids = tuple(t.node_in(graph) for t in inputs)
    if all(pid is None for pid in parent_ids):
        return out
    out.requires_grad = True
    out._graph = graph
    out._node = graph.add(op, parent_ids, backward_factory())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes_ok(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok("add", a.data, b.data)

    def factory():
        sa, sb = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _record("add", a.data + b.data, (a, b), factory)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok("sub", a.data, b.data)

    def factory():
        sa, sb = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _record("sub", a.data - b.data, (a, b), factory)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok("mul", a.data, b.data)

    def factory():
        da, db = a.data, b.data
        return lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape))

    return _record("mul", a.data * b.data, (a, b), factory)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok("div", a.data, b.data)
    out_data = a.data / b.data

    def factory():
        da, db, dout = a.data, b.data, out_data
        return lambda g: (
            _unbroadcast(g / db, da.shape),
            _unbroadcast(-g * dout / db, db.shape),
        )

    return _record("div", out_data, (a, b), factory)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def factory():
        return lambda g: (-g,)

    return _record("neg", -a.data, (a,), factory)


# -- matrix product ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be >=2-D, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {da.shape} and {db.shape} are not aligned")
    if da.ndim == db.ndim and da.ndim > 2 and da.shape[:-2] != db.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims differ, {da.shape} vs {db.shape}")
    if da.ndim > 3 or db.ndim > 3 or (db.ndim == 3 and da.ndim == 2):
        raise ShapeMismatch(f"matmul: unsupported rank combination {da.shape} @ {db.shape}")
    out_data = da @ db

    def factory():
        def backward(g):
            ga = g @ np.swapaxes(db, -1, -2)
            if da.ndim == 3 and db.ndim == 2:
                k, n = db.shape
                gb = da.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(da, -1, -2) @ g
            return ga, gb

        return backward

    return _record("matmul", out_data, (a, b), factory)


def affine(x, w, b=None) -> Tensor:
    """Fused x @ w (+ b) for 2-D x; one tape node instead of two."""
    x, w = as_tensor(x), as_tensor(w)
    dx, dw = x.data, w.data
    if dx.ndim != 2 or dw.ndim != 2 or dx.shape[1] != dw.shape[0]:
        raise ShapeMismatch(f"affine: shapes {dx.shape} and {dw.shape} are not aligned")
    out_data = dx @ dw
    if b is None:
        inputs = (x, w)
    else:
        b = as_tensor(b)
        out_data = out_data + b.data
        inputs = (x, w, b)

    def factory():
        def backward(g):
            gx = g @ dw.T
            gw = dx.T @ g
            if b is None:
                return gx, gw
            return gx, gw, _unbroadcast(g, b.data.shape)

        return backward

    return _record("affine", out_data, inputs, factory)


# -- shape surgery -----------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.data.shape} as {shape}") from None

    def factory():
        orig = a.data.shape
        return lambda g: (g.reshape(orig),)

    return _record("reshape", out_data, (a,), factory)


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    out_data = a.data.transpose(axes)

    def factory():
        inverse = tuple(np.argsort(axes))
        return lambda g: (g.transpose(inverse),)

    return _record("transpose", out_data, (a,), factory)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"broadcast_to: cannot expand {a.data.shape} to {shape}") from None

    def factory():
        orig = a.data.shape
        return lambda g: (_unbroadcast(g, orig),)

    return _record("broadcast_to", out_data, (a,), factory)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat: needs at least one tensor")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise ShapeMismatch(f"concat: incompatible shapes {shapes} along axis {axis}") from None

    def factory():
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(np.split(g, splits, axis=axis))

    return _record("concat", out_data, tuple(tensors), factory)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries from `start` along `axis`."""
    a = as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeMismatch(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.data.shape}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index].copy()

    def factory():
        full_shape = a.data.shape
        return lambda g: (_scatter_slice(g, full_shape, index),)

    return _record("narrow", out_data, (a,), factory)


def _scatter_slice(g, shape, index):
    out = np.zeros(shape, dtype=np.float64)
    out[index] = g
    return out


# -- reductions --------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def factory():
        shape = a.data.shape

        def backward(g):
            g = np.asarray(g)
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return backward

    return _record("sum", out_data, (a,), factory)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def factory():
        shape = a.data.shape
        if axis is None:
            count = a.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([shape[ax] for ax in axis]))
        else:
            count = shape[axis]
        inv = 1.0 / count

        def backward(g):
            g = np.asarray(g) * inv
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return backward

    return _record("mean", out_data, (a,), factory)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduction; gradient flows to the first occurrence of the maximum."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def factory():
        data = a.data

        def backward(g):
            g = np.asarray(g)
            out = np.zeros_like(data)
            if axis is None:
                out.flat[int(np.argmax(data))] = g
                return (out,)
            idx = np.expand_dims(np.argmax(data, axis=axis), axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(out, idx, gg, axis=axis)
            return (out,)

        return backward

    return _record("amax", out_data, (a,), factory)


# -- pointwise nonlinearities -------------------------------------------------


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out_data = np.log(a.data)
        except FloatingPointError:
            raise NumericFailure("log: non-positive argument") from None

    def factory():
        da = a.data
        return lambda g: (g / da,)

    return _record("log", out_data, (a,), factory)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def factory():
        return lambda g: (g * out_data,)

    return _record("exp", out_data, (a,), factory)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="raise"):
        try:
            out_data = np.sqrt(a.data)
        except FloatingPointError:
            raise NumericFailure("sqrt: negative argument") from None

    def factory():
        return lambda g: (g * (0.5 / out_data),)

    return _record("sqrt", out_data, (a,), factory)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def factory():
        return lambda g: (g * out_data * (1.0 - out_data),)

    return _record("sigmoid", out_data, (a,), factory)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out_data = x * cdf

    def factory():
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        local = cdf + x * pdf
        return lambda g: (g * local,)

    return _record("gelu", out_data, (a,), factory)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def factory():
        sign = np.sign(a.data)
        return lambda g: (g * sign,)

    return _record("abs", np.abs(a.data), (a,), factory)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def factory():
        mask = (a.data >= lo) & (a.data <= hi)
        return lambda g: (g * mask,)

    return _record("clip", out_data, (a,), factory)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along `axis`; rows sum to one."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def factory():
        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return (out_data * (g - dot),)

        return backward

    return _record("softmax", out_data, (a,), factory)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    scale = np.sqrt(var + eps)
    out_data = centered / scale

    def factory():
        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * out_data).mean(axis=-1, keepdims=True)
            return ((g - gm - out_data * gy) / scale,)

        return backward

    return _record("layer_norm", out_data, (a,), factory)


def layer_norm_affine(a, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Fused layer_norm(a) * gamma + beta over the last axis."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    scale = np.sqrt(var + eps)
    y = centered / scale
    out_data = y * gamma.data + beta.data

    def factory():
        lead = tuple(range(a.data.ndim - 1))

        def backward(g):
            gy = g * gamma.data
            gm = gy.mean(axis=-1, keepdims=True)
            gyy = (gy * y).mean(axis=-1, keepdims=True)
            gx = (gy - gm - y * gyy) / scale
            ggamma = (g * y).sum(axis=lead) if lead else g * y
            gbeta = g.sum(axis=lead) if lead else g
            return gx, ggamma, gbeta

        return backward

    return _record("layer_norm_affine", out_data, (a, gamma, beta), factory)


def split_heads(a, heads: int) -> Tensor:
    """(L, C) -> (heads, L, C // heads) in one node."""
    a = as_tensor(a)
    l, c = a.data.shape
    if c % heads != 0:
        raise ShapeMismatch(f"split_heads: width {c} not divisible by {heads} heads")
    d = c // heads
    out_data = a.data.reshape(l, heads, d).transpose(1, 0, 2).copy()

    def factory():
        return lambda g: (g.transpose(1, 0, 2).reshape(l, c),)

    return _record("split_heads", out_data, (a,), factory)


def merge_heads(a) -> Tensor:
    """(heads, L, d) -> (L, heads * d); inverse of split_heads."""
    a = as_tensor(a)
    h, l, d = a.data.shape
    out_data = a.data.transpose(1, 0, 2).reshape(l, h * d).copy()

    def factory():
        return lambda g: (g.reshape(l, h, d).transpose(1, 0, 2),)

    return _record("merge_heads", out_data, (a,), factory)


def detach(a) -> Tensor:
    """Copy of `a` cut off from the tape."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# -- backward pass -------------------------------------------------------------


def backward(loss: Tensor, write_leaf_grads: bool = True) -> dict[int, np.ndarray]:
    """Reverse-traverse the tape from `loss`, returning node id -> gradient.

    Gradients for leaves with requires_grad are also accumulated into their
    ``.grad`` unless `write_leaf_grads` is False (used by inspection probes
    that must not perturb optimizer state).
    """
    if loss._graph is None or loss._node is None:
        raise ValueError("backward: loss is not attached to a graph")
    if loss.data.shape != ():
        raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.data.shape}")
    graph = loss._graph
    grads: dict[int, np.ndarray] = {loss._node: np.ones((), dtype=np.float64)}
    for nid in range(loss._node, -1, -1):
        gout = grads.get(nid)
        if gout is None:
            continue
        node = graph.nodes[nid]
        if node.backward is None:
            continue
        parent_grads = node.backward(gout)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericFailure(f"backward: non-finite gradient produced by node {nid} ({node.op})")
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    if write_leaf_grads:
        for nid, leaf in graph.leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            g = np.broadcast_to(g, leaf.data.shape).astype(np.float64)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return grads


# -- finite-difference oracle ----------------------------------------------------


def finite_difference_check(f, x: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar-valued function of `x`; determinism is
    enforced by evaluating twice and comparing bitwise. Error per coordinate is
    |analytic - central| / max(1e-8, |central|); the max over the checked
    coordinates is returned. `coords` restricts the check to a subset of flat
    indices (default: every coordinate).
    """
    if not isinstance(x, Tensor):
        raise TypeError("finite_difference_check: x must be a Tensor")
    x.requires_grad = True
    x.grad = None

    with Graph():
        out = f(x)
        if not isinstance(out, Tensor) or out.data.shape != ():
            raise ValueError("finite_difference_check: f must return a scalar Tensor")
        if not np.isfinite(out.data):
            raise NumericFailure("finite_difference_check: f returned non-finite value")
        backward(out)
    analytic = x.grad.copy()
    x.grad = None

    with no_grad():
        probe = f(x)
    if probe.data.tobytes() != out.data.tobytes():
        raise NumericFailure("finite_difference_check: f is not deterministic")

    flat = x.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad(), finite_checks(False):
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(f(x).data)
            flat[idx] = orig - h
            f_minus = float(f(x).data)
            flat[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericFailure("finite_difference_check: f returned non-finite value")
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic.reshape(-1)[idx] - central) / max(1e-8, abs(central))
            if err > worst:
                worst = err
    return worst
