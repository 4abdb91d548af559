"""Dense n-d arrays with reverse-mode automatic differentiation.

Every learnable operation in this package is built on :class:`Tensor`.
The core is intentionally small: float32/float64 numpy storage, a tape of
parent links recorded during forward, and closure-based backward rules.
Broadcasting is restricted to bias addition and a handful of explicit
helpers (``scale_along``, ``add_bias``); all other binary ops require
exact shape agreement so that shape bugs surface at the op boundary that
caused them, not three calls later.

Tensors taking part in a live graph are never mutated; the only sanctioned
mutations are gradient accumulation during ``backward`` and parameter
updates performed by an optimizer *between* graph executions.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import GradientError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_forward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._forward = None
        self.op = "leaf"

    # -- basic introspection -------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A leaf view of this tensor's values; gradients do not flow through."""
        return Tensor(self.data, requires_grad=False)

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        backward(self)

    def __getitem__(self, key):
        return getitem(self, key)


def _node(data, parents, backward_fn, forward_fn, op):
    """Create a graph node. Records parents only when a gradient can flow."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    needs = any(p.requires_grad for p in parents)
    t.requires_grad = needs
    if needs:
        t._parents = tuple(parents)
        t._backward = backward_fn
        t._forward = forward_fn
        t.op = op
    else:
        t._parents = ()
        t._backward = None
        t._forward = None
        t.op = op
    return t


def _topo(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


class Graph:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, nodes, root):
        self.nodes = nodes
        self.root = root

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        return cls(_topo(root), root)

    def replay(self) -> np.ndarray:
        """Re-execute every recorded op from the current leaf values.

        Returns the recomputed root data; with unchanged inputs the result
        is bit-identical to the original forward pass.
        """
        for node in self.nodes:
            if node._forward is not None:
                node.data = node._forward()
        return self.root.data


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf of ``loss``.

    Accumulation is additive, both across uses within the graph and across
    repeated ``backward`` calls (callers zero grads between steps).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", dim="loss")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}

    def accum(node, g):
        key = id(node)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, accum)
        elif node.requires_grad:
            node.ensure_grad()
            node.grad += g


def grad_check(f, inputs, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must build a fresh scalar-valued graph from ``inputs`` on every
    call; all inputs must be float64 leaves with ``requires_grad`` set.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise GradientError("grad_check requires float64 inputs")
        x.zero_grad()
    loss = f(*inputs)
    if not np.isfinite(loss.data).all():
        raise GradientError("grad_check: non-finite loss")
    backward(loss)
    analytic = [np.array(x.grad if x.grad is not None else np.zeros_like(x.data)) for x in inputs]

    worst = 0.0
    for x, a in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data)
            flat[i] = orig - eps
            lo = float(f(*inputs).data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * eps)
        if not np.isfinite(num).all():
            raise GradientError("grad_check: non-finite numeric gradient")
        a_flat = a.reshape(-1)
        rel = np.abs(a_flat - num) / np.maximum(1.0, np.abs(a_flat))
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    for x in inputs:
        x.zero_grad()
    return worst


# -- elementwise and scalar ops ------------------------------------------------


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}", dim="shape")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}", dim="dtype")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    def fwd():
        return a.data + b.data
    def bwd(g, accum):
        accum(a, g)
        accum(b, g)
    return _node(fwd(), (a, b), bwd, fwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    def fwd():
        return a.data - b.data
    def bwd(g, accum):
        accum(a, g)
        accum(b, -g)
    return _node(fwd(), (a, b), bwd, fwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    def fwd():
        return a.data * b.data
    def bwd(g, accum):
        accum(a, g * b.data)
        accum(b, g * a.data)
    return _node(fwd(), (a, b), bwd, fwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    def fwd():
        return x.data * np.asarray(c, dtype=x.dtype)
    def bwd(g, accum):
        accum(x, g * np.asarray(c, dtype=x.dtype))
    return _node(fwd(), (x,), bwd, fwd, "scale")


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    def fwd():
        return x.data + np.asarray(c, dtype=x.dtype)
    def bwd(g, accum):
        accum(x, g)
    return _node(fwd(), (x,), bwd, fwd, "shift")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    def fwd():
        return np.exp(x.data)
    def bwd(g, accum):
        accum(x, g * out_data)
    return _node(out_data, (x,), bwd, fwd, "exp")


def log(x: Tensor) -> Tensor:
    def fwd():
        return np.log(x.data)
    def bwd(g, accum):
        accum(x, g / x.data)
    return _node(fwd(), (x,), bwd, fwd, "log")


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)
    def fwd():
        return np.sqrt(x.data)
    def bwd(g, accum):
        accum(x, g / (2.0 * out_data))
    return _node(out_data, (x,), bwd, fwd, "sqrt")


def reciprocal(x: Tensor) -> Tensor:
    out_data = 1.0 / x.data
    def fwd():
        return 1.0 / x.data
    def bwd(g, accum):
        accum(x, -g * out_data * out_data)
    return _node(out_data, (x,), bwd, fwd, "reciprocal")


def xlogx(x: Tensor) -> Tensor:
    """x * log(x) with the 0 * log(0) = 0 convention (and gradient 0 there)."""
    def fwd():
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x.data * np.log(x.data)
        return np.where(x.data > 0, out, 0.0).astype(x.dtype)
    def bwd(g, accum):
        with np.errstate(divide="ignore"):
            d = np.log(x.data) + 1.0
        accum(x, np.where(x.data > 0, g * d, 0.0).astype(x.dtype))
    return _node(fwd(), (x,), bwd, fwd, "xlogx")


def relu(x: Tensor) -> Tensor:
    def fwd():
        return np.maximum(x.data, 0)
    def bwd(g, accum):
        accum(x, g * (x.data > 0).astype(x.dtype))
    return _node(fwd(), (x,), bwd, fwd, "relu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    def fwd():
        return (0.5 * x.data * (1.0 + erf(x.data * np.asarray(_INV_SQRT2, x.dtype)))).astype(x.dtype)
    def bwd(g, accum):
        phi = 0.5 * (1.0 + erf(x.data * np.asarray(_INV_SQRT2, x.dtype)))
        dens = np.exp(-0.5 * x.data * x.data) * np.asarray(_INV_SQRT_2PI, x.dtype)
        accum(x, (g * (phi + x.data * dens)).astype(x.dtype))
    return _node(fwd(), (x,), bwd, fwd, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ShapeError(f"unknown activation kind {kind!r}", dim="kind")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "logaddexp")
    out_data = np.logaddexp(a.data, b.data)
    def fwd():
        return np.logaddexp(a.data, b.data)
    def bwd(g, accum):
        # -inf inputs contribute zero weight; guard the exp against nan.
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(a.data), 0.0, np.exp(a.data - out_data))
            wb = np.where(np.isneginf(b.data), 0.0, np.exp(b.data - out_data))
        accum(a, g * wa.astype(a.dtype))
        accum(b, g * wb.astype(b.dtype))
    return _node(out_data, (a, b), bwd, fwd, "logaddexp")


# -- shape ops -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    def fwd():
        return x.data.reshape(shape)
    def bwd(g, accum):
        accum(x, g.reshape(x.shape))
    return _node(fwd(), (x,), bwd, fwd, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    def fwd():
        return np.ascontiguousarray(x.data.transpose(axes))
    def bwd(g, accum):
        accum(x, g.transpose(inv))
    return _node(fwd(), (x,), bwd, fwd, "transpose")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError("concat: dtype mismatch", dim="dtype")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def fwd():
        return np.concatenate([t.data for t in tensors], axis=axis)
    def bwd(g, accum):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accum(t, g[tuple(idx)])
    return _node(fwd(), tuple(tensors), bwd, fwd, "concat")


def getitem(x: Tensor, key) -> Tensor:
    """Basic slicing/integer indexing with scatter-accumulated backward."""
    def fwd():
        return x.data[key]
    def bwd(g, accum):
        gx = np.zeros_like(x.data)
        gx[key] = g
        accum(x, gx)
    return _node(fwd(), (x,), bwd, fwd, "getitem")


def index_select(x: Tensor, idx, axis=0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    def fwd():
        return np.take(x.data, idx, axis=axis)
    def bwd(g, accum):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        accum(x, gx)
    return _node(fwd(), (x,), bwd, fwd, "index_select")


def take_along(x: Tensor, idx, axis) -> Tensor:
    """``np.take_along_axis`` as a differentiable op; ``idx`` is constant."""
    idx = np.asarray(idx, dtype=np.intp)
    def fwd():
        return np.take_along_axis(x.data, idx, axis=axis)
    def bwd(g, accum):
        gx = np.zeros_like(x.data)
        grids = list(np.indices(g.shape, sparse=False))
        grids[axis] = np.broadcast_to(idx, g.shape)
        np.add.at(gx, tuple(grids), g)
        accum(x, gx)
    return _node(fwd(), (x,), bwd, fwd, "take_along")


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    def fwd():
        return x.data.sum(axis=axes, keepdims=keepdims)
    def bwd(g, accum):
        if not keepdims:
            g = np.expand_dims(g, axes)
        accum(x, np.broadcast_to(g, x.shape).astype(x.dtype))
    return _node(fwd(), (x,), bwd, fwd, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis=-1, keepdims=False) -> Tensor:
    ax = axis % x.ndim
    m = np.max(x.data, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out_keep = m + np.log(np.exp(x.data - m).sum(axis=ax, keepdims=True))
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=ax)
    def fwd():
        mm = np.max(x.data, axis=ax, keepdims=True)
        mm = np.where(np.isfinite(mm), mm, 0.0)
        o = mm + np.log(np.exp(x.data - mm).sum(axis=ax, keepdims=True))
        return o if keepdims else np.squeeze(o, axis=ax)
    def bwd(g, accum):
        if not keepdims:
            g = np.expand_dims(g, ax)
        with np.errstate(invalid="ignore"):
            w = np.exp(x.data - out_keep)
        w = np.where(np.isneginf(x.data), 0.0, w)
        accum(x, (g * w).astype(x.dtype))
    return _node(out_data.astype(x.dtype), (x,), bwd, fwd, "logsumexp")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``: 2-D x 2-D, stacked with identical leading dims, or N-D x 2-D."""
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}", dim="dtype")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: inner dim mismatch {a.shape} @ {b.shape}", dim="K")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul: leading dims differ {a.shape} vs {b.shape} (no broadcasting)", dim="batch")
    def fwd():
        return a.data @ b.data
    def bwd(g, accum):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        accum(a, g @ bt)
        gb = at @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        accum(b, gb)
    return _node(fwd(), (a, b), bwd, fwd, "matmul")


def add_bias(x: Tensor, b: Tensor, axis=-1) -> Tensor:
    """The one sanctioned broadcast: add a 1-D bias along ``axis``."""
    ax = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match axis {ax} of {x.shape}",
                         dim="bias")
    expand = tuple(i for i in range(x.ndim) if i != ax)
    shape = [1] * x.ndim
    shape[ax] = b.shape[0]
    def fwd():
        return x.data + b.data.reshape(shape)
    def bwd(g, accum):
        accum(x, g)
        accum(b, g.sum(axis=expand))
    return _node(fwd(), (x, b), bwd, fwd, "add_bias")


def scale_along(x: Tensor, s: Tensor, axis=0) -> Tensor:
    """Multiply by a 1-D factor broadcast along every axis except ``axis``."""
    ax = axis % x.ndim
    if s.ndim != 1 or s.shape[0] != x.shape[ax]:
        raise ShapeError(f"scale_along: factor shape {s.shape} does not match axis {ax} of {x.shape}",
                         dim="scale")
    shape = [1] * x.ndim
    shape[ax] = s.shape[0]
    expand = tuple(i for i in range(x.ndim) if i != ax)
    def fwd():
        return x.data * s.data.reshape(shape)
    def bwd(g, accum):
        accum(x, g * s.data.reshape(shape))
        accum(s, (g * x.data).sum(axis=expand))
    return _node(fwd(), (x, s), bwd, fwd, "scale_along")


# -- softmax family -----------------------------------------------------------


def softmax(x: Tensor, axis=-1) -> Tensor:
    ax = axis % x.ndim
    m = np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    out_data = e / e.sum(axis=ax, keepdims=True)
    def fwd():
        mm = np.max(x.data, axis=ax, keepdims=True)
        ee = np.exp(x.data - mm)
        return ee / ee.sum(axis=ax, keepdims=True)
    def bwd(g, accum):
        dot = (g * out_data).sum(axis=ax, keepdims=True)
        accum(x, (out_data * (g - dot)).astype(x.dtype))
    return _node(out_data.astype(x.dtype), (x,), bwd, fwd, "softmax")


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    ax = axis % x.ndim
    m = np.max(x.data, axis=ax, keepdims=True)
    sh = x.data - m
    out_data = sh - np.log(np.exp(sh).sum(axis=ax, keepdims=True))
    def fwd():
        mm = np.max(x.data, axis=ax, keepdims=True)
        s = x.data - mm
        return s - np.log(np.exp(s).sum(axis=ax, keepdims=True))
    def bwd(g, accum):
        p = np.exp(out_data)
        accum(x, (g - p * g.sum(axis=ax, keepdims=True)).astype(x.dtype))
    return _node(out_data.astype(x.dtype), (x,), bwd, fwd, "log_softmax")


# -- normalization -----------------------------------------------------------


def _moment_normalize(x, axes, gamma, beta, eps, affine_shape):
    """Shared core: normalize over ``axes``, then apply a per-feature affine."""
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, x.dtype))
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data.reshape(affine_shape) + beta.data.reshape(affine_shape)
    n = int(np.prod([x.shape[a] for a in axes]))
    reduce_affine = tuple(i for i in range(x.ndim) if affine_shape[i] == 1)

    def fwd():
        m = x.data.mean(axis=axes, keepdims=True)
        v = x.data.var(axis=axes, keepdims=True)
        xh = (x.data - m) / np.sqrt(v + np.asarray(eps, x.dtype))
        return xh * gamma.data.reshape(affine_shape) + beta.data.reshape(affine_shape)

    def bwd(g, accum):
        gxhat = g * gamma.data.reshape(affine_shape)
        mean_g = gxhat.mean(axis=axes, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
        accum(x, (inv * (gxhat - mean_g - xhat * mean_gx)).astype(x.dtype))
        accum(gamma, (g * xhat).sum(axis=reduce_affine).reshape(gamma.shape))
        accum(beta, g.sum(axis=reduce_affine).reshape(beta.shape))

    del n
    return _node(out_data.astype(x.dtype), (x, gamma, beta), bwd, fwd, "normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Per-position normalization over the trailing feature axis."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shape {gamma.shape} vs feature dim {d}", dim="d")
    affine = [1] * x.ndim
    affine[-1] = d
    return _moment_normalize(x, (x.ndim - 1,), gamma, beta, eps, tuple(affine))


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Per-(sample, channel) normalization over time for [B, C, T] input."""
    if x.ndim != 3:
        raise ShapeError(f"instance_norm expects [B, C, T], got {x.shape}", dim="ndim")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine shape {gamma.shape} vs channels {c}", dim="C")
    return _moment_normalize(x, (2,), gamma, beta, eps, (1, c, 1))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5,
               running_stats=None, train=True, momentum=0.1) -> Tensor:
    """Per-feature normalization over the batch.

    [N, D] input normalizes over N per feature; [B, C, T] over (B, T) per
    channel. ``running_stats`` is a dict with "mean"/"var" numpy buffers,
    updated in train mode and required in eval mode.
    """
    if x.ndim == 2:
        axes, affine = (0,), (1, x.shape[1])
        feat = x.shape[1]
    elif x.ndim == 3:
        axes, affine = (0, 2), (1, x.shape[1], 1)
        feat = x.shape[1]
    else:
        raise ShapeError(f"batch_norm expects [N, D] or [B, C, T], got {x.shape}", dim="ndim")
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeError(f"batch_norm: affine shape {gamma.shape} vs features {feat}", dim="C")

    if train:
        if running_stats is not None:
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            running_stats["mean"] = (1 - momentum) * running_stats["mean"] + momentum * mu
            running_stats["var"] = (1 - momentum) * running_stats["var"] + momentum * var
            running_stats["count"] = running_stats.get("count", 0) + 1
        return _moment_normalize(x, axes, gamma, beta, eps, affine)

    if running_stats is None or running_stats.get("count", 0) == 0:
        raise ShapeError("batch_norm in eval mode requires populated running stats", dim="running_stats")
    mu = running_stats["mean"].reshape(affine).astype(x.dtype)
    inv = (1.0 / np.sqrt(running_stats["var"].reshape(affine) + eps)).astype(x.dtype)

    def fwd():
        xh = (x.data - mu) * inv
        return xh * gamma.data.reshape(affine) + beta.data.reshape(affine)

    reduce_affine = tuple(i for i in range(x.ndim) if affine[i] == 1)

    def bwd(g, accum):
        accum(x, (g * gamma.data.reshape(affine) * inv).astype(x.dtype))
        xh = (x.data - mu) * inv
        accum(gamma, (g * xh).sum(axis=reduce_affine).reshape(gamma.shape))
        accum(beta, g.sum(axis=reduce_affine).reshape(beta.shape))

    return _node(fwd(), (x, gamma, beta), bwd, fwd, "batch_norm_eval")


def normalize(x: Tensor, kind: str, gamma: Tensor, beta: Tensor, eps=1e-5,
              running_stats=None, train=True) -> Tensor:
    """Dispatch over the three normalization flavours used in the models."""
    if eps <= 0:
        raise ShapeError("normalize: eps must be > 0", dim="eps")
    if kind == "layer":
        return layer_norm(x, gamma, beta, eps)
    if kind == "instance":
        return instance_norm(x, gamma, beta, eps)
    if kind == "batch":
        return batch_norm(x, gamma, beta, eps, running_stats=running_stats, train=train)
    raise ShapeError(f"unknown normalize kind {kind!r}", dim="kind")


# -- dropout -------------------------------------------------------------------


def dropout(x: Tensor, p: float, rng, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p`` is zero."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, x.dtype)
    def fwd():
        return x.data * keep
    def bwd(g, accum):
        accum(x, g * keep)
    return _node(fwd(), (x,), bwd, fwd, "dropout")


# -- convolutions --------------------------------------------------------------


def conv1d_out_length(t, k, stride, padding=0):
    return (t + 2 * padding - k) // stride + 1


def _conv_windows(xp, k, stride):
    # [B, C, Tp] -> [B, C, Tout, k] view
    w = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    return w[:, :, ::stride, :]


def conv1d(x: Tensor, w: Tensor, b=None, stride=1, padding=0, groups=1) -> Tensor:
    """Cross-correlation over [B, Cin, T] with weight [Cout, Cin/groups, k]."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d: input must be [B, Cin, T], got {x.shape}", dim="ndim")
    if w.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [Cout, Cin/groups, k], got {w.shape}", dim="ndim")
    bsz, cin, t = x.shape
    cout, cin_g, k = w.shape
    if k < 1 or stride < 1:
        raise ShapeError("conv1d: kernel and stride must be >= 1", dim="k")
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"conv1d: Cin={cin}/Cout={cout} not divisible by groups={groups}", dim="groups")
    if cin_g != cin // groups:
        raise ShapeError(f"conv1d: weight Cin/groups is {cin_g}, expected {cin // groups}", dim="Cin")
    tout = conv1d_out_length(t, k, stride, padding)
    if tout < 1:
        raise ShapeError(f"conv1d: input too short (T={t}, k={k}, padding={padding})", dim="T")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {b.shape}, expected ({cout},)", dim="Cout")

    def compute():
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
        win = _conv_windows(xp, k, stride)
        win_g = win.reshape(bsz, groups, cin // groups, tout, k)
        w_g = w.data.reshape(groups, cout // groups, cin // groups, k)
        y = np.einsum("bgctk,gock->bgot", win_g, w_g, optimize=True)
        y = np.ascontiguousarray(y.reshape(bsz, cout, tout))
        if b is not None:
            y += b.data[None, :, None]
        return y

    def bwd(g, accum):
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
        win_g = _conv_windows(xp, k, stride).reshape(bsz, groups, cin // groups, tout, k)
        g_g = g.reshape(bsz, groups, cout // groups, tout)
        w_g = w.data.reshape(groups, cout // groups, cin // groups, k)
        if w.requires_grad:
            gw = np.einsum("bgctk,bgot->gock", win_g, g_g, optimize=True)
            accum(w, gw.reshape(w.shape).astype(w.dtype))
        if x.requires_grad:
            contrib = np.einsum("gock,bgot->bgctk", w_g, g_g, optimize=True)
            gxp = np.zeros((bsz, groups, cin // groups, t + 2 * padding), dtype=x.dtype)
            for j in range(k):
                gxp[:, :, :, j:j + (tout - 1) * stride + 1:stride] += contrib[:, :, :, :, j]
            gx = gxp.reshape(bsz, cin, t + 2 * padding)
            if padding:
                gx = gx[:, :, padding:padding + t]
            accum(x, np.ascontiguousarray(gx))
        if b is not None and b.requires_grad:
            accum(b, g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _node(compute(), parents, bwd, compute, "conv1d")


def conv_transpose1d(x: Tensor, w: Tensor, b=None, stride=1) -> Tensor:
    """Adjoint of conv1d: [B, Cin, T] with weight [Cin, Cout, k] -> [B, Cout, (T-1)*stride+k]."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv_transpose1d: got input {x.shape}, weight {w.shape}", dim="ndim")
    bsz, cin, t = x.shape
    w_cin, cout, k = w.shape
    if k < 1 or stride < 1:
        raise ShapeError("conv_transpose1d: kernel and stride must be >= 1", dim="k")
    if w_cin != cin:
        raise ShapeError(f"conv_transpose1d: weight Cin={w_cin} but input Cin={cin}", dim="Cin")
    tout = (t - 1) * stride + k
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose1d: bias shape {b.shape}, expected ({cout},)", dim="Cout")

    def compute():
        contrib = np.einsum("bct,cok->botk", x.data, w.data, optimize=True)
        y = np.zeros((bsz, cout, tout), dtype=x.dtype)
        for j in range(k):
            y[:, :, j:j + (t - 1) * stride + 1:stride] += contrib[:, :, :, j]
        if b is not None:
            y += b.data[None, :, None]
        return y

    def bwd(g, accum):
        gw_view = np.lib.stride_tricks.sliding_window_view(g, k, axis=-1)[:, :, ::stride, :]
        if x.requires_grad:
            accum(x, np.einsum("botk,cok->bct", gw_view, w.data, optimize=True).astype(x.dtype))
        if w.requires_grad:
            accum(w, np.einsum("bct,botk->cok", x.data, gw_view, optimize=True).astype(w.dtype))
        if b is not None and b.requires_grad:
            accum(b, g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _node(compute(), parents, bwd, compute, "conv_transpose1d")
