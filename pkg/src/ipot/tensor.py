"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a classic tape: while a :class:`DiffGraph` is active (see
:func:`record`), every operation appends a node holding the output tensor,
its parents, and a backward closure. ``backward(loss)`` walks the tape in
exact reverse append order, so the traversal is trivially topological and
touches each node exactly once.

Outside a recording context the same functions execute as plain numpy,
which is what evaluation and benchmarking use.

Only the broadcasting the model needs is supported: scalar-vs-tensor
(`scale`), row-wise bias addition (`add_bias`), and stacked matmul where
one operand carries extra leading batch axes. Anything fancier raises.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, UsageError

_ids = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A shape-tagged float64 array, optionally carrying a gradient buffer.

    ``grad`` is populated (accumulated) by backward passes; it always has
    the same shape as ``data``. ``node_id`` identifies the tensor inside
    whatever graph recorded it.
    """

    __slots__ = ("data", "grad", "node_id", "name", "_graph")

    def __init__(self, data, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.node_id = next(_ids)
        self.name = name
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A leaf tensor sharing this tensor's buffer (drops graph links)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.node_id = next(_ids)
        t.name = self.name
        t._graph = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "tag")

    def __init__(self, out, parents, backward_fn, tag):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tag = tag


class DiffGraph:
    """Append-only operation tape. Reverse append order is backward order."""

    def __init__(self):
        self.nodes = []
        self.last_visit_count = 0

    def _append(self, out, parents, backward_fn, tag):
        out._graph = self
        self.nodes.append(_Node(out, parents, backward_fn, tag))

    def release(self):
        """Drop the tape. Tensors and graph reference each other, so a hot
        training loop frees hundreds of MB per batch promptly by calling
        this instead of waiting for the cycle collector."""
        for node in self.nodes:
            node.out._graph = None
        self.nodes.clear()

    def backward(self, loss):
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor the
        loss depends on. Repeated calls accumulate (they do not overwrite)."""
        if loss.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss._graph is not self:
            raise UsageError("loss was not produced by this graph")
        # Per-call adjoints live in a scratch map so that repeated backward
        # calls add an identical contribution instead of compounding. Stored
        # buffers are never mutated in place (merges allocate), so backward
        # closures may hand over shared or freshly built arrays alike.
        adjoints = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}

        def accumulate(tensor, contribution):
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + contribution
            else:
                adjoints[key] = contribution
                holders[key] = tensor

        self.last_visit_count = 0
        for node in reversed(self.nodes):
            self.last_visit_count += 1
            out_adj = adjoints.pop(id(node.out), None)
            if out_adj is None:
                continue
            holders.setdefault(id(node.out), node.out)
            node.backward_fn(np.asarray(out_adj, dtype=np.float64), accumulate)
            # Fold the finished adjoint into the tensor's persistent grad.
            _add_grad(node.out, out_adj)
        for key, adj in adjoints.items():
            _add_grad(holders[key], adj)


def _add_grad(tensor, adj):
    adj = np.asarray(adj, dtype=np.float64)
    if adj.shape != tensor.data.shape:
        adj = adj.reshape(tensor.data.shape)
    if tensor.grad is None:
        # Adjoint buffers are never mutated after the walk, so adopting the
        # reference is safe; callers must not update .grad in place.
        tensor.grad = adj
    else:
        tensor.grad = tensor.grad + adj


_ACTIVE_GRAPHS = []


@contextmanager
def record(graph=None):
    """Activate a graph; ops called inside the block are taped onto it."""
    g = DiffGraph() if graph is None else graph
    _ACTIVE_GRAPHS.append(g)
    try:
        yield g
    finally:
        _ACTIVE_GRAPHS.pop()


def _graph():
    return _ACTIVE_GRAPHS[-1] if _ACTIVE_GRAPHS else None


def backward(loss):
    """Backward pass from a scalar loss through the graph that made it."""
    if loss._graph is None:
        raise UsageError("loss is a leaf; it was not produced inside record()")
    loss._graph.backward(loss)


# ---------------------------------------------------------------------------
# FLOP accounting. An active counter tallies floating-point work by category;
# the per-element costs for transcendental ops are fixed conventions shared
# with the analytic cost model in ipot.bench.
# ---------------------------------------------------------------------------

SOFTMAX_FLOPS_PER_ELEMENT = 5   # max, subtract, exp, sum, divide
LAYERNORM_FLOPS_PER_ELEMENT = 8
GELU_FLOPS_PER_ELEMENT = 10


class FlopCounter:
    """Per-category multiply-add tallies for ops executed while active."""

    CATEGORIES = ("matmul", "pointwise", "softmax", "layernorm", "gelu")

    def __init__(self):
        self.by_category = dict.fromkeys(self.CATEGORIES, 0)

    def add(self, category, flops):
        self.by_category[category] += int(flops)

    @property
    def total(self):
        return sum(self.by_category.values())


_ACTIVE_COUNTERS = []


@contextmanager
def count_flops():
    counter = FlopCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.pop()


def _tally(category, flops):
    if _ACTIVE_COUNTERS:
        _ACTIVE_COUNTERS[-1].add(category, flops)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Sum a gradient over the leading axes numpy broadcasting introduced."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b):
    """Matrix product. Either operand may carry extra leading batch axes;
    the contracted extents must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))
    _tally("matmul", 2 * out.data.size // out.data.shape[-1]
           * a.data.shape[-1] * out.data.shape[-1])
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(a, _unbroadcast(
                np.matmul(out_adj, np.swapaxes(b.data, -1, -2)), a.data.shape))
            if b.data.ndim == 2 and a.data.ndim > 2:
                # Weight gradient: flatten the batch axes into one tall GEMM
                # instead of materializing a stack of per-sample products.
                k = a.data.shape[-1]
                n = out_adj.shape[-1]
                accumulate(b, a.data.reshape(-1, k).T @ out_adj.reshape(-1, n))
            else:
                accumulate(b, _unbroadcast(
                    np.matmul(np.swapaxes(a.data, -1, -2), out_adj),
                    b.data.shape))
        g._append(out, (a, b), backward_fn, "matmul")
    return out


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op} requires equal shapes, got {a.shape} and {b.shape}"
        )


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim == 0:
        return scale_shift(a, 1.0, float(b.data))
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(a, out_adj)
            accumulate(b, out_adj)
        g._append(out, (a, b), backward_fn, "add")
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim == 0:
        return scale_shift(a, 1.0, -float(b.data))
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(a, out_adj)
            accumulate(b, -out_adj)
        g._append(out, (a, b), backward_fn, "sub")
    return out


def mul(a, b):
    """Hadamard product of equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(a, out_adj * b.data)
            accumulate(b, out_adj * a.data)
        g._append(out, (a, b), backward_fn, "mul")
    return out


def scale(a, factor):
    """Multiply by a python scalar."""
    return scale_shift(a, float(factor), 0.0)


def scale_shift(a, factor, offset):
    a = _as_tensor(a)
    out = Tensor(a.data * factor + offset if offset else a.data * factor)
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(a, out_adj * factor)
        g._append(out, (a,), backward_fn, "scale")
    return out


def add_bias(x, b):
    """Add a width-d bias vector to every row of a (..., d) tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"add_bias needs bias (d,) matching last axis, got {x.shape} + {b.shape}"
        )
    out = Tensor(x.data + b.data)
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(x, out_adj)
            accumulate(b, out_adj.reshape(-1, b.data.shape[0]).sum(axis=0))
        g._append(out, (x, b), backward_fn, "add_bias")
    return out


def affine(x, w, b):
    """x @ w + b with the bias broadcast across rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"affine shapes incompatible: {x.shape} @ {w.shape} + {b.shape}"
        )
    out_data = np.matmul(x.data, w.data)
    out_data += b.data
    out = Tensor(out_data)
    _tally("matmul", 2 * out.data.size // out.data.shape[-1]
           * x.data.shape[-1] * out.data.shape[-1])
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(x, np.matmul(out_adj, w.data.T))
            k, n = w.data.shape
            accumulate(w, x.data.reshape(-1, k).T @ out_adj.reshape(-1, n))
            accumulate(b, out_adj.reshape(-1, n).sum(axis=0))
        g._append(out, (x, w, b), backward_fn, "affine")
    return out


def softmax_rows(x):
    """Row-wise softmax over the last axis, stabilized by max subtraction.

    Rows sum to one exactly up to rounding; non-finite input is rejected.
    """
    x = _as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains NaN or Inf")
    out_data = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(out_data, out=out_data)
    out_data /= out_data.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)
    _tally("softmax", SOFTMAX_FLOPS_PER_ELEMENT * out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            inner = np.einsum("...i,...i->...", out_adj, out_data)[..., None]
            accumulate(x, (out_adj - inner) * out_data)
        g._append(out, (x,), backward_fn, "softmax")
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply the
    affine (gamma, beta). eps sits inside the square root."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine must be ({d},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.einsum("...i,...i->...", centered, centered)[..., None] / d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered
    xhat *= inv_std
    out_data = xhat * gamma.data
    out_data += beta.data
    out = Tensor(out_data)
    _tally("layernorm", LAYERNORM_FLOPS_PER_ELEMENT * out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            gy = out_adj * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            accumulate(x, (gy - m1 - xhat * m2) * inv_std)
            flat_adj = out_adj.reshape(-1, d)
            accumulate(gamma, (flat_adj * xhat.reshape(-1, d)).sum(axis=0))
            accumulate(beta, flat_adj.sum(axis=0))
        g._append(out, (x, gamma, beta), backward_fn, "layer_norm")
    return out


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)
    _tally("gelu", GELU_FLOPS_PER_ELEMENT * out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            accumulate(x, out_adj * (cdf + x.data * pdf))
        g._append(out, (x,), backward_fn, "gelu")
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(x, out_adj.reshape(x.data.shape))
        g._append(out, (x,), backward_fn, "reshape")
    return out


def swapaxes(x, axis_a, axis_b):
    x = _as_tensor(x)
    out = Tensor(np.swapaxes(x.data, axis_a, axis_b))
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(x, np.swapaxes(out_adj, axis_a, axis_b))
        g._append(out, (x,), backward_fn, "swapaxes")
    return out


def gather_rows(x, indices):
    """Select rows of a 2-D tensor: out[i] = x[indices[i]]. Indices may
    repeat; the backward pass scatter-adds into the source rows."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got {x.shape}")
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[indices])
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            buf = np.zeros_like(x.data)
            np.add.at(buf, indices, out_adj)
            accumulate(x, buf)
        g._append(out, (x,), backward_fn, "gather_rows")
    return out


def tile_leading(x, count):
    """Repeat a tensor along a fresh leading axis: (...) -> (count, ...)."""
    x = _as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, (count, *x.data.shape)).copy())
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            accumulate(x, out_adj.sum(axis=0))
        g._append(out, (x,), backward_fn, "tile_leading")
    return out


def tensor_sum(x, axes=None):
    """Sum over the given axes (all axes when None), returning the reduced
    tensor (a scalar for a full reduction)."""
    x = _as_tensor(x)
    if axes is None:
        out_data = np.asarray(x.data.sum())
    else:
        out_data = x.data.sum(axis=axes)
    out = Tensor(out_data)
    _tally("pointwise", x.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            if axes is None:
                accumulate(x, np.broadcast_to(out_adj, x.data.shape))
            else:
                expanded = np.expand_dims(out_adj, axes)
                accumulate(x, np.broadcast_to(expanded, x.data.shape))
        g._append(out, (x,), backward_fn, "sum")
    return out


def sqrt(x):
    x = _as_tensor(x)
    if (x.data < 0).any():
        raise NumericError("sqrt of negative value")
    y = np.sqrt(x.data)
    out = Tensor(y)
    _tally("pointwise", out.data.size)
    g = _graph()
    if g is not None:
        def backward_fn(out_adj, accumulate):
            # Subgradient 0 at exactly zero keeps perfect fits finite.
            accumulate(x, out_adj * np.where(y > 0.0, 0.5 / np.where(y > 0.0, y, 1.0), 0.0))
        g._append(out, (x,), backward_fn, "sqrt")
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(build_loss, params, h=1e-6, max_entries_per_tensor=16, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss`` must deterministically rebuild the scalar loss from the
    current contents of ``params`` (a sequence of leaf tensors). Entries are
    checked exhaustively for small tensors and on a seeded sample otherwise.
    Returns the maximum per-entry relative error.

    Central differences of a loss of magnitude f resolve gradients down to
    roughly eps_machine * f / h; entries where both routes sit within five
    orders of that noise floor are checked for agreement at the floor
    itself rather than relatively (they carry no resolvable signal).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with record() as g:
        loss = build_loss()
    g.backward(loss)
    grads = [None if p.grad is None else p.grad.copy() for p in params]

    fd_noise = np.finfo(np.float64).eps * (1.0 + abs(loss.data.item())) / h
    resolve_gate = 1e5 * fd_noise

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ad in zip(params, grads):
        if ad is None:
            ad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries_per_tensor:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_entries_per_tensor, replace=False)
        ad_flat = ad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().data.item()
            flat[i] = orig - h
            down = build_loss().data.item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            magnitude = max(abs(ad_flat[i]), abs(fd))
            denom = magnitude if magnitude > resolve_gate else resolve_gate
            worst = max(worst, abs(ad_flat[i] - fd) / denom)
    return worst
