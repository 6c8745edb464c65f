"""Dense FP32 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output
tensor; ``backward(loss)`` replays the recorded graph in reverse creation
order and accumulates gradients into ``.grad``. Gradients add up across
backward calls until ``zero_grads`` clears them, which is what weight
sharing relies on (one parameter appearing at many graph sites).

Determinism contract: all matrix products go through ``np.einsum`` with
``optimize=False``. Unlike BLAS GEMM, that kernel accumulates over the
contraction axis in a fixed order that does not depend on how many rows
are in the call, so batching rows together or splitting them apart gives
bitwise-identical per-row results. Reductions use numpy's pairwise
summation, which is deterministic for a fixed shape.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from .errors import ShapeError

_seq = itertools.count()
_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional FP32 array, optionally tracked by the autodiff graph.

    ``data`` is a row-major numpy array; ``grad`` is lazily allocated with
    the same shape. ``_seq`` is the creation index: reverse creation order
    is a valid topological order of the recorded graph, so backward walks
    ancestors sorted by it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _result(data, parents, backward_fn):
    """Wrap an op result, recording parents and the backward rule."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, dtype=data.dtype)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(data, requires_grad=False, dtype=data.dtype)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Populate ``.grad`` for every requires_grad tensor reachable from ``loss``.

    Contributions accumulate: calling backward twice doubles the grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    # Collect the reachable subgraph, then process in reverse creation order.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    upstream = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = upstream.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            _accum(t, g)
        if t._backward is None:
            continue
        for parent, pg in t._backward(g):
            if not (parent.requires_grad or parent._backward is not None):
                continue
            prev = upstream.get(id(parent))
            upstream[id(parent)] = pg if prev is None else prev + pg


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# kernels

def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """2-D matrix product with a row-count-independent accumulation order."""
    return np.einsum(
        "mk,kn->mn",
        np.ascontiguousarray(x),
        np.ascontiguousarray(w),
        optimize=False,
    )


def _mm_dx(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum(
        "mn,kn->mk",
        np.ascontiguousarray(g),
        np.ascontiguousarray(w),
        optimize=False,
    )


def _mm_dw(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum(
        "mk,mn->kn",
        np.ascontiguousarray(x),
        np.ascontiguousarray(g),
        optimize=False,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core operations

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; ``b`` must be a 2-D weight matrix."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    k, n = b.shape
    lead = a.shape[:-2]
    m = a.shape[-2]
    a2 = a.data.reshape(-1, k)
    out = _mm(a2, b.data).reshape(*lead, m, n)

    def bwd(g):
        g2 = g.reshape(-1, n)
        return ((a, _mm_dx(g2, b.data).reshape(a.shape)),
                (b, _mm_dw(a2, g2)))

    return _result(out, (a, b), bwd)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]`` with identical leading dims."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"batched_matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    nb = int(np.prod(lead)) if lead else 1
    a3 = np.ascontiguousarray(a.data.reshape(nb, m, k))
    b3 = np.ascontiguousarray(b.data.reshape(nb, k, n))
    out = np.empty((nb, m, n), dtype=a.data.dtype)
    for i in range(nb):
        out[i] = _mm(a3[i], b3[i])

    def bwd(g):
        g3 = g.reshape(nb, m, n)
        da = np.empty_like(a3)
        db = np.empty_like(b3)
        for i in range(nb):
            da[i] = _mm_dx(g3[i], b3[i])
            db[i] = _mm_dw(a3[i], g3[i])
        return (a, da.reshape(a.shape)), (b, db.reshape(b.shape))

    return _result(out.reshape(*lead, m, n), (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")

    def bwd(g):
        return (a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")

    def bwd(g):
        return (a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))

    return _result(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")

    def bwd(g):
        return (a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def bwd(g):
        return ((a, g * s),)

    return _result(out, (a,), bwd)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    out = a.data + c

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)),)

    return _result(out, (a,), bwd)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    out = a.data * c

    def bwd(g):
        return ((a, _unbroadcast(g * c, a.shape)),)

    return _result(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bwd(g):
        return ((a, g * out * (1.0 - out)),)

    return _result(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return ((a, g * (a.data > 0)),)

    return _result(out, (a,), bwd)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(
            f"concat_last: leading dims differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    da = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def bwd(g):
        return (a, g[..., :da]), (b, g[..., da:])

    return _result(out, (a, b), bwd)


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the batch (axis 0)."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"concat_batch: incompatible shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def bwd(g):
        return (a, g[:na]), (b, g[na:])

    return _result(out, (a, b), bwd)


def concat_time(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the sequence (axis 1)."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_time: incompatible shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return (a, g[:, :na]), (b, g[:, na:])

    return _result(out, (a, b), bwd)


def slice_time(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 1."""
    out = a.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return _result(out, (a,), bwd)


def take_batch(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; scatter-add on the way back."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return ((a, full),)

    return _result(out, (a,), bwd)


def take_time(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather positions along axis 1; scatter-add on the way back."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[:, idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), idx), g)
        return ((a, full),)

    return _result(out, (a,), bwd)


def stride_split(h: Tensor):
    """Split axis 1 into even positions, odd positions, and an odd-length carry.

    Returns ``(left, right, carry)`` where left holds positions 0,2,4,...
    and right holds 1,3,5,.... For odd n the final element goes to neither
    half and is returned as ``carry`` (otherwise None).
    """
    n = h.shape[1]
    if n < 2:
        raise ShapeError(f"stride_split needs length >= 2, got {n}")
    m = n // 2
    left = take_time(h, np.arange(0, 2 * m, 2))
    right = take_time(h, np.arange(1, 2 * m, 2))
    carry = take_time(h, np.array([n - 1])) if n % 2 else None
    return left, right, carry


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return _result(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return ((a, g.transpose(inv)),)

    return _result(out, (a,), bwd)


def index_last(a: Tensor, j: int) -> Tensor:
    """Select index ``j`` of the last axis (used for convolution taps)."""
    out = a.data[..., j].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., j] = g
        return ((a, full),)

    return _result(out, (a,), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _result(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return ((a, np.broadcast_to(g, a.shape).astype(a.data.dtype)),)

    return _result(out, (a,), bwd)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, last axis) + eps)."""
    if eps <= 0:
        raise ShapeError("rmsnorm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rmsnorm gain shape {tuple(gain.shape)} does not match features {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r
    out = xhat * gain.data

    def bwd(g):
        gg = g * gain.data
        dx = r * (gg - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        return (x, dx), (gain, dgain)

    return _result(out, (x, gain), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = np.mean(np.square(x.data - mu), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return (x, dx), (gain, dgain), (bias, dbias)

    return _result(out, (x, gain, bias), bwd)


def softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return ((x, y * (g - np.sum(g * y, axis=-1, keepdims=True))),)

    return _result(y, (x,), bwd)


def cumulative_mean_shifted(s: Tensor) -> Tensor:
    """Exclusive running mean along axis 1.

    out[:, 0] = 0 and out[:, i] = mean(s[:, 0:i]) for i >= 1, so position i
    sees only strictly earlier entries.
    """
    B, C = s.shape[0], s.shape[1]
    counts = np.arange(1, C + 1, dtype=s.data.dtype).reshape(1, C, *([1] * (s.data.ndim - 2)))
    means = np.cumsum(s.data, axis=1) / counts
    out = np.concatenate([np.zeros_like(s.data[:, :1]), means[:, :-1]], axis=1)

    def bwd(g):
        # out[:, i] = (1/i) * sum_{t<i} s[:, t]  =>  ds[:, t] = sum_{i>t} g[:, i] / i
        w = np.zeros_like(g)
        w[:, 1:] = g[:, 1:] / counts[:, : C - 1]
        tail = np.cumsum(w[:, ::-1], axis=1)[:, ::-1]
        ds = np.zeros_like(g)
        ds[:, : C - 1] = tail[:, 1:]
        return ((s, ds),)

    return _result(out, (s,), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    nrows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= nrows):
        raise IndexError(f"token id out of range [0, {nrows})")
    out = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, dt),)

    return _result(out, (table,), bwd)


def softmax_cross_entropy(logits: Tensor, targets, ignore_id=None) -> Tensor:
    """Mean negative log-softmax of the target class over non-ignored rows.

    ``logits`` is [N, V]; ``targets`` is a length-N id sequence. Stable via
    max subtraction; backward is (softmax - onehot) / count on kept rows.
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    N, V = logits.shape
    if t.shape[0] != N:
        raise ShapeError(f"targets length {t.shape[0]} != rows {N}")
    keep = np.ones(N, dtype=bool) if ignore_id is None else (t != ignore_id)
    checked = t[keep]
    if checked.size and (checked.min() < 0 or checked.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    count = int(keep.sum())
    if count == 0:
        raise ShapeError("softmax_cross_entropy: every target is ignored")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    sm = e / e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(N), np.where(keep, t, 0)]
    loss = np.asarray((nll * keep).sum() / count, dtype=logits.data.dtype)

    def bwd(g):
        dl = sm.copy()
        dl[np.arange(N), np.where(keep, t, 0)] -= 1.0
        dl *= (keep[:, None] / count)
        return ((logits, dl * g),)

    return _result(loss, (logits,), bwd)
