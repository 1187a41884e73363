"""Dense reverse-mode automatic differentiation on numpy float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its inputs and
a closure propagating the output gradient back to them. Graphs are only
recorded when at least one input requires a gradient, so inference with
constant inputs and parameters wrapped in :func:`no_grad` runs at plain
numpy speed.

Sparse operands (graph Laplacians, pooling maps) are ``scipy.sparse``
constants; gradients flow to the dense side only.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import sparse

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array with an optional gradient and its recorded history."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op")

    def __init__(self, data, requires_grad=False, _prev=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable tensor requiring a gradient.

        Raises
        ------
        ValueError
            If the tensor holds more than one element.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # drop intermediate gradients; leaves keep theirs
        for node in order:
            if node._prev:
                node.grad = None

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis):
        return max_(self, axis)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g, owned=False):
    # ``owned``: g was freshly allocated by the caller and may be kept as is
    if t.grad is None:
        if owned and g.dtype == np.float64:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(data, parents, backward, op):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need, _op=op)
    if need:
        out._prev = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        # a parent's gradient is never read again once its backward has run,
        # so one consumer may keep the buffer
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape), owned=not a.requires_grad)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape), owned=True)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _result(a.data * b.data, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask, owned=True)

    return _result(np.maximum(x.data, 0.0), (x,), backward, "relu")


def abs_(x):
    sign = np.sign(x.data)

    def backward(g):
        _accumulate(x, g * sign, owned=True)

    return _result(np.abs(x.data), (x,), backward, "abs")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out, owned=True)

    return _result(out, (x,), backward, "exp")


def sin(x):
    def backward(g):
        _accumulate(x, g * np.cos(x.data), owned=True)

    return _result(np.sin(x.data), (x,), backward, "sin")


def cos(x):
    def backward(g):
        _accumulate(x, -g * np.sin(x.data), owned=True)

    return _result(np.cos(x.data), (x,), backward, "cos")


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_(x, axis=None):
    axis = _norm_axis(axis, x.ndim)
    if axis is None:
        data = np.array([x.data.sum()])
    else:
        data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g.reshape(()), x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(data, (x,), backward, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def max_(x, axis):
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    axis = _norm_axis(axis, x.ndim)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx, owned=True)

    return _result(data, (x,), backward, "max")


def maximum(a, b):
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(take_a, g, 0.0), a.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(take_a, 0.0, g), b.shape), owned=True)

    return _result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def reshape(x, shape):
    def backward(g):
        _accumulate(x, g.reshape(x.shape), owned=True)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def index(x, key):
    """Basic/advanced indexing; duplicate indices accumulate on backward."""

    basic = isinstance(key, (int, slice)) or (
        isinstance(key, tuple) and all(isinstance(k, (int, slice)) or k is Ellipsis for k in key)
    )

    def backward(g):
        gx = np.zeros(x.shape)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        _accumulate(x, gx, owned=True)

    return _result(x.data[key], (x,), backward, "index")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)], owned=True)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """``a @ b`` with numpy batching rules; ``b`` is typically a 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim >= 2:
        k = a.shape[-1]
        if k != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape), owned=True)
            if b.requires_grad:
                _accumulate(b, a2.T @ g2, owned=True)

        return _result(data, (a, b), backward, "matmul")

    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if a.ndim > 1 else g * b.data
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g if b.ndim > 1 else g[..., None])
                if b.ndim == 1:
                    gb = gb[..., 0]
            _accumulate(b, _unbroadcast(gb, b.shape), owned=True)

    return _result(data, (a, b), backward, "matmul")


def _apply_rows(S, x):
    """``S @ x`` along axis -2 of ``x`` (rows), batched over leading axes."""
    if x.ndim == 2:
        return np.asarray(S @ x)
    lead = x.shape[:-2]
    n, f = x.shape[-2:]
    xt = np.moveaxis(x.reshape((-1, n, f)), 0, 1).reshape(n, -1)
    y = np.asarray(S @ xt).reshape(S.shape[0], -1, f)
    return np.moveaxis(y, 1, 0).reshape(lead + (S.shape[0], f))


def sparse_matmul(S, x):
    """Constant sparse matrix times dense features: ``[M, N] @ [..., N, F]``.

    Parameters
    ----------
    S : scipy.sparse matrix, shape (M, N)
    x : Tensor, shape (N, F) or (B, N, F)
    """
    x = as_tensor(x)
    if not sparse.issparse(S):
        S = sparse.csr_matrix(S)
    if S.shape[1] != x.shape[-2]:
        raise ValueError(f"sparse_matmul shape mismatch {S.shape} @ {x.shape}")

    def backward(g):
        _accumulate(x, _apply_rows(S.T, g), owned=True)

    return _result(_apply_rows(S, x.data), (x,), backward, "sparse_matmul")


def gather_rows(x, idx, per_sample=False):
    """Gather rows of ``x`` by integer index; ``-1`` entries yield zero rows.

    Parameters
    ----------
    x : Tensor, shape (N, F) or (B, N, F)
    idx : int array
        Shape ``S`` shared across the batch, or ``(B, *S)`` with
        ``per_sample=True`` (3-D ``x`` only).

    Returns
    -------
    Tensor of shape ``(*S, F)`` or ``(B, *S, F)``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n, f = x.shape[-2:]
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise IndexError(f"gather index out of range for {n} rows")
    # each batch block gets one trailing zero row that -1 entries point at
    local = np.where(idx >= 0, idx, n)
    if x.ndim == 2:
        batch = 1
        flat = local
    else:
        batch = x.shape[0]
        if per_sample:
            if idx.shape[0] != batch:
                raise ValueError("per-sample index needs a leading batch axis")
            offs = np.arange(batch).reshape((batch,) + (1,) * (idx.ndim - 1)) * (n + 1)
            flat = local + offs
        else:
            offs = np.arange(batch).reshape((batch,) + (1,) * idx.ndim) * (n + 1)
            flat = local[None] + offs
    xp = np.zeros((batch, n + 1, f))
    xp[:, :n] = x.data.reshape(batch, n, f)
    xp = xp.reshape(-1, f)
    flat1 = flat.reshape(-1)
    data = xp[flat1].reshape(flat.shape + (f,))

    def backward(g):
        S = sparse.csr_matrix(
            (np.ones(len(flat1)), (flat1, np.arange(len(flat1)))),
            shape=(batch * (n + 1), len(flat1)),
        )
        gp = np.asarray(S @ g.reshape(-1, f)).reshape(batch, n + 1, f)[:, :n]
        _accumulate(x, gp.reshape(x.shape), owned=True)

    return _result(data, (x,), backward, "gather")


def block_diag_apply(mats, x):
    """Apply a distinct sparse matrix to each batch item: ``y[b] = mats[b] @ x[b]``."""
    x = as_tensor(x)
    S = sparse.block_diag(mats, format="csr")
    b, n, f = x.shape
    m = mats[0].shape[0]
    if any(M.shape != (m, n) for M in mats):
        raise ValueError("all per-sample matrices must share one shape")

    def backward(g):
        _accumulate(x, np.asarray(S.T @ g.reshape(b * m, f)).reshape(x.shape), owned=True)

    data = np.asarray(S @ x.data.reshape(b * n, f)).reshape(b, m, f)
    return _result(data, (x,), backward, "block_diag")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch.

    Parameters
    ----------
    logits : Tensor, shape (B, C)
    labels : int array, shape (B,)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if len(labels) != b:
        raise ValueError(f"{len(labels)} labels for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (g.reshape(()) / b), owned=True)

    return _result(np.array([loss]), (logits,), backward, "cross_entropy")


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
