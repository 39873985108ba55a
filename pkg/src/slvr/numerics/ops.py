"""Differentiable ops over :class:`Tensor`.

Broadcasting follows numpy rules; gradients are summed back over
broadcast axes. Raw arrays and Python scalars are accepted as constants.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor

LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                          "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, (a, b),
                          lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                          "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return Tensor._result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def gelu(a) -> Tensor:
    """tanh-approximated GELU, fused for speed and smoothness."""
    a = as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), back, "gelu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return Tensor._result(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value")
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    s = np.sqrt(a.data)
    return Tensor._result(s, (a,), lambda g: (g * 0.5 / s,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def maximum0(a) -> Tensor:
    """Hinge max(0, a); same as relu, named for reward formulas."""
    return relu(a)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    return Tensor._result(np.minimum(a.data, b.data), (a, b),
                          lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                          "minimum")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if a.ndim > 2 and b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
        return Tensor._result(out, (a, b), back, "matmul")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(ad @ bd, (a, b), back, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


# -- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm(a, axis: int = -1, eps: float = 0.0) -> Tensor:
    """L2 norm along ``axis``; ``eps`` smooths the gradient at zero."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis) + eps)

    def back(g):
        denom = np.expand_dims(np.where(n > 0, n, 1.0), axis)
        return (np.expand_dims(g, axis) * x / denom,)

    return Tensor._result(n, (a,), back, "norm")


# -- indexing ----------------------------------------------------------------

def _scatter_add(n_rows: int, ids: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row-wise segment sum: out[ids[k]] += g[k]. Deterministic order."""
    out = np.zeros((n_rows,) + g.shape[1:])
    if ids.size == 0:
        return out
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    uniq, starts = np.unique(sorted_ids, return_index=True)
    out[uniq] = np.add.reduceat(g[order], starts, axis=0)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take_rows(a, batch_idx, pos_idx) -> Tensor:
    """Gather ``a[batch_idx[k], pos_idx[k]]`` from a [B, L, d] tensor into [N, d]."""
    a = as_tensor(a)
    bi = np.asarray(batch_idx, dtype=np.int64)
    pi = np.asarray(pos_idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        flat = _scatter_add(shape[0] * shape[1], bi * shape[1] + pi, g)
        return (flat.reshape(shape),)

    return Tensor._result(a.data[bi, pi], (a,), back, "take_rows")


def scatter_rows(values, batch_idx, pos_idx, shape) -> Tensor:
    """Place [N, d] rows into a zero [B, L, d] tensor; inverse of ``take_rows``."""
    v = as_tensor(values)
    bi = np.asarray(batch_idx, dtype=np.int64)
    pi = np.asarray(pos_idx, dtype=np.int64)
    out = np.zeros(shape)
    out[bi, pi] = v.data
    return Tensor._result(out, (v,), lambda g: (g[bi, pi],), "scatter_rows")


def index(a, idx) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if isinstance(idx, np.ndarray) and idx.dtype.kind == "i" and idx.ndim == 1:
            return (_scatter_add(shape[0], idx, g),)
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(a.data[idx], (a,), back, "index")


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        return (_scatter_add(shape[0], ids.reshape(-1), g.reshape(-1, shape[-1])),)

    return Tensor._result(table.data[ids], (table,), back, "embedding")


# -- normalisation and losses -------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._result(p, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), back, "log_softmax")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean NLL of integer ``targets`` under row-wise softmax of [n, V] logits."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != t.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs {t.shape[0]} targets")
    n, v = logits.shape
    if np.any(t < 0) or np.any(t >= v):
        raise IndexError(f"target index out of range for vocabulary of size {v}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), t]))
    p = np.exp(z - lse[:, None])

    def back(g):
        d = p.copy()
        d[np.arange(n), t] -= 1.0
        return (d * (float(g) / n),)

    return Tensor._result(np.array(loss), (logits,), back, "softmax_cross_entropy")


def mse(a, b, reduction: str = "mean_over_dims") -> Tensor:
    """Squared error with two reductions.

    ``sum_over_tokens``: sum over every entry (sum_t ||a_t - b_t||^2).
    ``mean_over_dims``: squared norm divided by the last-axis width d.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    if reduction == "sum_over_tokens":
        c = 1.0
    elif reduction == "mean_over_dims":
        c = 1.0 / a.shape[-1]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = c * float((diff * diff).sum())
    return Tensor._result(np.array(out), (a, b),
                          lambda g: (2.0 * c * float(g) * diff, -2.0 * c * float(g) * diff), "mse")


def layernorm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain {gain.shape}/bias {bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), back, "layernorm")
