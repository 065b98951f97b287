"""Dense numpy arrays with reverse-mode differentiation.

Every op returns a new :class:`DiffArray`.  When at least one input requires
a gradient, the result remembers its parents and a closure mapping the output
gradient to one gradient per parent; :meth:`DiffArray.backward` walks that
graph in reverse topological order.

Gradients accumulate additively into leaves, so callers zero them between
optimizer steps.  Heavy building blocks (attention, layer norm, the GRU
recurrence) are fused ops with hand-written backward passes; their
correctness is checked against finite differences in the test suite.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class DiffArray:
    """A dense array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "DiffArray":
        return DiffArray(self.values.copy(), dtype=self.dtype)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on an array that does not require grad")
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.values)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        pending = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = np.array(g, dtype=node.dtype) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

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

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            raise TypeError("division by a DiffArray is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _topological_order(root: DiffArray) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_diff(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x, dtype=dtype)


def _result(values, parents: Sequence[DiffArray], backward: Callable) -> DiffArray:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return DiffArray(values, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return DiffArray(values)


def _pair(a, b):
    """Coerce operands, letting a constant adopt the other operand's dtype."""
    if isinstance(a, DiffArray) and not isinstance(b, DiffArray):
        return a, DiffArray(b, dtype=a.dtype)
    if isinstance(b, DiffArray) and not isinstance(a, DiffArray):
        return DiffArray(a, dtype=b.dtype), b
    return as_diff(a), as_diff(b)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ----------------------------------------------------------------- elementwise

def add(a, b) -> DiffArray:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), backward)


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), backward)


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.values * b.values, (a, b), backward)


def exp(x) -> DiffArray:
    x = as_diff(x)
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> DiffArray:
    x = as_diff(x)
    return _result(np.log(x.values), (x,), lambda g: (g / x.values,))


def relu(x) -> DiffArray:
    x = as_diff(x)
    positive = x.values > 0
    return _result(np.where(positive, x.values, 0.0).astype(x.dtype), (x,), lambda g: (g * positive,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> DiffArray:
    """Tanh-approximated GELU."""
    x = as_diff(x)
    v = x.values
    sq = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * sq * v))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), backward)


def tanh(x) -> DiffArray:
    x = as_diff(x)
    out = np.tanh(x.values)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x) -> DiffArray:
    x = as_diff(x)
    out = _sigmoid(x.values)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def dropout(x, p: float, rng: np.random.Generator | None, train: bool = True) -> DiffArray:
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity otherwise."""
    x = as_diff(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(x.shape, dtype=np.float32 if x.dtype == np.float32 else np.float64) >= p
    keep = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.values * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------- reductions / shape

def sum(x, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001 - mirrors numpy
    x = as_diff(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> DiffArray:
    x = as_diff(x)
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape) -> DiffArray:
    x = as_diff(x)
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> DiffArray:
    x = as_diff(x)
    inverse = np.argsort(axes)
    return _result(x.values.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def take(x, index) -> DiffArray:
    """Basic or advanced indexing; gradient scatter-adds back into ``x``."""
    x = as_diff(x)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.values[index], (x,), backward)


def take_rows(x, rows: np.ndarray) -> DiffArray:
    """Select rows of a 2-D array; ``rows`` must be unique (fast scatter)."""
    x = as_diff(x)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[rows] = g
        return (full,)

    return _result(x.values[rows], (x,), backward)


def concat(parts: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    parts = [as_diff(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([p.values for p in parts], axis=axis), parts, backward)


def matmul(a, b) -> DiffArray:
    """Batched matrix product over the last two axes (both operands ≥ 2-D)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.values @ b.values, (a, b), backward)


def linear(x, weight, bias=None) -> DiffArray:
    """``x @ weight + bias`` for x of shape (..., in) and weight (in, out)."""
    x, weight = _pair(x, weight)
    lead = x.shape[:-1]
    flat = x.values.reshape(-1, x.shape[-1])
    out = flat @ weight.values
    if bias is not None:
        bias = as_diff(bias, dtype=x.dtype)
        out = out + bias.values

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.values.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(*lead, -1), parents, backward)


def embedding(table, indices: np.ndarray) -> DiffArray:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = as_diff(table)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.values[indices], (table,), backward)


# ----------------------------------------------------------------- numerics

def softmax(v) -> np.ndarray:
    """Max-shifted softmax of a real vector (or along the last axis)."""
    v = np.asarray(v.values if isinstance(v, DiffArray) else v, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if np.isnan(v).any():
        raise ValueError("softmax input contains NaN")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(v: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def layer_norm(x, gain, shift, eps: float = 1e-8) -> DiffArray:
    """Normalise over the last axis: ``gain * (x - mean) / sqrt(var + eps) + shift``."""
    x = as_diff(x)
    gain, shift = as_diff(gain, dtype=x.dtype), as_diff(shift, dtype=x.dtype)
    if gain.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ValueError(f"gain/shift shapes {gain.shape}/{shift.shape} do not match last axis of {x.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    centered = x.values - x.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.values + shift.values

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gn = g * gain.values
        gx = inv_std * (gn - gn.mean(axis=-1, keepdims=True)
                        - normed * (gn * normed).mean(axis=-1, keepdims=True))
        return gx, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, shift), backward)


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked scaled dot-product softmax weights; ``mask`` True where attending is allowed."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("attention mask has a fully masked row")
    scores = q @ np.swapaxes(k, -1, -2)
    scores *= q.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    np.copyto(scores, -np.inf, where=~mask)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def attention(q, k, v, mask) -> DiffArray:
    """Scaled dot-product attention over (..., positions, dim) arrays.

    Row t of the output is a convex combination of rows of ``v`` at the
    positions ``mask[..., t, :]`` permits.
    """
    q, k, v = as_diff(q), as_diff(k, dtype=q.dtype), as_diff(v, dtype=q.dtype)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = attention_weights(q.values, k.values, mask).astype(q.dtype, copy=False)
    out = w @ v.values

    def backward(g):
        gw = g @ np.swapaxes(v.values, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = _unbroadcast(gs @ k.values, q.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ q.values, k.shape) if k.requires_grad else None
        gv = _unbroadcast(np.swapaxes(w, -1, -2) @ g, v.shape) if v.requires_grad else None
        return gq, gk, gv

    return _result(out, (q, k, v), backward)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def causal_attention(q, k, v, attend_mask=None) -> DiffArray:
    """Attention with the lower-triangular mask unless one is supplied."""
    q = as_diff(q)
    if attend_mask is None:
        attend_mask = causal_mask(q.shape[-2])
    return attention(q, k, v, attend_mask)


# ----------------------------------------------------------------- GRU

# Gate convention (kept fixed throughout the package):
#   z  = sigmoid(x W_z + h U_z + b_z)          update gate
#   r  = sigmoid(x W_r + h U_r + b_r)          reset gate
#   h~ = tanh(x W_h + (r * h) U_h + b_h)       candidate
#   h' = (1 - z) * h + z * h~
# The three gates are packed along the last axis of W (in, 3H), U (H, 3H), b (3H) as [z | r | h].

def _check_gru(x_dim: int, h_dim: int, w, u, b):
    if w.shape != (x_dim, 3 * h_dim) or u.shape != (h_dim, 3 * h_dim) or b.shape != (3 * h_dim,):
        raise ValueError(
            f"GRU parameter shapes W={w.shape} U={u.shape} b={b.shape} do not match input {x_dim}, hidden {h_dim}")


def gru_step(x, h_prev, params: dict) -> DiffArray:
    """One GRU update composed from primitive ops; params holds ``W``, ``U``, ``b``."""
    x, h_prev = as_diff(x), as_diff(h_prev)
    w, u, b = (as_diff(params[key], dtype=x.dtype) for key in ("W", "U", "b"))
    h_dim = h_prev.shape[-1]
    _check_gru(x.shape[-1], h_dim, w, u, b)
    xs = x if x.ndim == 2 else reshape(x, (1, -1))
    hs = h_prev if h_prev.ndim == 2 else reshape(h_prev, (1, -1))
    xw = linear(xs, w, b)
    hu = matmul(hs, take(u, (slice(None), slice(0, 2 * h_dim))))
    zr = sigmoid(add(take(xw, (slice(None), slice(0, 2 * h_dim))), hu))
    z = take(zr, (slice(None), slice(0, h_dim)))
    r = take(zr, (slice(None), slice(h_dim, 2 * h_dim)))
    cand = tanh(add(take(xw, (slice(None), slice(2 * h_dim, 3 * h_dim))),
                    matmul(mul(r, hs), take(u, (slice(None), slice(2 * h_dim, 3 * h_dim))))))
    h = add(mul(sub(1.0, z), hs), mul(z, cand))
    return h if h_prev.ndim == 2 else reshape(h, h_prev.shape)


def gru_sequence(x, w, u, b, step_mask: np.ndarray | None = None) -> DiffArray:
    """Run the GRU over (batch, time, in) inputs from a zero initial state.

    Where ``step_mask`` is False the state is carried over unchanged, so a
    left-padded prefix keeps the state at exactly zero.  Returns the hidden
    state after every step, shape (batch, time, H).
    """
    x = as_diff(x)
    w, u, b = (as_diff(p, dtype=x.dtype) for p in (w, u, b))
    batch, steps, x_dim = x.shape
    h_dim = u.shape[0]
    _check_gru(x_dim, h_dim, w, u, b)
    keep = (np.ones((batch, steps)) if step_mask is None else np.asarray(step_mask)).astype(x.dtype)
    xw = (x.values.reshape(-1, x_dim) @ w.values + b.values).reshape(batch, steps, 3 * h_dim)
    u_zr, u_h = u.values[:, :2 * h_dim], u.values[:, 2 * h_dim:]

    hs = np.zeros((batch, steps + 1, h_dim), dtype=x.dtype)
    zs = np.empty((batch, steps, h_dim), dtype=x.dtype)
    rs, cs = np.empty_like(zs), np.empty_like(zs)
    for t in range(steps):
        h = hs[:, t]
        zr = _sigmoid(xw[:, t, :2 * h_dim] + h @ u_zr)
        z, r = zr[:, :h_dim], zr[:, h_dim:]
        c = np.tanh(xw[:, t, 2 * h_dim:] + (r * h) @ u_h)
        m = keep[:, t, None]
        hs[:, t + 1] = m * ((1.0 - z) * h + z * c) + (1.0 - m) * h
        zs[:, t], rs[:, t], cs[:, t] = z, r, c

    def backward(g):
        g_xw = np.zeros_like(xw)
        g_u = np.zeros_like(u.values)
        g_h = np.zeros((batch, h_dim), dtype=x.dtype)
        for t in reversed(range(steps)):
            g_h = g_h + g[:, t]
            h, z, r, c = hs[:, t], zs[:, t], rs[:, t], cs[:, t]
            m = keep[:, t, None]
            g_new = g_h * m
            g_prev = g_h * (1.0 - m) + g_new * (1.0 - z)
            g_c = g_new * z * (1.0 - c * c)
            g_z = g_new * (c - h) * z * (1.0 - z)
            g_rh = g_c @ u_h.T
            g_r = g_rh * h * r * (1.0 - r)
            g_prev += g_rh * r
            g_zr = np.concatenate([g_z, g_r], axis=1)
            g_prev += g_zr @ u_zr.T
            g_u[:, :2 * h_dim] += h.T @ g_zr
            g_u[:, 2 * h_dim:] += (r * h).T @ g_c
            g_xw[:, t, :2 * h_dim] = g_zr
            g_xw[:, t, 2 * h_dim:] = g_c
            g_h = g_prev
        flat = g_xw.reshape(-1, 3 * h_dim)
        gx = (flat @ w.values.T).reshape(x.shape) if x.requires_grad else None
        gw = x.values.reshape(-1, x_dim).T @ flat if w.requires_grad else None
        return gx, gw, g_u, flat.sum(axis=0)

    return _result(hs[:, 1:].copy(), (x, w, u, b), backward)


def parameters_of(arrays: Iterable[DiffArray]) -> list:
    return [a for a in arrays if a.requires_grad]
