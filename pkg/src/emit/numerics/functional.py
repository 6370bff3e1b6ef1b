"""Differentiable primitives.

Every function accepts Tensors or array-likes, returns a new Tensor and, when
a tape is active and an input requires a gradient, records a backward rule.
Binary element-wise ops broadcast numpy-style; gradients are summed back to
each operand's shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, record


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return record(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # weight matrix shared across all leading axes
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return record(out, (a,), lambda g: (np.transpose(g, inverse),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record(Tensor(y), (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(Tensor(y), (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return record(Tensor(a.data * keep), (a,), lambda g: (g * keep,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(Tensor(y), (a,), backward)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` (broadcastable, boolean) is true."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = Tensor(np.where(mask, value, a.data))
    return record(out, (a,), lambda g: (np.where(mask, 0.0, g),))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; the unselected side gets exactly zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        )

    return record(out, (a, b), backward)


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the affine map."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data

    def backward(g):
        gx = g * gamma.data if gamma is not None else g
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [ga]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    parents = [a] + [p for p in (gamma, beta) if p is not None]
    return record(Tensor(out), parents, backward)


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.data.dtype)
    return record(Tensor(a.data * keep), (a,), lambda g: (g * keep,))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy computed from logits without overflow."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"bce_with_logits: shapes {logits.shape} and {y.shape} differ")
    z = logits.data
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(losses.mean())
    n = z.size

    def backward(g):
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * (p - y) / n,)

    return record(out, (logits,), backward)
