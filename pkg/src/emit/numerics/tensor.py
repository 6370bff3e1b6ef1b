"""Dense tensors with reverse-mode differentiation on a dynamic tape.

Operations only record themselves while a :class:`Tape` is active, so plain
forward passes (inference, metric evaluation) carry no bookkeeping cost::

    with Tape() as tape:
        loss = model.pretrain_loss(batch)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_local = threading.local()


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A row-major numpy array plus gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; implementations live in functional.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.mul(self, 1.0 / other) if np.isscalar(other) else F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        return F.transpose(self, axes or None)


class Parameter(Tensor):
    """A named learnable tensor; its gradient accumulates across backward calls."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Each recorded node stores the output tensor, its parent tensors and a
    closure mapping the output gradient to one gradient per parent (``None``
    for parents that need none). Tapes are confined to the thread that
    opened them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, tuple(parents), backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf tensor reachable from ``loss``.

        Leaf gradients accumulate; callers zero them between optimizer steps.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.out) for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"gradient shape {pg.shape} does not match tensor shape {parent.shape}"
                    )
                key = id(parent)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(out: Tensor, parents: Sequence, backward: Callable) -> Tensor:
    """Register ``out`` on the active tape if any parent needs a gradient."""
    tape = active_tape()
    if tape is None:
        return out
    tracked = [p for p in parents if isinstance(p, Tensor) and p.requires_grad]
    if not tracked:
        return out
    out.requires_grad = True
    tape.record(out, [p if isinstance(p, Tensor) else Tensor(p) for p in parents], backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
