"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the depth losses and the toy network need: scalar-vs-full
elementwise arithmetic, masked reductions, indexing and a stride-1
same-padded 2-D convolution.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 array that optionally records how it was produced.

    Args:
        data: array-like values, copied to a contiguous float64 array.
        requires_grad: whether gradients should be tracked for this tensor.
    """

    __array_priority__ = 100  # make ndarray op Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def abs(self) -> "Tensor":
        return absolute(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self, mask: Optional[np.ndarray] = None) -> "Tensor":
        return reduce("sum", self, mask)

    def mean(self, mask: Optional[np.ndarray] = None) -> "Tensor":
        return reduce("mean", self, mask)

    def backward(self) -> None:
        backward(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape}: only scalar broadcast is supported")


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.shape:
        return grad
    # t was the broadcast scalar
    return np.full(t.shape, grad.sum())


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)

    return _make(out, (a, b), bw, "div")


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def absolute(a: ArrayLike) -> Tensor:
    """Elementwise |a|; the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: ArrayLike, b: ArrayLike | None = None) -> Tensor:
    """Dispatch an elementwise op by name (``scale`` takes ``b`` as the factor)."""
    if op in _ELEMENTWISE:
        return _ELEMENTWISE[op](a, b)
    if op == "abs":
        return absolute(a)
    if op == "relu":
        return relu(a)
    if op == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(op: str, a: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Sum or mean over all elements, optionally restricted to ``mask``.

    Masked-out elements contribute nothing to the value or the gradient,
    even when they hold non-finite values.
    """
    a = as_tensor(a)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    if mask is None:
        n = a.size
        total = a.data.sum()
        weight = None
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ValueError(f"mask shape {mask.shape} does not match tensor shape {a.shape}")
        n = int(mask.sum())
        total = a.data[mask].sum()
        weight = mask
    if n == 0:
        raise ValueError("reduction over zero unmasked elements")
    factor = 1.0 / n if op == "mean" else 1.0

    def bw(g):
        gs = float(g) * factor
        if weight is None:
            return (np.full(a.shape, gs),)
        return (np.where(weight, gs, 0.0),)

    return _make(np.asarray(total * factor), (a,), bw, op)


def getitem(a: Tensor, index) -> Tensor:
    items = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors])
    return _make(out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (C*k*k, N*H*W) patches of the zero-padded input."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w))
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto the input grid."""
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy : dy + h, dx : dx + w] += cols[:, dy, dx].transpose(1, 0, 2, 3)
    return xp[:, :, p : p + h, p : p + w]


def conv2d(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """Stride-1, zero same-padded cross-correlation.

    Args:
        x: input of shape (C, H, W) or batched (N, C, H, W).
        weight: kernel of shape (O, C, K, K) with odd K.
        bias: per-output-channel offset of shape (O,).

    Returns:
        Tensor of shape (O, H, W), or (N, O, H, W) for batched input.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ValueError(f"weight must be (O, C, K, K) with odd K, got {weight.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be CHW or NCHW, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, wc, k, _ = weight.shape
    if wc != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {wc}")
    if bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")

    cols = _im2col(xd, k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, h, w) + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g4 = g if batched else g[None]
        gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(o, n * h * w)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ gmat, (n, c, h, w), k)
            gx = gx if batched else gx[0]
        return gx, gw, gb

    return _make(out if batched else out[0], (x, weight, bias), bw, "conv2d")


@dataclass
class Tape:
    """Topologically ordered record of the operations that produced a tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(out, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked tensor that ``loss`` depends on.

    Gradients from earlier backward calls are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        if not node.requires_grad:
            continue  # constants feeding tracked ops never receive a gradient
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(node.shape)
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
