"""
Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every op builds a new ``Tensor`` that remembers its parents and a closure that
pushes the output gradient back to them. Only tensors with
``requires_grad=True`` take part in the backward pass, so frozen parameters and
stop-gradient branches never receive gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from errors import ContractError, DegenerateVectorError, DimensionError

EPSILON = 1e-12

ACTIVATIONS = ("relu", "tanh")


class Tensor:
    """
    A dense array with an optional gradient buffer.

    ``grad`` stays ``None`` until a backward pass reaches the tensor; a cleared
    buffer reads as zero.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this tensor. Without an explicit seed gradient the
        tensor must hold a single value.
        """
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar", self.shape)
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar, all routed through the functions below
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Iterable[Tensor]) -> Tensor:
    parents = tuple(parents)
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), parents=parents)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        out = _result(a.data + b.data, (a, b))

        def _backward(g):
            a.accumulate(g)
            b.accumulate(g)

    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = _result(a.data + b.data, (a, b))

        def _backward(g):
            a.accumulate(g)
            b.accumulate(g.sum(axis=0))

    else:
        raise DimensionError("cannot add tensors", a.shape, b.shape)

    out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,))
    out._backward = lambda g: a.accumulate(-g)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = _result(a.data * factor, (a,))
    out._backward = lambda g: a.accumulate(g * factor)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("cannot multiply tensors elementwise", a.shape, b.shape)
    out = _result(a.data * b.data, (a, b))

    def _backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("cannot multiply matrices", a.shape, b.shape)
    out = _result(a.data @ b.data, (a, b))

    def _backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    out._backward = _backward
    return out


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = _result(a.data.sum(axis=axis), (a,))

    def _backward(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    out._backward = _backward
    return out


def tensor_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = _result(a.data.reshape(shape), (a,))
    out._backward = lambda g: a.accumulate(g.reshape(a.shape))
    return out


def take_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; repeated indices accumulate gradient."""
    index = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("take_rows needs a 2-D table", table.shape)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError("row index out of range for table", table.shape, (int(index.max()),))
    out = _result(table.data[index], (table,))

    def _backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        table.accumulate(full)

    out._backward = _backward
    return out


def pick(a: Tensor, columns: Sequence[int]) -> Tensor:
    """``out[i] = a[i, columns[i]]`` for a 2-D tensor."""
    cols = np.asarray(columns, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise DimensionError("pick needs one column per row", a.shape, cols.shape)
    rows = np.arange(a.shape[0])
    out = _result(a.data[rows, cols], (a,))

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a.accumulate(full)

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _result(np.where(mask, a.data, 0.0), (a,))
    # relu'(0) = 0
    out._backward = lambda g: a.accumulate(g * mask)
    return out


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    out = _result(value, (a,))
    out._backward = lambda g: a.accumulate(g * (1.0 - value * value))
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = _result(np.log(a.data), (a,))
    out._backward = lambda g: a.accumulate(g / a.data)
    return out


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax via the shifted log-sum-exp."""
    if logits.ndim != 2:
        raise DimensionError("log_softmax needs [N x K] logits", logits.shape)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = shifted - log_norm
    out = _result(value, (logits,))
    probabilities = np.exp(value)

    def _backward(g):
        logits.accumulate(g - probabilities * g.sum(axis=1, keepdims=True))

    out._backward = _backward
    return out


def l2_normalize(v: Tensor) -> Tensor:
    """
    Scale ``v`` (or every row of a 2-D ``v``) to unit Euclidean norm.

    Raises DegenerateVectorError when a norm is at most 1e-12.
    """
    norms = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= EPSILON):
        raise DegenerateVectorError(
            f"cannot normalise a vector with norm {float(norms.min()):.3e}"
        )
    unit = v.data / norms
    out = _result(unit, (v,))

    def _backward(g):
        radial = (g * unit).sum(axis=-1, keepdims=True)
        v.accumulate((g - unit * radial) / norms)

    out._backward = _backward
    return out


def linear_forward(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``input @ weight + bias`` for ``input [n x d_in]``, ``weight [d_in x d_out]``."""
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[0]:
        raise DimensionError("linear layer input does not match weight", input.shape, weight.shape)
    out = matmul(input, weight)
    if bias is None:
        return out
    if bias.shape != (weight.shape[1],):
        raise DimensionError("linear layer bias does not match weight", bias.shape, weight.shape)
    return add(out, bias)


def activation_forward(input: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(input)
    if kind == "tanh":
        return tanh(input)
    raise ContractError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
