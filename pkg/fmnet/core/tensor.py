"""Tensor denso com fita reversa de gradientes.

O `Tensor` guarda um `numpy.ndarray` em ordem row-major e, quando algum dos
operandos exige gradiente, registra seus pais e uma função que devolve os
gradientes parciais. `backward` percorre a fita em ordem topológica inversa e
devolve um `GradientMap` com o gradiente de cada parâmetro nomeado.

Treino roda em 32 bits; `float64_mode()` ativa 64 bits para verificações.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Callable, Iterator, Sequence
from typing import Any

import numpy as np

from fmnet.core.errors import ConfigError, UsageError

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "fmnet_default_dtype", default=np.dtype(np.float32)
)


def default_dtype() -> np.dtype:
    return _default_dtype.get()


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Cria tensores em 64 bits dentro do bloco."""
    token = _default_dtype.set(np.dtype(np.float64))
    try:
        yield
    finally:
        _default_dtype.reset(token)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Soma `grad` de volta para `shape` desfazendo o broadcasting do numpy."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @classmethod
    def parameter(cls, data: Any, name: str) -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def wrap(cls, data: np.ndarray) -> "Tensor":
        """Constante que mantém o dtype de `data`."""
        return cls.from_op(np.asarray(data), (), lambda g: ())

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn: GradFn) -> "Tensor":
        """Resultado de uma operação; preserva o dtype calculado pelo numpy."""
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    # -- metadados ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = None
        out._parents = ()
        out._grad_fn = None
        return out

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, grad={self.requires_grad})"

    # -- aritmética elementar ---------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        other = as_tensor(other, like=self)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        other = as_tensor(other, like=self)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data - other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other: Any) -> "Tensor":
        return as_tensor(other, like=self) - self

    def __mul__(self, other: Any) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b,
            (self, other),
            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __truediv__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise UsageError("Divisão só é suportada por escalar.")
        return self * (1.0 / scalar)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[0] or b.ndim != 2:
            raise ConfigError(f"matmul incompatível: {a.shape} @ {b.shape}")

        def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return Tensor.from_op(a @ b, (self, other), grad_fn)

    def __getitem__(self, index: Any) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        basic = all(
            isinstance(i, (int, slice, type(Ellipsis), type(None)))
            for i in (index if isinstance(index, tuple) else (index,))
        )

        def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(self.data[index], (self,), grad_fn)

    def reshape(self, *shape: int) -> "Tensor":
        original = self.shape
        return Tensor.from_op(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),)
        )

    def sum(self, axis: int | tuple[int, ...] | None = None) -> "Tensor":
        shape = self.shape

        def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(np.asarray(self.data.sum(axis=axis)), (self,), grad_fn)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> "Tensor":
        if axis is None:
            count = self.numel
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis) * (1.0 / count)


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    out = Tensor(value)
    if like is not None and out.dtype != like.dtype:
        out.data = out.data.astype(like.dtype)
    return out


GradientMap = dict[str, Tensor]


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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Calcula o gradiente de `loss` em relação a cada parâmetro nomeado.

    Args:
        loss: tensor escalar produzido por operações sobre parâmetros.

    Returns:
        Mapa nome do parâmetro -> gradiente com a mesma forma do parâmetro.

    Raises:
        UsageError: se `loss` não for escalar.
        ConfigError: se dois parâmetros distintos compartilharem o mesmo nome.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward exige uma perda escalar, recebeu forma {loss.shape}")
    if not loss.requires_grad:
        return {}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topological_order(loss)
    for node in reversed(order):
        grad = grads.get(id(node))
        if grad is None or node._grad_fn is None:
            continue
        for parent, partial in zip(node._parents, node._grad_fn(grad)):
            if partial is None or not parent.requires_grad:
                continue
            partial = np.asarray(partial, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + partial
            else:
                grads[key] = partial

    result: GradientMap = {}
    for node in order:
        if not (node.is_leaf and node.requires_grad and node.name):
            continue
        if node.name in result:
            raise ConfigError(f"Parâmetro duplicado na fita: {node.name}")
        grad = grads.get(id(node), np.zeros_like(node.data))
        result[node.name] = Tensor.wrap(grad.reshape(node.shape))
    return result
