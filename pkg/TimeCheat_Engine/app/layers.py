from dataclasses import dataclass, fields, is_dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from app.tensor import Tensor, affine, get_default_dtype


# Glorot-uniform weight matrix of shape (fan_in, fan_out).
def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str, dtype=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Tensor(values, requires_grad=True, name=name, dtype=dtype or get_default_dtype())


def zeros(shape, name: str, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name, dtype=dtype or get_default_dtype())


def ones(shape, name: str, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name, dtype=dtype or get_default_dtype())


# Collects every Tensor reachable from a dataclass tree, keyed by tensor name.
def collect_parameters(obj) -> Dict[str, Tensor]:
    found: Dict[str, Tensor] = {}

    def visit(node):
        if isinstance(node, Tensor):
            found[node.name] = node
        elif is_dataclass(node):
            for item in fields(node):
                visit(getattr(node, item.name))
        elif isinstance(node, (list, tuple)):
            for child in node:
                visit(child)

    visit(obj)
    return found


@dataclass
class Linear:
    """A fully connected layer: ``x @ weight + bias``."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, name: str, dtype=None) -> "Linear":
        return cls(
            weight=glorot(rng, fan_in, fan_out, f"{name}.weight", dtype),
            bias=zeros((fan_out,), f"{name}.bias", dtype),
        )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def tensors(self) -> Iterable[Tensor]:
        return (self.weight, self.bias)


def set_trainable(tensors: Iterable[Tensor], trainable: bool) -> None:
    for tensor in tensors:
        tensor.requires_grad = trainable


def constant(values, like: Optional[Tensor] = None) -> Tensor:
    dtype = like.data.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(values), requires_grad=False, dtype=dtype)
