from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import NonFiniteError, ShapeError, UsageError

ArrayLike = Union[np.ndarray, Sequence[float], float]

_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported tensor dtype {resolved}")
    _DEFAULT_DTYPE = resolved.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.op: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other) -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, _as_tensor(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    arrays: Tuple[np.ndarray, ...]
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]


@dataclass
class ComputationTape:
    """Ordered record of the primitives applied while the tape was active."""

    nodes: List[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "ComputationTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    @property
    def output(self) -> Tensor:
        if not self.nodes:
            raise UsageError("tape is empty: no forward operation has been recorded")
        return self.nodes[-1].output

    def replay(self) -> np.ndarray:
        """Recompute every node from its inputs; returns the value of the last node."""
        if not self.nodes:
            raise UsageError("tape is empty: nothing to replay")
        values: Dict[int, np.ndarray] = {}
        result = None
        for node in self.nodes:
            arrays = [values.get(id(tensor), tensor.data) for tensor in node.inputs]
            result = node.forward(*arrays)
            values[id(node.output)] = result
        return result


def _tape_stack() -> List[ComputationTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional[ComputationTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Gradients:
    """Leaf gradients returned by ``backward``; lookup by tensor or by name."""

    def __init__(self, by_id: Dict[int, np.ndarray], leaves: Dict[int, Tensor], visit_order: List[int]):
        self._by_id = by_id
        self._leaves = leaves
        self.visit_order = visit_order

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._by_id.get(id(tensor))
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def named(self) -> Dict[str, np.ndarray]:
        return {
            tensor.name: self._by_id[key]
            for key, tensor in self._leaves.items()
            if tensor.name is not None
        }


# Runs reverse-mode accumulation over the tape, starting from ``seed`` at ``output``.
def backward(tape: ComputationTape, seed: Optional[ArrayLike] = None, output: Optional[Tensor] = None) -> Gradients:
    if not tape.nodes:
        raise UsageError("backward called before any forward operation was recorded")
    output = output if output is not None else tape.output
    if seed is None:
        if output.size != 1:
            raise UsageError("a seed is required when the output is not a scalar")
        seed_array = np.ones_like(output.data)
    else:
        seed_array = np.asarray(seed, dtype=output.data.dtype)
        if seed_array.shape != output.shape:
            raise ShapeError("backward", seed_array.shape, output.shape, detail="seed must match output")

    grads: Dict[int, np.ndarray] = {id(output): seed_array}
    leaves: Dict[int, Tensor] = {}
    visit_order: List[int] = []
    for index in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[index]
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        visit_order.append(index)
        input_grads = node.backward(upstream, node.output.data, *node.arrays)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            existing = grads.get(key)
            grads[key] = grad if existing is None else existing + grad
            if tensor.is_leaf:
                leaves[key] = tensor
    return Gradients({key: grads[key] for key in leaves}, leaves, visit_order)


def _check_finite(op: str, arrays: Iterable[np.ndarray], where: str) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"{op}: non-finite value in {where}")


def _apply(
    op: str,
    inputs: Sequence[Tensor],
    forward: Callable[..., np.ndarray],
    backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    arrays = tuple(tensor.data for tensor in inputs)
    _check_finite(op, arrays, "input")
    with np.errstate(all="ignore"):
        out = forward(*arrays)
    _check_finite(op, (out,), "output")
    result = Tensor(out, requires_grad=any(tensor.requires_grad for tensor in inputs), dtype=out.dtype)
    result.op = op
    tape = current_tape()
    if tape is not None and result.requires_grad:
        tape.record(TapeNode(op, tuple(inputs), result, arrays, forward, backward_fn))
    return result


# Operands must match exactly unless one side is a scalar.
def _same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(dtype=np.float64), dtype=grad.dtype).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar("add", a, b)

    def backward_fn(g, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _apply("add", (a, b), np.add, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar("sub", a, b)

    def backward_fn(g, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _apply("sub", (a, b), np.subtract, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar("mul", a, b)

    def backward_fn(g, out, x, y):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _apply("mul", (a, b), np.multiply, backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    def forward(x):
        return x * factor

    def backward_fn(g, out, x):
        return (g * factor,)

    return _apply("scale", (a,), forward, backward_fn)


def sin(a: Tensor) -> Tensor:
    def backward_fn(g, out, x):
        return (g * np.cos(x),)

    return _apply("sin", (a,), np.sin, backward_fn)


def cos(a: Tensor) -> Tensor:
    def backward_fn(g, out, x):
        return (-g * np.sin(x),)

    return _apply("cos", (a,), np.cos, backward_fn)


def exp(a: Tensor) -> Tensor:
    def backward_fn(g, out, x):
        return (g * out,)

    return _apply("exp", (a,), np.exp, backward_fn)


def log(a: Tensor) -> Tensor:
    def backward_fn(g, out, x):
        return (g / x,)

    return _apply("log", (a,), np.log, backward_fn)


def relu(a: Tensor) -> Tensor:
    def forward(x):
        return np.maximum(x, 0.0).astype(x.dtype, copy=False)

    def backward_fn(g, out, x):
        return (g * (x > 0),)

    return _apply("relu", (a,), forward, backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or a batched product of two 3-D stacks with equal batch size."""
    if a.ndim == 2 and b.ndim == 2:
        conforms = a.shape[1] == b.shape[0]
    elif a.ndim == 3 and b.ndim == 3:
        conforms = a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    else:
        conforms = False
    if not conforms:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward_fn(g, out, x, y):
        return np.matmul(g, np.swapaxes(y, -1, -2)), np.matmul(np.swapaxes(x, -1, -2), g)

    return _apply("matmul", (a, b), np.matmul, backward_fn)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map ``x @ weight + bias`` for x of shape (n, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("affine", x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("affine", weight.shape, bias.shape, detail="bias must have one entry per output")

    def forward(v, w, b):
        return v @ w + b

    def backward_fn(g, out, v, w, b):
        return g @ w.T, v.T @ g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _apply("affine", (x, weight, bias), forward, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", detail="no operands")
    ndim = tensors[0].ndim
    axis = axis % ndim
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        other = tensor.shape
        if len(other) != ndim or any(
            left != right for dim, (left, right) in enumerate(zip(reference, other)) if dim != axis
        ):
            raise ShapeError("concat", reference, other)
    sizes = [tensor.shape[axis] for tensor in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def forward(*arrays):
        return np.concatenate(arrays, axis=axis)

    def backward_fn(g, out, *arrays):
        return tuple(np.split(g, bounds, axis=axis))

    return _apply("concat", tuple(tensors), forward, backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(dim) for dim in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)

    def forward(x):
        return x.reshape(shape)

    def backward_fn(g, out, x):
        return (g.reshape(x.shape),)

    return _apply("reshape", (a,), forward, backward_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))

    def forward(x):
        return np.ascontiguousarray(np.transpose(x, axes))

    def backward_fn(g, out, x):
        return (np.transpose(g, inverse),)

    return _apply("transpose", (a,), forward, backward_fn)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]`` along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError("gather_rows", a.shape, index.shape, detail="index out of range")

    def forward(x):
        return x[index]

    def backward_fn(g, out, x):
        grad = np.zeros(x.shape, dtype=np.float64)
        np.add.at(grad, index, g)
        return (grad.astype(x.dtype, copy=False),)

    return _apply("gather_rows", (a,), forward, backward_fn)


def take_along_rows(a: Tensor, columns: np.ndarray) -> Tensor:
    """Pick ``a[i, columns[i]]`` for every row i of a 2-D tensor."""
    columns = np.asarray(columns, dtype=np.int64)
    if a.ndim != 2 or columns.shape != (a.shape[0],):
        raise ShapeError("take_along_rows", a.shape, columns.shape)
    rows = np.arange(a.shape[0])

    def forward(x):
        return x[rows, columns]

    def backward_fn(g, out, x):
        grad = np.zeros_like(x)
        grad[rows, columns] = g
        return (grad,)

    return _apply("take_along_rows", (a,), forward, backward_fn)


def _normalize_axes(ndim: int, axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(axis % ndim for axis in axes))


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(a.ndim, axes)

    def forward(x):
        return np.asarray(np.sum(x, axis=axes, dtype=np.float64), dtype=x.dtype)

    def backward_fn(g, out, x):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).astype(x.dtype, copy=True),)

    return _apply("reduce_sum", (a,), forward, backward_fn)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(a.ndim, axes)
    count = int(np.prod([a.shape[axis] for axis in axes])) if axes else 1
    if count == 0:
        raise ShapeError("reduce_mean", a.shape, detail="cannot average over an empty axis")

    def forward(x):
        return np.asarray(np.sum(x, axis=axes, dtype=np.float64) / count, dtype=x.dtype)

    def backward_fn(g, out, x):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).astype(x.dtype, copy=True),)

    return _apply("reduce_mean", (a,), forward, backward_fn)


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    total = np.sum(weights, axis=-1, keepdims=True, dtype=np.float64)
    return (weights / total).astype(x.dtype, copy=False)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape, detail="last axis must be non-empty")

    def backward_fn(g, out, x):
        inner = np.sum(g * out, axis=-1, keepdims=True, dtype=np.float64)
        return (out * (g - inner),)

    return _apply("softmax", (a,), _stable_softmax, backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape, detail="last axis must be non-empty")

    def forward(x):
        shifted = x - np.max(x, axis=-1, keepdims=True)
        total = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True, dtype=np.float64))
        return (shifted - total).astype(x.dtype, copy=False)

    def backward_fn(g, out, x):
        total = np.sum(g, axis=-1, keepdims=True, dtype=np.float64)
        return (g - np.exp(out) * total,)

    return _apply("log_softmax", (a,), forward, backward_fn)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != (a.shape[0],):
        raise ShapeError("segment_sum", a.shape, segment_ids.shape)

    def forward(x):
        out = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
        np.add.at(out, segment_ids, x)
        return out.astype(x.dtype, copy=False)

    def backward_fn(g, out, x):
        return (g[segment_ids],)

    return _apply("segment_sum", (a,), forward, backward_fn)


def segment_softmax(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of each column of ``a`` taken separately within every segment of rows."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if a.ndim != 2 or segment_ids.shape != (a.shape[0],):
        raise ShapeError("segment_softmax", a.shape, segment_ids.shape)

    def forward(x):
        peak = np.full((num_segments, x.shape[1]), -np.inf, dtype=x.dtype)
        np.maximum.at(peak, segment_ids, x)
        weights = np.exp(x - peak[segment_ids])
        total = np.zeros((num_segments, x.shape[1]), dtype=np.float64)
        np.add.at(total, segment_ids, weights)
        return (weights / total[segment_ids]).astype(x.dtype, copy=False)

    def backward_fn(g, out, x):
        inner = np.zeros((num_segments, x.shape[1]), dtype=np.float64)
        np.add.at(inner, segment_ids, g * out)
        return (out * (g - inner[segment_ids]),)

    return _apply("segment_softmax", (a,), forward, backward_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a 2-D tensor, then apply per-feature gain and bias."""
    if a.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    width = a.shape[1]

    def _moments(x):
        centred = x - np.sum(x, axis=1, keepdims=True, dtype=np.float64) / width
        variance = np.sum(centred * centred, axis=1, keepdims=True, dtype=np.float64) / width
        return centred, 1.0 / np.sqrt(variance + eps)

    def forward(x, w, b):
        centred, inv_std = _moments(x)
        return (centred * inv_std * w + b).astype(x.dtype, copy=False)

    def backward_fn(g, out, x, w, b):
        centred, inv_std = _moments(x)
        normed = centred * inv_std
        grad_normed = g * w
        grad_x = inv_std * (
            grad_normed
            - np.sum(grad_normed, axis=1, keepdims=True, dtype=np.float64) / width
            - normed * np.sum(grad_normed * normed, axis=1, keepdims=True, dtype=np.float64) / width
        )
        grad_w = np.sum(g * normed, axis=0, dtype=np.float64)
        grad_b = np.sum(g, axis=0, dtype=np.float64)
        return grad_x.astype(x.dtype, copy=False), grad_w.astype(w.dtype), grad_b.astype(b.dtype)

    return _apply("layer_norm", (a, gain, bias), forward, backward_fn)
