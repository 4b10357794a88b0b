# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Dense float64 tensors with reverse-mode automatic differentiation.

Operations are recorded on the innermost active GradientTape when at least one
input requires a gradient. Outside of a tape every operation is a plain numpy
computation and its result is a constant.
"""
import threading
from contextlib import contextmanager
from itertools import product
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .global_config import FLOAT_DTYPE

Grads = Sequence[Optional[np.ndarray]]
Adjoint = Callable[[np.ndarray], Grads]
Operand = Union['Tensor', float, int, np.ndarray]
IntOrTuple = Union[int, Sequence[int]]

ELEMENTWISE_OPS = ('add', 'sub', 'mul', 'div', 'neg', 'exp', 'log', 'sqrt', 'leaky_relu')
REDUCE_OPS = ('sum', 'mean', 'max')
DEF_LEAKY_SLOPE = 0.01

_local = threading.local()


class ShapeError(ValueError):
    """Incompatible or invalid tensor shapes"""


class NumericDomainError(ArithmeticError):
    """Argument outside of the function domain"""


class TapeError(RuntimeError):
    """Invalid use of gradient tape"""


class TapeNode:
    """Recorded primitive operation"""
    __slots__ = ('tape', 'output', 'inputs', 'adjoint')

    def __init__(self, tape: 'GradientTape', output: 'Tensor', inputs: Sequence['Tensor'],
                 adjoint: Adjoint) -> None:
        self.tape = tape
        self.output = output
        self.inputs = tuple(inputs)
        self.adjoint = adjoint


def _tape_stack() -> List[Optional['GradientTape']]:
    stack = getattr(_local, 'tapes', None)

    if stack is None:
        stack = []
        _local.tapes = stack

    return stack


def active_tape() -> Optional['GradientTape']:
    """Returns innermost tape of the current thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_record() -> Iterator[None]:
    """Suspends recording on the current thread; results are constants"""
    stack = _tape_stack()
    stack.append(None)

    try:
        yield
    finally:
        stack.pop()


class GradientTape:
    """
    Record of primitive operations in execution (topological) order.

    A tape is confined to the thread that opened it and can be replayed once:
    backward() frees the recorded nodes and a second call raises TapeError.
    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> 'GradientTape':
        if self.consumed:
            raise TapeError('Gradient tape was already replayed')

        _tape_stack().append(self)
        return self

    def __exit__(self, *args: Any) -> None:
        stack = _tape_stack()

        if stack and stack[-1] is self:
            stack.pop()

    def record(self, output: 'Tensor', inputs: Sequence['Tensor'], adjoint: Adjoint) -> None:
        """Appends operation to tape"""
        if self.consumed:
            raise TapeError('Cannot record on a replayed tape')

        node = TapeNode(self, output, inputs, adjoint)
        output.node = node
        self.nodes.append(node)

    def backward(self, loss: 'Tensor') -> None:
        """Replays adjoints in reverse order, stores .grad on every reached tensor"""
        if loss.size != 1:
            raise ShapeError(f'backward() expects a single-element loss, got shape {loss.shape}')

        if self.consumed:
            raise TapeError('Gradient tape was already replayed')

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        reached: Dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            grad = adjoints.pop(id(node.output), None)

            if grad is None:
                continue

            node.output.grad = grad

            for tensor, input_grad in zip(node.inputs, node.adjoint(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue

                key = id(tensor)

                if key in adjoints:
                    adjoints[key] = adjoints[key] + input_grad
                else:
                    adjoints[key] = input_grad
                    reached[key] = tensor

        for key, grad in adjoints.items():
            tensor = reached[key]
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad

        self.nodes.clear()
        self.consumed = True


class Tensor:
    """N-dimensional float64 array taking part in gradient tapes."""
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=FLOAT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        """Tensor extents"""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Tensor rank"""
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        """Number of elements"""
        return int(self.data.size)

    def item(self) -> float:
        """Returns value of single-element tensor"""
        if self.size != 1:
            raise ShapeError(f'item() of tensor with shape {self.shape}')

        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Returns underlying array"""
        return self.data

    def detach(self) -> 'Tensor':
        """Returns constant tensor sharing the data"""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        """Drops accumulated gradient"""
        self.grad = None

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: Operand) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __getitem__(self, index: Any) -> 'Tensor':
        return getitem(self, index)

    def sum(self, axes: Optional[IntOrTuple] = None, keepdims: bool = False) -> 'Tensor':
        """Sum over axes"""
        return reduce('sum', self, axes, keepdims)

    def mean(self, axes: Optional[IntOrTuple] = None, keepdims: bool = False) -> 'Tensor':
        """Mean over axes"""
        return reduce('mean', self, axes, keepdims)

    def max(self, axes: Optional[IntOrTuple] = None, keepdims: bool = False) -> 'Tensor':
        """Maximum over axes"""
        return reduce('max', self, axes, keepdims)

    def reshape(self, *shape: int) -> 'Tensor':
        """Reshaped view"""
        return reshape(self, shape)


def as_tensor(value: Operand) -> Tensor:
    """Wraps value into constant tensor unless it already is a tensor"""
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: Any) -> Tensor:
    """Creates trainable leaf tensor"""
    return Tensor(np.array(data, dtype=FLOAT_DTYPE), requires_grad=True)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], adjoint: Adjoint) -> Tensor:
    """Wraps result of a primitive and records its adjoint on the active tape"""
    out = Tensor(data)
    tape = active_tape()

    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        out.requires_grad = True
        tape.record(out, inputs, adjoint)

    return out


def backward(loss: Tensor) -> None:
    """Computes gradients of scalar loss w.r.t. every tracked tensor reachable on its tape"""
    if loss.size != 1:
        raise ShapeError(f'backward() expects a single-element loss, got shape {loss.shape}')

    if loss.node is None:
        raise TapeError('backward() needs a loss recorded on a gradient tape')

    loss.node.tape.backward(loss)


def broadcast_shape(a_shape: Sequence[int], b_shape: Sequence[int]) -> Tuple[int, ...]:
    """Result shape of singleton-expansion broadcasting"""
    try:
        return tuple(np.broadcast_shapes(tuple(a_shape), tuple(b_shape)))
    except ValueError as error:
        raise ShapeError(f'Cannot broadcast shapes {tuple(a_shape)} and {tuple(b_shape)}') \
            from error


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sums gradient over broadcast axes to given shape"""
    shape = tuple(shape)

    if grad.shape == shape:
        return grad

    extra = grad.ndim - len(shape)

    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))

    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)

    if axes:
        grad = grad.sum(axis=axes, keepdims=True)

    return grad.reshape(shape)


def _binary(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    ta, tb = as_tensor(a), as_tensor(b)
    broadcast_shape(ta.shape, tb.shape)
    return ta, tb


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum"""
    ta, tb = _binary(a, b)
    return record_op(ta.data + tb.data, (ta, tb),
                     lambda g: (unbroadcast(g, ta.shape), unbroadcast(g, tb.shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    """Elementwise difference"""
    ta, tb = _binary(a, b)
    return record_op(ta.data - tb.data, (ta, tb),
                     lambda g: (unbroadcast(g, ta.shape), unbroadcast(-g, tb.shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise product"""
    ta, tb = _binary(a, b)

    def adjoint(g: np.ndarray) -> Grads:
        return (unbroadcast(g * tb.data, ta.shape) if ta.requires_grad else None,
                unbroadcast(g * ta.data, tb.shape) if tb.requires_grad else None)

    return record_op(ta.data * tb.data, (ta, tb), adjoint)


def div(a: Operand, b: Operand) -> Tensor:
    """Elementwise quotient"""
    ta, tb = _binary(a, b)
    out = ta.data / tb.data

    def adjoint(g: np.ndarray) -> Grads:
        return (unbroadcast(g / tb.data, ta.shape) if ta.requires_grad else None,
                unbroadcast(-g * out / tb.data, tb.shape) if tb.requires_grad else None)

    return record_op(out, (ta, tb), adjoint)


def neg(a: Operand) -> Tensor:
    """Elementwise negation"""
    ta = as_tensor(a)
    return record_op(-ta.data, (ta,), lambda g: (-g,))


def exp(a: Operand) -> Tensor:
    """Elementwise exponential"""
    ta = as_tensor(a)
    out = np.exp(ta.data)
    return record_op(out, (ta,), lambda g: (g * out,))


def log(a: Operand) -> Tensor:
    """Elementwise natural logarithm"""
    ta = as_tensor(a)

    if np.any(ta.data < 0):
        raise NumericDomainError('log() of negative value')

    with np.errstate(divide='ignore'):
        out = np.log(ta.data)

    return record_op(out, (ta,), lambda g: (g / ta.data,))


def sqrt(a: Operand) -> Tensor:
    """Elementwise square root"""
    ta = as_tensor(a)

    if np.any(ta.data < 0):
        raise NumericDomainError('sqrt() of negative value')

    out = np.sqrt(ta.data)

    def adjoint(g: np.ndarray) -> Grads:
        with np.errstate(divide='ignore'):
            return (g * 0.5 / out,)

    return record_op(out, (ta,), adjoint)


def leaky_relu(a: Operand, alpha: float = DEF_LEAKY_SLOPE) -> Tensor:
    """LeakyReLU with negative slope alpha"""
    ta = as_tensor(a)
    positive = ta.data > 0
    out = np.where(positive, ta.data, alpha * ta.data)
    return record_op(out, (ta,), lambda g: (np.where(positive, g, alpha * g),))


def elementwise(op: str, a: Operand, b: Optional[Operand] = None,
                alpha: float = DEF_LEAKY_SLOPE) -> Tensor:
    """Dispatches elementwise operation by name"""
    binary: Dict[str, Callable[[Operand, Operand], Tensor]] = {
        'add': add, 'sub': sub, 'mul': mul, 'div': div}
    unary: Dict[str, Callable[[Operand], Tensor]] = {
        'neg': neg, 'exp': exp, 'log': log, 'sqrt': sqrt}

    if op in binary:
        if b is None:
            raise ValueError(f'Operation {op} needs two operands')

        return binary[op](a, b)

    if op in unary:
        return unary[op](a)

    if op == 'leaky_relu':
        return leaky_relu(a, alpha)

    raise ValueError(f'Unknown elementwise operation: {op}')


def normalize_axes(axes: Optional[IntOrTuple], ndim: int) -> Tuple[int, ...]:
    """Returns sorted non-negative axes, all axes for None"""
    if axes is None:
        return tuple(range(ndim))

    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)

    res = []

    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeError(f'Axis {axis} out of range for rank {ndim}')

        res.append(axis % ndim if ndim else 0)

    if len(set(res)) != len(res):
        raise ShapeError(f'Repeated axes: {axes}')

    return tuple(sorted(res))


def _keep_shape(shape: Sequence[int], axes: Sequence[int]) -> Tuple[int, ...]:
    return tuple(1 if i in axes else extent for i, extent in enumerate(shape))


def reduce(op: str, a: Operand, axes: Optional[IntOrTuple] = None,
           keepdims: bool = False) -> Tensor:
    """Sum, mean or max over axes; max routes gradient to the lowest index"""
    ta = as_tensor(a)
    red = normalize_axes(axes, ta.ndim)

    if ta.size == 0 or any(ta.shape[axis] == 0 for axis in red):
        raise ShapeError(f'Empty reduction over axes {red} of shape {ta.shape}')

    keep_shape = _keep_shape(ta.shape, red)

    if op == 'sum':
        out = ta.data.sum(axis=red, keepdims=keepdims)
        return record_op(out, (ta,),
                         lambda g: (np.broadcast_to(g.reshape(keep_shape), ta.shape),))

    if op == 'mean':
        count = int(np.prod([ta.shape[axis] for axis in red])) if red else 1
        out = ta.data.mean(axis=red, keepdims=keepdims)
        return record_op(out, (ta,),
                         lambda g: (np.broadcast_to(g.reshape(keep_shape) / count, ta.shape),))

    if op == 'max':
        out = ta.data.max(axis=red, keepdims=keepdims)

        def adjoint(g: np.ndarray) -> Grads:
            mask = _first_max_mask(ta.data, red)
            return (mask * g.reshape(keep_shape),)

        return record_op(out, (ta,), adjoint)

    raise ValueError(f'Unknown reduction: {op}')


def _first_max_mask(data: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
    """One-hot mask of the first maximum (row-major order) over given axes"""
    rest = tuple(i for i in range(data.ndim) if i not in axes)
    moved = np.transpose(data, rest + axes)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    index = np.argmax(flat, axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, index[..., None], 1.0, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.transpose(mask, np.argsort(rest + axes))


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    """Reshape"""
    ta = as_tensor(a)

    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    try:
        out = ta.data.reshape(tuple(shape))
    except ValueError as error:
        raise ShapeError(f'Cannot reshape {ta.shape} to {tuple(shape)}') from error

    return record_op(out, (ta,), lambda g: (g.reshape(ta.shape),))


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(item, (slice, int, np.integer)) or item is Ellipsis for item in items)


def getitem(a: Operand, index: Any) -> Tensor:
    """Basic slicing (slices, integers, Ellipsis)"""
    ta = as_tensor(a)

    if not _is_basic_index(index):
        raise ShapeError(f'Only basic slicing is supported, got {index!r}')

    out = ta.data[index]

    def adjoint(g: np.ndarray) -> Grads:
        grad = np.zeros_like(ta.data)
        grad[index] = g
        return (grad,)

    return record_op(out, (ta,), adjoint)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    """Concatenation along axis"""
    items = [as_tensor(t) for t in tensors]

    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as error:
        raise ShapeError(f'Cannot concatenate shapes {[t.shape for t in items]}') from error

    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]
    return record_op(out, items, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    """Stacks equally shaped tensors along new axis"""
    items = [as_tensor(t) for t in tensors]

    try:
        out = np.stack([t.data for t in items], axis=axis)
    except ValueError as error:
        raise ShapeError(f'Cannot stack shapes {[t.shape for t in items]}') from error

    return record_op(out, items,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(items))))


def _per_axis(value: IntOrTuple, count: int, name: str) -> Tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * count

    res = tuple(int(v) for v in value)

    if len(res) != count:
        raise ShapeError(f'{name} needs {count} entries, got {res}')

    return res


def _window_slices(offset: Sequence[int], stride: Sequence[int],
                   out_extent: Sequence[int]) -> Tuple[slice, ...]:
    """Slices of the (padded) input seen by kernel offset for every output voxel"""
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, out_extent))


def conv_nd(inp: Operand, kernel: Operand, bias: Optional[Operand] = None,
            stride: IntOrTuple = 1, padding: IntOrTuple = 0) -> Tensor:
    """Cross-correlation of [N, C_in, spatial...] input with [C_out, C_in, k...] kernel"""
    x_t, w_t = as_tensor(inp), as_tensor(kernel)
    b_t = as_tensor(bias) if bias is not None else None
    rank = x_t.ndim - 2

    if rank not in (1, 2, 3):
        raise ShapeError(f'conv_nd supports 1-3 spatial axes, got input shape {x_t.shape}')

    if w_t.ndim != rank + 2 or w_t.shape[1] != x_t.shape[1]:
        raise ShapeError(f'Kernel shape {w_t.shape} does not match input shape {x_t.shape}')

    if b_t is not None and b_t.shape != (w_t.shape[0],):
        raise ShapeError(f'Bias shape {b_t.shape} does not match kernel shape {w_t.shape}')

    strides = _per_axis(stride, rank, 'stride')
    pads = _per_axis(padding, rank, 'padding')
    ksize = w_t.shape[2:]
    out_extent = tuple((n + 2 * p - k) // s + 1
                       for n, p, k, s in zip(x_t.shape[2:], pads, ksize, strides))

    if any(m <= 0 for m in out_extent):
        raise ShapeError(f'Non-positive output extent {out_extent} for input {x_t.shape}, '
                         f'kernel {w_t.shape}')

    x_pad = np.pad(x_t.data, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    offsets = list(product(*(range(k) for k in ksize)))
    out = np.zeros((x_t.shape[0], w_t.shape[0]) + out_extent, dtype=FLOAT_DTYPE)

    for offset in offsets:
        patch = x_pad[_window_slices(offset, strides, out_extent)]
        w_k = w_t.data[(slice(None), slice(None)) + offset]
        out += np.moveaxis(np.tensordot(w_k, patch, axes=([1], [1])), 0, 1)

    if b_t is not None:
        out += b_t.data.reshape((1, -1) + (1,) * rank)

    spatial = tuple(range(2, rank + 2))

    def adjoint(g: np.ndarray) -> Grads:
        g_w = np.zeros_like(w_t.data) if w_t.requires_grad else None
        g_x = np.zeros_like(x_pad) if x_t.requires_grad else None

        for offset in offsets:
            window = _window_slices(offset, strides, out_extent)

            if g_w is not None:
                g_w[(slice(None), slice(None)) + offset] = np.tensordot(
                    g, x_pad[window], axes=((0,) + spatial, (0,) + spatial))

            if g_x is not None:
                w_k = w_t.data[(slice(None), slice(None)) + offset]
                g_x[window] += np.moveaxis(np.tensordot(w_k, g, axes=([0], [1])), 0, 1)

        if g_x is not None:
            g_x = g_x[(slice(None), slice(None)) +
                      tuple(slice(p, p + n) for p, n in zip(pads, x_t.shape[2:]))]

        g_b = g.sum(axis=(0,) + spatial) if b_t is not None and b_t.requires_grad else None
        return g_x, g_w, g_b

    inputs = (x_t, w_t) + ((b_t,) if b_t is not None else ())
    return record_op(out, inputs, adjoint)


def max_pool(inp: Operand, window: IntOrTuple, stride: Optional[IntOrTuple] = None) -> Tensor:
    """Max pooling over spatial axes; ties go to the lowest linear index in the window"""
    x_t = as_tensor(inp)
    rank = x_t.ndim - 2

    if rank < 1:
        raise ShapeError(f'max_pool needs [N, C, spatial...] input, got {x_t.shape}')

    size = _per_axis(window, rank, 'window')
    strides = _per_axis(stride if stride is not None else size, rank, 'stride')

    if any(w > n for w, n in zip(size, x_t.shape[2:])):
        raise ShapeError(f'Pooling window {size} larger than input {x_t.shape}')

    out_extent = tuple((n - w) // s + 1 for n, w, s in zip(x_t.shape[2:], size, strides))
    offsets = list(product(*(range(w) for w in size)))
    candidates = np.stack([x_t.data[_window_slices(o, strides, out_extent)] for o in offsets])
    choice = np.argmax(candidates, axis=0)
    out = np.take_along_axis(candidates, choice[None], axis=0)[0]

    def adjoint(g: np.ndarray) -> Grads:
        grad = np.zeros_like(x_t.data)

        for i, offset in enumerate(offsets):
            grad[_window_slices(offset, strides, out_extent)] += np.where(choice == i, g, 0.0)

        return (grad,)

    return record_op(out, (x_t,), adjoint)


def upsample_nearest(inp: Operand, factor: IntOrTuple) -> Tensor:
    """Nearest-neighbour upsampling of spatial axes by integer factors"""
    x_t = as_tensor(inp)
    rank = x_t.ndim - 2
    factors = _per_axis(factor, rank, 'factor')

    if any(f < 1 for f in factors):
        raise ShapeError(f'Upsampling factors must be positive, got {factors}')

    out = x_t.data

    for axis, f in enumerate(factors):
        out = np.repeat(out, f, axis=axis + 2)

    def adjoint(g: np.ndarray) -> Grads:
        split_shape: Tuple[int, ...] = x_t.shape[:2]

        for n, f in zip(x_t.shape[2:], factors):
            split_shape += (n, f)

        block_axes = tuple(3 + 2 * i for i in range(rank))
        return (g.reshape(split_shape).sum(axis=block_axes),)

    return record_op(out, (x_t,), adjoint)


def softmax(inp: Operand, axis: int = 1) -> Tensor:
    """Softmax along axis with max subtraction"""
    x_t = as_tensor(inp)
    shifted = x_t.data - x_t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g: np.ndarray) -> Grads:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op(out, (x_t,), adjoint)
