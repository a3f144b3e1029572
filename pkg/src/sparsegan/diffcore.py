"""Dense tensors with reverse-mode automatic differentiation.

Every op is a :class:`Function` subclass. Backward rules are written in terms
of other ops, so running backward with ``create_graph=True`` records a second
graph and gives gradients of gradients (needed by the gradient penalty). Ops
whose backward rule drops to raw numpy set ``twice_differentiable = False``
and refuse to take part in a double backward.

Only the op set used by the networks is provided. Elementwise ops accept
same-shape operands or a 0-d operand; there is no general broadcasting.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# Tolerances shared by tests and diagnostics.
FD_EPS = 1e-5
GRAD_RTOL = 1e-4
DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(ValueError):
    """An op was given an empty tensor or sequence."""


class SequenceTooShortError(ValueError):
    """A convolution window is longer than the sequence."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = mode
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """An n-d float array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_fn", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._fn: Function | None = None
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)

    # arithmetic sugar; python scalars become scale/shift ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded op: forward on arrays, backward on tensors."""

    twice_differentiable = True

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        for k, v in kwargs.items():
            setattr(fn, k, v)
        out = Tensor(fn.forward(*(t.data for t in inputs)))
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._fn = fn
        return out


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return sum_(g)  # only the 0-d case can differ


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class Scale(Function):
    c = 1.0

    def forward(self, a):
        return a * self.c

    def backward(self, g):
        return (scale(g, self.c),)


class Shift(Function):
    c = 0.0

    def forward(self, a):
        return a + self.c

    def backward(self, g):
        return (g,)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        (a,) = self.inputs
        y = tanh(a) if is_grad_enabled() else Tensor(self.out)
        return (mul(g, 1.0 - mul(y, y)),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, g):
        (a,) = self.inputs
        y = sigmoid(a) if is_grad_enabled() else Tensor(self.out)
        return (mul(g, mul(y, 1.0 - y)),)


class Relu(Function):
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        (a,) = self.inputs
        return (mul(g, Tensor((a.data > 0).astype(a.data.dtype))),)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        (a,) = self.inputs
        return (mul(g, exp(a)),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        (a,) = self.inputs
        return (div(g, a),)


class Sqrt(Function):
    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g):
        (a,) = self.inputs
        return (div(scale(g, 0.5), sqrt(a)),)


class MatMul(Function):
    """``a[..., m, k] @ b[k, n]``; leading axes of ``a`` act as a batch."""

    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = b.shape
            gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, n)))
        return ga, gb


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, g):
        return (transpose(g),)


class Reshape(Function):
    shape: tuple = ()

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g):
        return (reshape(g, self.inputs[0].shape),)


class Sum(Function):
    axis = None
    keepdims = False

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g):
        (a,) = self.inputs
        if not self.keepdims and self.axis is not None:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            g = reshape(g, kept)
        elif not self.keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)


class BroadcastTo(Function):
    """Expand size-1 axes; the adjoint of a keepdims sum."""

    shape: tuple = ()

    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g):
        (a,) = self.inputs
        axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, self.shape)) if s != t)
        return (sum_(g, axes, keepdims=True) if axes else g,)


class AddBias(Function):
    """``x[..., n] + b[n]``."""

    def forward(self, x, b):
        if x.shape[-1:] != b.shape:
            raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape}")
        return x + b

    def backward(self, g):
        x, b = self.inputs
        gb = None
        if b.requires_grad:
            gb = sum_(g, tuple(range(g.ndim - 1))) if g.ndim > 1 else g
        return g, gb


class Index(Function):
    """Basic slicing; backward scatters into zeros."""

    key = None

    def forward(self, a):
        return a[self.key]

    def backward(self, g):
        return (IndexAdjoint.apply(g, key=self.key, shape=self.inputs[0].shape),)


class IndexAdjoint(Function):
    key = None
    shape: tuple = ()

    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.key] = g
        return out

    def backward(self, gg):
        return (index(gg, self.key),)


class Concat(Function):
    axis = -1

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        grads = []
        start = 0
        ax = self.axis % g.ndim
        for t in self.inputs:
            width = t.shape[ax]
            key = [slice(None)] * g.ndim
            key[ax] = slice(start, start + width)
            grads.append(index(g, tuple(key)))
            start += width
        return tuple(grads)


class Stack(Function):
    axis = 0

    def forward(self, *arrays):
        return np.stack(arrays, axis=self.axis)

    def backward(self, g):
        ax = self.axis % g.ndim
        out = []
        for i in range(len(self.inputs)):
            key = [slice(None)] * g.ndim
            key[ax] = i
            out.append(index(g, tuple(key)))
        return tuple(out)


class MaxOverTime(Function):
    """Max over the second-to-last axis; ties go to the lowest index."""

    def forward(self, a):
        if a.size == 0:
            raise EmptyInputError("max_over_time of an empty tensor")
        self.arg = np.argmax(a, axis=-2)  # first maximum on ties
        return np.take_along_axis(a, self.arg[..., None, :], axis=-2)[..., 0, :]

    def backward(self, g):
        (a,) = self.inputs
        return (ScatterTime.apply(g, arg=self.arg, length=a.shape[-2]),)


class ScatterTime(Function):
    """Place ``g[..., f]`` at time ``arg[..., f]`` in a zero map."""

    arg = None
    length = 0

    def forward(self, g):
        shape = g.shape[:-1] + (self.length, g.shape[-1])
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, self.arg[..., None, :], g[..., None, :], axis=-2)
        return out

    def backward(self, gg):
        return (GatherTime.apply(gg, arg=self.arg),)


class GatherTime(Function):
    arg = None

    def forward(self, a):
        return np.take_along_axis(a, self.arg[..., None, :], axis=-2)[..., 0, :]

    def backward(self, g):
        (a,) = self.inputs
        return (ScatterTime.apply(g, arg=self.arg, length=a.shape[-2]),)


class Unfold(Function):
    """Sliding windows over time: ``[..., T, d] -> [..., T-w+1, w*d]``."""

    width = 1

    def forward(self, a):
        T = a.shape[-2]
        w = self.width
        if T < w:
            raise SequenceTooShortError(f"sequence length {T} shorter than window {w}")
        cols = [a[..., j:T - w + 1 + j, :] for j in range(w)]
        return np.concatenate(cols, axis=-1)

    def backward(self, g):
        (a,) = self.inputs
        return (Fold.apply(g, width=self.width, length=a.shape[-2]),)


class Fold(Function):
    """Adjoint of :class:`Unfold`: sums overlapping windows back onto time."""

    width = 1
    length = 0

    def forward(self, g):
        w = self.width
        d = g.shape[-1] // w
        Tp = g.shape[-2]
        out = np.zeros(g.shape[:-2] + (self.length, d), dtype=g.dtype)
        for j in range(w):
            out[..., j:Tp + j, :] += g[..., j * d:(j + 1) * d]
        return out

    def backward(self, gg):
        return (unfold(gg, self.width),)


class Gather(Function):
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""

    twice_differentiable = False
    ids = None

    def forward(self, table):
        return table[self.ids]

    def backward(self, g):
        (table,) = self.inputs
        out = np.zeros_like(table.data)
        np.add.at(out, self.ids, g.data)
        return (Tensor(out),)


class SoftmaxCrossEntropy(Function):
    """Masked mean of ``-log softmax(logits)[target]`` over the last axis."""

    twice_differentiable = False
    targets = None
    mask = None

    def forward(self, logits):
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.probs = np.exp(logp)
        picked = np.take_along_axis(logp, self.targets[..., None], axis=-1)[..., 0]
        self.count = max(float(self.mask.sum()), 1.0)
        return np.asarray(-(picked * self.mask).sum() / self.count)

    def backward(self, g):
        grad = self.probs.copy()
        np.put_along_axis(
            grad, self.targets[..., None],
            np.take_along_axis(grad, self.targets[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (self.mask / self.count)[..., None]
        return (Tensor(grad * g.data),)


# functional surface -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "div")
    return Div.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def scale(a: Tensor, c: float) -> Tensor:
    return Scale.apply(a, c=c)


def shift(a: Tensor, c: float) -> Tensor:
    return Shift.apply(a, c=c)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul,
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu,
}


def elementwise(op_kind: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes its factor through ``c``."""
    if op_kind == "scale":
        return scale(inputs[0], 1.0 if c is None else c)
    try:
        return _ELEMENTWISE[op_kind](*inputs)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    return MatMul.apply(a, b)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Transpose.apply(a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if a.size == 0:
        raise EmptyInputError("sum of an empty tensor")
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None) -> Tensor:
    if a.size == 0:
        raise EmptyInputError("mean of an empty tensor")
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis), 1.0 / n)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return AddBias.apply(x, b)


def index(a: Tensor, key) -> Tensor:
    return Index.apply(a, key=key)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise EmptyInputError("stack of no tensors")
    return Stack.apply(*tensors, axis=axis)


def max_over_time(a: Tensor) -> Tensor:
    return MaxOverTime.apply(a)


def reduce(op_kind: str, x: Tensor) -> Tensor:
    if x.size == 0:
        raise EmptyInputError(f"{op_kind} of an empty tensor")
    if op_kind == "sum":
        return sum_(x)
    if op_kind == "mean":
        return mean(x)
    if op_kind == "max_over_time":
        return max_over_time(x)
    raise ValueError(f"unknown reduction {op_kind!r}")


def unfold(a: Tensor, width: int) -> Tensor:
    return Unfold.apply(a, width=width)


def conv1d(x: Tensor, filters: Tensor) -> Tensor:
    """Valid cross-correlation over time.

    ``x`` is ``[..., T, d_in]`` and ``filters`` is ``[w, d_in, d_out]``.
    """
    w, d_in, d_out = filters.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"conv1d: input width {x.shape[-1]} != filter width {d_in}")
    if x.shape[-2] < w:
        raise SequenceTooShortError(f"sequence length {x.shape[-2]} shorter than filter {w}")
    return matmul(unfold(x, w), reshape(filters, (w * d_in, d_out)))


def gather(table: Tensor, ids) -> Tensor:
    return Gather.apply(table, ids=np.asarray(ids))


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    targets = np.asarray(targets)
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=DTYPE)
    return SoftmaxCrossEntropy.apply(logits, targets=targets, mask=mask)


# backward -----------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or node._fn is None:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._fn.inputs):
            if parent._fn is not None and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def _backprop(root: Tensor, seed: Tensor, create_graph: bool,
              targets: Sequence[Tensor] | None) -> dict[int, Tensor]:
    order = topo_order(root)
    keep: set[int] = set()
    needed: set[int] | None = None
    if targets is not None:
        keep = {id(t) for t in targets}
        needed = set(keep)
        for node in order:
            if any(id(p) in needed for p in node._fn.inputs):
                needed.add(id(node))
    grads: dict[int, Tensor] = {id(root): seed}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            key = id(node)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            fn = node._fn
            if create_graph and not fn.twice_differentiable:
                raise NotImplementedError(
                    f"{type(fn).__name__} does not support double backward")
            for parent, pg in zip(fn.inputs, fn.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pkey = id(parent)
                if needed is not None and pkey not in needed:
                    continue
                prev = grads.get(pkey)
                grads[pkey] = pg if prev is None else add(prev, pg)
    return grads


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if seed is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    leaves: dict[int, Tensor] = {}
    for node in topo_order(loss):
        for p in node._fn.inputs:
            if p._fn is None and p.requires_grad:
                leaves[id(p)] = p
    grads = _backprop(loss, Tensor(seed), False, None)
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         seed: np.ndarray | None = None) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    With ``create_graph`` the returned tensors are themselves differentiable.
    Inputs that do not influence ``output`` get zero gradients.
    """
    if seed is None:
        if output.size != 1:
            raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
        seed = np.ones_like(output.data)
    inputs = list(inputs)
    grads = _backprop(output, Tensor(seed), create_graph, inputs) if output.requires_grad else {}
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               eps: float = FD_EPS) -> float:
    """Max relative error between backward and central differences.

    ``f`` maps tensors to a scalar tensor. The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Perturbed evaluations keep grad mode on
    so that ``f`` may itself take gradients (as the gradient penalty does).
    """
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*ts)
    backward(out)
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig - eps
            fm = f(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        if a.size:
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
