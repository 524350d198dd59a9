"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a backward closure that maps the output
gradient to one gradient per parent. `backward` walks the tape in reverse
topological order. `grad_check` compares the tape against central
differences.
"""

import json
import logging
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"
CHECKPOINT_FORMAT = "ost-f64le-v1"


class TensorError(ValueError):
    """Shape, domain or graph misuse inside the tensor engine."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread. Values are unchanged."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    # make `ndarray * Tensor` dispatch to Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- gradients -----------------------------------------------------
    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, array) -> None:
        """Add an externally computed gradient (e.g. a sum over worker tapes)."""
        array = np.asarray(array, dtype=np.float64)
        if array.shape != self.shape:
            raise TensorError(f"gradient shape {array.shape} does not match tensor shape {self.shape}")
        self.grad = array.copy() if self.grad is None else self.grad + array

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return reduce_max(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor_create(shape: Sequence[int], data: Iterable[float], requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise TensorError(f"extents must be positive, got {shape}")
    flat = np.asarray(list(data), dtype=np.float64)
    if int(np.prod(shape)) != flat.size:
        raise TensorError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def custom_op(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward value and its backward closure as a graph node.

    backward_fn(grad_out) must return one array (or None) per parent.
    """
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise TensorError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return custom_op(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return custom_op(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return custom_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)
    return custom_op(x.data ** exponent, (x,),
                     lambda g: (g * exponent * x.data ** (exponent - 1.0),), "power")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise TensorError("log of a nonpositive value")
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return custom_op(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return custom_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clip(x, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return custom_op(np.clip(x.data, low, high), (x,), lambda g: (g * inside,), "clip")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat needs at least one tensor")
    axis = _check_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise TensorError(f"concat shape mismatch: {e}") from e
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def pointwise(kind: str, *operands, axis: int = 0, factor: float = 1.0) -> Tensor:
    """Dispatch by name: add, mul, relu, exp, log, sigmoid, concat, scale."""
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "concat":
        return concat(operands, axis=axis)
    if kind == "scale":
        return scale(operands[0], factor)
    unary = {"relu": relu, "exp": exp, "log": log, "sigmoid": sigmoid}
    if kind not in unary:
        raise TensorError(f"unknown pointwise kind '{kind}'")
    return unary[kind](operands[0])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise TensorError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from e

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(out, (a, b), backward_fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ W + b with W laid out [D_in, D_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise TensorError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise TensorError(f"linear: bias {bias.shape} should be ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def backward_fn(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, weight.shape[0]).T @ g.reshape(-1, weight.shape[1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, weight.shape[1]).sum(axis=0))
        return tuple(grads)

    return custom_op(out, parents, backward_fn, "linear")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax. Entries where `mask` is False get probability 0."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise TensorError("softmax mask leaves a row with no admissible entry")
        z = np.where(mask, z, -np.inf)
    shifted = np.exp(z - z.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (x,), backward_fn, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    centred = x - reduce_mean(x, -1, keepdims=True)
    variance = reduce_mean(centred * centred, -1, keepdims=True)
    return centred * power(variance + eps, -0.5) * gain + bias


def conv2d(inputs, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a [C_in, H, W] map with a [C_out, C_in, k, k] kernel."""
    inputs, kernel = as_tensor(inputs), as_tensor(kernel)
    if inputs.ndim != 3 or kernel.ndim != 4:
        raise TensorError(f"conv2d expects [C,H,W] and [O,C,k,k], got {inputs.shape} and {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or c_in != inputs.shape[0]:
        raise TensorError(f"conv2d kernel {kernel.shape} does not fit input {inputs.shape}")
    if stride < 1 or padding < 0:
        raise TensorError("conv2d needs stride >= 1 and padding >= 0")
    _, h, w = inputs.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise TensorError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")

    padded = np.pad(inputs.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = windows.shape[1], windows.shape[2]
    out = np.einsum("chwij,ocij->ohw", windows, kernel.data)
    parents = [inputs, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise TensorError(f"conv2d bias {bias.shape} should be ({c_out},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward_fn(g):
        g_kernel = np.einsum("chwij,ohw->ocij", windows, g)
        g_windows = np.einsum("ohw,ocij->chwij", g, kernel.data)
        g_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                g_padded[:, i:i + stride * (h_out - 1) + 1:stride,
                         j:j + stride * (w_out - 1) + 1:stride] += g_windows[:, :, :, i, j]
        g_input = g_padded[:, padding:padding + h, padding:padding + w]
        grads = [g_input, g_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return custom_op(out, parents, backward_fn, "conv2d")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op(out, (x,), backward_fn, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[_check_axis(axis, x.ndim)]
    return scale(reduce_sum(x, axis, keepdims), 1.0 / count)


def reduce_max(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    winners = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, winners, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, winners, g, axis=axis)
        return (grad,)

    return custom_op(out, (x,), backward_fn, "max")


def reduce(x, axis: int, kind: str) -> Tensor:
    if kind == "max":
        return reduce_max(x, axis)
    if kind == "sum":
        return reduce_sum(x, axis)
    if kind == "mean":
        return reduce_mean(x, axis)
    raise TensorError(f"unknown reduction '{kind}'")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise TensorError(str(e)) from e
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return custom_op(np.array(out, dtype=np.float64), (x,), backward_fn, "getitem")


def index_rows(x, indices) -> Tensor:
    """Rows of x in the given order; repeated rows add their gradients back."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise TensorError(f"row index out of range for {x.shape[0]} rows")

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return custom_op(x.data[indices], (x,), backward_fn, "index_rows")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every recorded ancestor of a scalar loss.

    Gradients add up: a tensor reached along several paths, or across
    several backward calls, accumulates the sum.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss does not depend on any tensor that requires grad")

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.is_leaf:
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool = False

    def __post_init__(self):
        self.passed = bool(self.max_rel_error <= self.tolerance)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               op_name: str = "f", indices: Sequence[int] | None = None,
               abs_floor: float = 0.0) -> GradReport:
    """Central-difference check of d f(x) / d x.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-8). `indices`
    restricts the comparison to selected flat positions of x. Entries whose
    analytic and numeric values both fall below `abs_floor` count as exact.
    """
    original = x.data.copy()
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.requires_grad:
        backward(out)
    analytic = np.zeros_like(original) if x.grad is None else x.grad.copy()
    positions = range(original.size) if indices is None else indices

    worst = 0.0
    with no_grad():
        for flat in positions:
            bumped = original.copy()
            bumped.flat[flat] += eps
            x.data = bumped
            f_plus = f(x).item()
            bumped.flat[flat] = original.flat[flat] - eps
            x.data = bumped
            f_minus = f(x).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.flat[flat]
            if max(abs(a), abs(numeric)) < abs_floor:
                continue
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    x.data = original
    x.grad = None
    return GradReport(op_name=op_name, max_rel_error=float(worst), tolerance=tol)


@dataclass
class GradCase:
    name: str
    make_input: Callable[[np.random.Generator], np.ndarray]
    fn: Callable[[Tensor], Tensor]


def _weighted(op: Callable[[Tensor], Tensor], rng: np.random.Generator, shape: tuple):
    weights = rng.normal(size=shape)
    return lambda x: reduce_sum(op(x) * weights)


def core_grad_cases(rng: np.random.Generator) -> list:
    """One case per differentiable engine op, each reduced to a weighted scalar."""
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    bias = rng.normal(size=5)
    kernel = rng.normal(size=(2, 2, 3, 3))
    gain, shift = rng.normal(size=4), rng.normal(size=4)
    mask = np.array([[True, False, True, True]] * 3)
    positive = lambda r: r.uniform(0.5, 2.0, size=(3, 4))
    normal = lambda r: r.normal(size=(3, 4))
    cases = [
        ("add", normal, lambda x: add(x, b)),
        ("sub", normal, lambda x: sub(b, x)),
        ("mul", normal, lambda x: mul(x, x)),
        ("div", positive, lambda x: div(b, x)),
        ("neg", normal, neg),
        ("scale", normal, lambda x: scale(x, -2.5)),
        ("power", positive, lambda x: power(x, 1.7)),
        ("exp", normal, exp),
        ("log", positive, log),
        ("sigmoid", normal, sigmoid),
        ("relu", normal, relu),
        ("abs", normal, absolute),
        ("clip", normal, lambda x: clip(x, -0.5, 0.5)),
        ("concat", normal, lambda x: concat([x, mul(x, x)], axis=1)),
        ("matmul", normal, lambda x: matmul(x, w)),
        ("linear", normal, lambda x: linear(x, w, bias)),
        ("softmax", normal, lambda x: softmax(x, axis=-1)),
        ("softmax_masked", normal, lambda x: softmax(x, axis=-1, mask=mask)),
        ("layer_norm", normal, lambda x: layer_norm(x, gain, shift)),
        ("reduce_max", normal, lambda x: reduce_max(x, axis=1)),
        ("reduce_sum", normal, lambda x: reduce_sum(x, axis=0)),
        ("reduce_mean", normal, lambda x: reduce_mean(x, axis=1)),
        ("reshape", normal, lambda x: reshape(x, (2, 6))),
        ("transpose", normal, lambda x: transpose(x)),
        ("getitem", normal, lambda x: getitem(x, (slice(0, 2), [1, 1, 3]))),
        ("index_rows", normal, lambda x: index_rows(x, [2, 0, 2])),
    ]
    out = []
    for name, make_input, op in cases:
        probe = op(Tensor(make_input(np.random.default_rng(0))))
        out.append(GradCase(name, make_input, _weighted(op, rng, probe.shape)))

    conv_in = lambda r: r.normal(size=(2, 5, 5))
    conv_bias = rng.normal(size=2)
    for name, stride, padding in (("conv2d", 1, 1), ("conv2d_stride2", 2, 0)):
        op = (lambda s, p: lambda x: conv2d(x, kernel, conv_bias, stride=s, padding=p))(stride, padding)
        probe = op(Tensor(conv_in(np.random.default_rng(0))))
        out.append(GradCase(name, conv_in, _weighted(op, rng, probe.shape)))
    return out


def run_grad_cases(cases: Sequence[GradCase], seed: int = 0, n_points: int = 10,
                   eps: float = 1e-5, tol: float = 1e-4) -> list:
    """Check every case at n_points random inputs; one report per case (worst point)."""
    rng = np.random.default_rng(seed)
    reports = []
    for case in cases:
        worst = 0.0
        for _ in range(n_points):
            x = Tensor(case.make_input(rng), requires_grad=True)
            worst = max(worst, grad_check(case.fn, x, eps, tol, case.name).max_rel_error)
        report = GradReport(case.name, worst, tol)
        logger.debug(f"gradcheck {case.name}: {worst:.3e}")
        reports.append(report)
    return reports


def op_gradcheck_suite(seed: int = 0, n_points: int = 10) -> list:
    return run_grad_cases(core_grad_cases(np.random.default_rng(seed)), seed=seed, n_points=n_points)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict | None = None
    v: dict | None = None

    def to_arrays(self) -> dict:
        arrays = {"optim.step": np.array([float(self.step)])}
        for name, value in (self.m or {}).items():
            arrays[f"optim.m.{name}"] = value
        for name, value in (self.v or {}).items():
            arrays[f"optim.v.{name}"] = value
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], kind: str = "adam") -> "OptimizerState":
        state = cls(kind=kind, step=int(arrays["optim.step"][0]), m={}, v={})
        for key, value in arrays.items():
            if key.startswith("optim.m."):
                state.m[key[len("optim.m."):]] = np.array(value)
            elif key.startswith("optim.v."):
                state.v[key[len("optim.v."):]] = np.array(value)
        return state


def _named(params) -> dict:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def optimizer_step(params, state: OptimizerState, lr: float, kind: str | None = None) -> None:
    """In-place SGD or Adam update, then clear gradients."""
    kind = kind or state.kind
    named = _named(params)
    missing = [name for name, p in named.items() if p.grad is None]
    if missing:
        raise TensorError(f"missing gradients for: {', '.join(missing[:5])}")

    state.step += 1
    if kind == "sgd":
        for p in named.values():
            p.data = p.data - lr * p.grad
    elif kind == "adam":
        state.m = state.m if state.m is not None else {}
        state.v = state.v if state.v is not None else {}
        b1, b2 = state.beta1, state.beta2
        for name, p in named.items():
            m = state.m.get(name, np.zeros_like(p.data))
            v = state.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1.0 - b1) * p.grad
            v = b2 * v + (1.0 - b2) * p.grad ** 2
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - b1 ** state.step)
            v_hat = v / (1.0 - b2 ** state.step)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        raise TensorError(f"unknown optimizer '{kind}'")
    for p in named.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory: str, tensors: Mapping[str, object], meta: dict | None = None) -> str:
    """Write manifest.json plus one little-endian float64 blob in manifest order."""
    os.makedirs(directory, exist_ok=True)
    entries, offset = [], 0
    blob_path = os.path.join(directory, CHECKPOINT_BLOB)
    with open(blob_path, "wb") as blob:
        for name, value in tensors.items():
            array = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            entries.append({"name": name, "shape": list(array.shape), "offset": offset})
            blob.write(array.tobytes())
            offset += array.nbytes
    manifest = {"format": CHECKPOINT_FORMAT, "total_bytes": offset, "entries": entries, "meta": meta or {}}
    with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {directory}")
    return directory


def load_checkpoint(directory: str) -> tuple:
    """Return (name -> array in manifest order, meta)."""
    manifest_path = os.path.join(directory, CHECKPOINT_MANIFEST)
    if not os.path.exists(manifest_path):
        raise TensorError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise TensorError(f"unsupported checkpoint format {manifest.get('format')!r}")
    raw = np.fromfile(os.path.join(directory, CHECKPOINT_BLOB), dtype="<f8")
    if raw.nbytes != manifest["total_bytes"]:
        raise TensorError(f"checkpoint blob holds {raw.nbytes} bytes, manifest says {manifest['total_bytes']}")
    arrays = {}
    for entry in manifest["entries"]:
        start = entry["offset"] // 8
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = raw[start:start + count].astype(np.float64).reshape(entry["shape"])
    return arrays, manifest.get("meta", {})
