"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  Every operation on tensors that
require gradients records its parents and an adjoint rule; calling
:meth:`Tensor.backward` on a scalar walks that tape in reverse topological
order exactly once and accumulates ``.grad`` on every tensor that requires
it.

Only the operations needed by the CRPS closed forms and the network layers
are provided.  Broadcasting follows numpy rules; adjoints are summed back to
the operand shape.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import NumericError, ShapeError

_node_ids = itertools.count()
_grad_enabled = True

TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "node_id", "_parents", "_adjoint")
    # numpy must defer to our reflected operators (ndarray - Tensor)
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), adjoint: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._adjoint = adjoint

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if self.value.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient reaching op '{node.op}' (node {node.node_id})")
            if node._adjoint is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._adjoint(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, op: str, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(value, op=op)
    return Tensor(value, True, op=op, parents=tuple(parents), adjoint=adjoint)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.value * b.value, "mul", (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.value == 0):
        raise NumericError("div: division by zero")
    out = a.value / b.value
    return _make(out, "div", (a, b), lambda g: (g / b.value, -g * out / b.value))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    exponent = float(exponent)
    if not exponent.is_integer() and np.any(a.value < 0):
        raise NumericError("power: negative base with non-integer exponent")
    out = a.value ** exponent
    return _make(out, "power", (a,), lambda g: (g * exponent * a.value ** (exponent - 1.0),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log: non-positive argument")
    return _make(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise NumericError("sqrt: negative argument")
    out = np.sqrt(a.value)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def erf(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.erf(a.value), "erf", (a,),
                 lambda g: (g * TWO_OVER_SQRT_PI * np.exp(-a.value ** 2),))


# ---------------------------------------------------------------- activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.value), "softplus", (a,),
                 lambda g: (g * special.expit(a.value),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.value)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, floor) -> Tensor:
    """``max(a, floor)`` with zero gradient where the floor is active."""
    a = as_tensor(a)
    floor = np.asarray(floor, dtype=np.float64)
    mask = a.value >= floor
    return _make(np.where(mask, a.value, floor), "clamp_min", (a,), lambda g: (g * mask,))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.value, b.value), "where", (a, b),
                 lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


# ---------------------------------------------------------------- reductions and shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, "sum", (a,), adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis) / float(count)


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.value.T, "transpose", (a,), lambda g: (g.T,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, "matmul", (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; adjoint scatters back with accumulation."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def adjoint(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], "take_rows", (a,), adjoint)


def segment_sum(a, segment: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segment``."""
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.intp)
    if segment.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {segment.shape[0]} ids for {a.shape[0]} rows")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, segment, a.value)
    return _make(out, "segment_sum", (a,), lambda g: (g[segment],))


# ---------------------------------------------------------------- layers

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "identity": lambda x: x,
}


@dataclass
class AffineLayer:
    """``activation(x @ weights.T + bias)`` with weights of shape (out, in)."""

    weights: Tensor
    bias: Tensor
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weights {self.weights.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int,
             activation: str = "identity") -> "AffineLayer":
        # Glorot-uniform weights, zero bias
        bound = math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        return cls(Tensor(w, True), Tensor(np.zeros(n_out), True), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"layer expects (*, {self.n_in}) input, got {x.shape}")
        return ACTIVATIONS[self.activation](matmul(x, transpose(self.weights)) + self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


def mlp_forward(layers: Iterable[AffineLayer], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], gradients: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps_opt: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Pure: inputs are not modified."""
    if len(state.first_moment) != len(params):
        raise ShapeError("Adam state does not match the parameter list")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, gradients, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"Adam: parameter {p.shape} vs gradient {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps_opt))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------- gradient checking

def finite_difference_gradient(loss_fn: Callable[[], float], param: Tensor,
                               step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every element of ``param``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        out_flat[i] = (hi - lo) / (2.0 * step)
    return out


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                            abs_floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|), with differences below ``abs_floor`` counted as 0."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    return np.where(diff <= abs_floor, 0.0, rel)
