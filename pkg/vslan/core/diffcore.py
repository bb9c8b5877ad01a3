# vslan/core/diffcore.py
"""
Dense float64 tensors with a reverse-mode differentiation record.

Every operation returns a new Tensor that remembers its parents and a
backward closure mapping the upstream gradient to one gradient per parent.
``backward(loss)`` walks the record in reverse topological order.
"""
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from vslan.core.config import settings
from vslan.core.exceptions import NonDeterminismError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = {"grad_enabled": True, "validate": settings.DEBUG_VALIDATION}


def set_debug_validation(enabled: bool) -> None:
    """Toggle NaN/Inf checks on every tensor created from now on."""
    _state["validate"] = bool(enabled)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording parents (inference, sampling)."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Backward] = None
        self.op = "leaf"
        _check_finite(self.data, self.op)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


@dataclass(frozen=True)
class InitSpec:
    """How a parameter was initialized: uniform(-bound, bound) or a constant fill."""
    kind: str
    value: float = 0.0

    def describe(self) -> str:
        if self.kind == "uniform":
            return f"uniform(-{self.value:.6g}, {self.value:.6g})"
        return f"constant({self.value:.6g})"


class Parameter(Tensor):
    __slots__ = ("name", "init_spec")

    def __init__(self, name: str, data, init_spec: InitSpec = InitSpec("constant", 0.0)):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init_spec = init_spec
        self.op = "param"

    def assign(self, values: np.ndarray) -> None:
        """Overwrite values in place; the shape is fixed at construction."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise ShapeError(f"parameter {self.name} has shape {self.data.shape}, got {values.shape}")
        self.data[...] = values

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


class ParameterStore:
    """Named parameters of one model; names are unique."""

    def __init__(self, seed: int = 0):
        self._params: Dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def matrix(self, name: str, rows: int, cols: int) -> Parameter:
        """Glorot-uniform matrix of shape [rows, cols]."""
        bound = math.sqrt(6.0 / (rows + cols))
        values = self._rng.uniform(-bound, bound, size=(rows, cols))
        return self.add(Parameter(name, values, InitSpec("uniform", bound)))

    def vector(self, name: str, size: int, fill: float = 0.0) -> Parameter:
        return self.add(Parameter(name, np.full(size, fill), InitSpec("constant", fill)))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            p.assign(state[name])


# ----------------------------------------------------------------------------
# graph plumbing
# ----------------------------------------------------------------------------

def _check_finite(data: np.ndarray, op: str) -> None:
    if _state["validate"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str = "op") -> Tensor:
    """Record a new operation. ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    _check_finite(out.data, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = np.array(grad, dtype=np.float64)
    else:
        t.grad = t.grad + grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
    """Populate ``grad`` on every tensor that requires it and reaches ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                _accumulate(parent, g)


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return primitive(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a: Tensor) -> Tensor:
    return primitive(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    return primitive(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return primitive(out, (a,), lambda g: (g * out,), "exp")


def expm1(a: Tensor) -> Tensor:
    out = np.expm1(a.data)
    return primitive(out, (a,), lambda g: (g * (out + 1.0),), "expm1")


def log(a: Tensor) -> Tensor:
    return primitive(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return primitive(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu(a: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    positive = a.data > 0
    out = np.where(positive, a.data, np.expm1(np.minimum(a.data, 0.0)))
    return primitive(out, (a,), lambda g: (g * np.where(positive, 1.0, out + 1.0),), "elu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return primitive(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return primitive(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ----------------------------------------------------------------------------
# shape manipulation and reductions
# ----------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.data.shape
    return primitive(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return primitive(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def index_select(a: Tensor, index) -> Tensor:
    """Basic slicing or integer-array gathering; gradients scatter back (repeats add up)."""
    shape = a.data.shape
    basic = _is_basic_index(index)

    def _backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return primitive(np.array(a.data[index]), (a,), _backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return primitive(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return primitive(np.stack([t.data for t in tensors], axis=axis), tensors, _backward, "stack")


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T (+ bias) over the last axis of x."""
    x = as_tensor(x)
    out_dim, in_dim = W.data.shape
    if x.data.shape[-1:] != (in_dim,):
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if bias is not None and bias.data.shape != (out_dim,):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {W.shape}")
    out = x.data @ W.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        flat_g = g.reshape(-1, out_dim)
        flat_x = x.data.reshape(-1, in_dim)
        grads = [g @ W.data, flat_g.T @ flat_x]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    parents = (x, W) if bias is None else (x, W, bias)
    return primitive(out, parents, _backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if x.data.shape[axis] == 0:
        raise ShapeError("softmax of an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return primitive(out, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return primitive(out, (x,), _backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis to mean 0 / variance 1, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (variance + eps) ** -0.5 * gain + bias


@dataclass
class LstmParams:
    """Fused gate weights; gate order is input, forget, candidate, output."""
    W: Parameter
    b: Parameter

    @property
    def hidden(self) -> int:
        return self.W.data.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.data.shape[1] - self.hidden


def make_lstm(store: ParameterStore, name: str, input_dim: int, hidden: int, forget_bias: float = 1.0) -> LstmParams:
    W = store.matrix(f"{name}.W", 4 * hidden, input_dim + hidden)
    b = store.vector(f"{name}.b", 4 * hidden)
    b.data[hidden:2 * hidden] = forget_bias
    b.init_spec = InitSpec("constant", forget_bias)
    return LstmParams(W=W, b=b)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams) -> Tuple[Tensor, Tensor]:
    d_h = params.hidden
    if h_prev.shape[-1] != d_h or c_prev.shape[-1] != d_h:
        raise ShapeError(f"lstm_cell: state shapes {h_prev.shape}/{c_prev.shape} do not match hidden size {d_h}")
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"lstm_cell: input shape {x.shape} does not match weight shape {params.W.shape}")
    gates = linear(concat([x, h_prev], axis=-1), params.W, params.b)
    i = sigmoid(gates[..., :d_h])
    f = sigmoid(gates[..., d_h:2 * d_h])
    g = tanh(gates[..., 2 * d_h:3 * d_h])
    o = sigmoid(gates[..., 3 * d_h:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def gaussian_sample(mu: Tensor, log_var: Tensor, noise) -> Tensor:
    """Reparameterized draw mu + exp(log_var / 2) * noise; noise is a constant."""
    noise = Tensor(noise.data if isinstance(noise, Tensor) else noise)
    return mu + exp(log_var * 0.5) * noise


def kl_diag_gaussian(mu_q: Tensor, log_var_q: Tensor, mu_p: Tensor, log_var_p: Tensor) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if not (mu_q.shape == log_var_q.shape == mu_p.shape == log_var_p.shape):
        raise ShapeError(
            f"kl_diag_gaussian: shapes {mu_q.shape}, {log_var_q.shape}, {mu_p.shape}, {log_var_p.shape} differ"
        )
    # expm1(u) - u >= 0 holds exactly in floating point
    u = log_var_q - log_var_p
    diff = mu_q - mu_p
    terms = expm1(u) - u + diff * diff * exp(neg(log_var_p))
    return terms.sum(axis=-1) * 0.5


# ----------------------------------------------------------------------------
# verification and optimization
# ----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: List[float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """
    Compare analytic gradients of the scalar ``f(*inputs)`` with central differences.

    The relative error of an element is |a - n| / max(|a| + |n|, floor); the report
    holds the per-input maximum.
    """
    first = f(*inputs)
    second = f(*inputs)
    if first.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {first.shape}")
    if not np.array_equal(first.data, second.data):
        raise NonDeterminismError("two forward passes with identical inputs differ")

    for t in inputs:
        t.grad = None
    backward(second)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    errors = []
    for t, a in zip(inputs, analytic):
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.data.shape):
            original = t.data[idx]
            t.data[idx] = original + h
            plus = f(*inputs).item()
            t.data[idx] = original - h
            minus = f(*inputs).item()
            t.data[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * h)
        if t.data.size == 0:
            errors.append(0.0)
            continue
        denom = np.maximum(np.abs(a) + np.abs(numeric), floor)
        errors.append(float(np.max(np.abs(a - numeric) / denom)))
    report = GradCheckReport(errors=errors, tol=tol)
    logger.debug(f"grad_check max relative error {report.max_error:.3e}")
    return report


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Iterable[Parameter],
    state: AdamState,
    lr: float = 1e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip_norm: Optional[float] = 10.0,
) -> float:
    """One bias-corrected Adam update after global-norm clipping. Missing grads count as zero."""
    params = list(params)
    norm = clip_grad_norm(params, clip_norm) if clip_norm is not None else float("nan")
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = beta1 * state.m.get(p.name, np.zeros_like(p.data)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(p.name, np.zeros_like(p.data)) + (1.0 - beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return norm
