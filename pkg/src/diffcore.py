"""
NP-FKGC - Differentiable Core
Define-by-run reverse-mode automatic differentiation over float64 numpy buffers.

Every operation executed on tensors that require gradients is appended to the
thread's active Tape; `backward` replays the tape in exact reverse order.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import DimensionError, DomainError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

LEAKY_RELU_SLOPE = 0.01


class Tensor:
    """
    Dense float64 array that can take part in the gradient tape.

    Args:
        data: Array-like values (always stored as float64, row-major)
        requires_grad: Whether gradients should be accumulated for this tensor
        name: Optional label used in error messages and checkpoints
    """

    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        """Raise NumericError when any value is NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operators -----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    # ---- method aliases ------------------------------------------------
    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# =============================================================================
# TAPE
# =============================================================================

@dataclass
class TapeRecord:
    """One executed operation: its inputs, its output and the local vector-Jacobian product."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations for one thread."""

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        self.records.append(TapeRecord(op, inputs, output, backward_fn))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """
        Propagate d(loss)/d(x) to every requires_grad tensor reachable from loss.

        Leaf tensors accumulate into `.grad`; intermediate outputs get their
        gradient assigned. The tape is cleared afterwards.
        """
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: Dict[int, Tensor] = {id(loss): loss}
        produced = set()

        for rec in reversed(self.records):
            key = id(rec.output)
            produced.add(key)
            g = pending.pop(key, None)
            if g is None:
                continue
            rec.output.grad = g
            input_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                k = id(inp)
                tensors[k] = inp
                if k in pending:
                    pending[k] = pending[k] + ig
                else:
                    pending[k] = ig

        for k, g in pending.items():
            t = tensors[k]
            if k in produced:
                t.grad = g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g

        self.clear()


_local = threading.local()


def get_tape() -> Tape:
    """Return the calling thread's active tape, creating it on first use."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend tape recording (evaluation, oracles, optimizer updates)."""
    tape = get_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def backward(loss: Tensor) -> None:
    """Run the reverse pass of the active tape from a scalar loss."""
    get_tape().backward(loss)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    tape = get_tape()
    needs_grad = tape.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, result, backward_fn)
    return result


# =============================================================================
# ELEMENTWISE
# =============================================================================

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.shape == (1,)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable")


def _fit(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient back onto a scalar operand."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def leaky_relu(a: ArrayLike, slope: float = LEAKY_RELU_SLOPE) -> Tensor:
    a = _as_tensor(a)
    local = np.where(a.data > 0.0, 1.0, slope)
    return _emit("leaky_relu", (a,), a.data * local, lambda g: (g * local,))


def square(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def absolute(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def softplus(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _emit("softplus", (a,), np.logaddexp(0.0, a.data), lambda g: (g * _sigmoid(a.data),))


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "relu": relu,
    "square": square, "sqrt": sqrt, "abs": absolute, "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: ArrayLike, b: Optional[ArrayLike] = None, **kwargs) -> Tensor:
    """
    Dispatch a pointwise operation by name.

    Args:
        op: One of add, sub, mul, div, neg, exp, log, tanh, sigmoid, relu,
            leaky_relu, square, sqrt, abs, softplus
        a: First operand
        b: Second operand for binary ops
        **kwargs: `slope` for leaky_relu

    Returns:
        Result tensor recorded on the tape
    """
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op == "leaky_relu":
        return leaky_relu(a, **kwargs)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"Unknown elementwise op: {op}")


# =============================================================================
# LINEAR ALGEBRA / REDUCTIONS
# =============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Affine map x·Wᵀ + b for x of shape (n, in), W (out, in), b (out,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is None:
        return _emit("linear", (x, weight), out, lambda g: (g @ weight.data, g.T @ x.data))
    bias = _as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    return _emit("linear", (x, weight, bias), out + bias.data,
                 lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


def _check_axis(a: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce(op: str, a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """
    Sum, mean or max over one axis (or all entries).

    Max routes its gradient to the first maximal index on ties.
    """
    a = _as_tensor(a)
    axis = _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DimensionError(f"{op}: empty reduction over shape {a.shape}")

    def spread(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    if op == "sum":
        return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), lambda g: (spread(g),))
    if op == "mean":
        return _emit("mean", (a,), a.data.mean(axis=axis, keepdims=keepdims),
                     lambda g: (spread(g) / count,))
    if op == "max":
        if axis is None:
            idx = int(np.argmax(a.data))
            out = a.data.reshape(-1)[idx]
            out = np.asarray(out).reshape((1,) * a.ndim if keepdims else ())

            def max_all(g: np.ndarray) -> Tuple[np.ndarray]:
                full = np.zeros(a.size)
                full[idx] = np.asarray(g).reshape(-1)[0]
                return (full.reshape(a.shape),)
            return _emit("max", (a,), out, max_all)

        arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        out = np.take_along_axis(a.data, arg, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def max_axis(g: np.ndarray) -> Tuple[np.ndarray]:
            full = np.zeros_like(a.data)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, arg, gk, axis=axis)
            return (full,)
        return _emit("max", (a,), out, max_axis)
    raise ValueError(f"Unknown reduction: {op}")


def softmax(scores: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along one axis."""
    scores = _as_tensor(scores)
    axis = _check_axis(scores, axis)
    if scores.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = scores.data - scores.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (scores,), out,
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# =============================================================================
# SHAPE / INDEXING
# =============================================================================

def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis; all other dimensions must agree."""
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    ref = ts[0]
    axis = _check_axis(ref, axis)
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
                t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=axis),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def getitem(a: ArrayLike, key) -> Tensor:
    a = _as_tensor(a)
    out = np.array(a.data[key], dtype=np.float64)

    def scatter(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)
    return _emit("getitem", (a,), out, scatter)


def take(a: ArrayLike, index: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Gather rows; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise DimensionError(f"take: index out of range for {a.shape[0]} rows")

    def scatter(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _emit("take", (a,), a.data[idx], scatter)


def segment_sum(a: ArrayLike, segment_ids: Union[Sequence[int], np.ndarray], n_segments: int) -> Tensor:
    """Scatter-add rows of `a` into `n_segments` buckets."""
    a = _as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise DimensionError(f"segment_sum: {ids.shape[0]} ids for {a.shape[0]} rows")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return _emit("segment_sum", (a,), out, lambda g: (g[ids],))


def expand(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast to `shape`; the backward pass sums over the broadcast axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        if np.broadcast_shapes(a.shape, shape) != shape:
            raise ValueError
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}") from exc

    def unbroadcast(g: np.ndarray) -> Tuple[np.ndarray]:
        while g.ndim > a.ndim:
            g = g.sum(axis=0)
        for i, n in enumerate(a.shape):
            if n == 1 and g.shape[i] != 1:
                g = g.sum(axis=i, keepdims=True)
        return (g,)
    return _emit("expand", (a,), np.broadcast_to(a.data, shape).copy(), unbroadcast)


# =============================================================================
# OPTIMIZER
# =============================================================================

@dataclass
class AdamState:
    """First/second moment buffers and step counter for Adam."""
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> Dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: Dict[str, Tensor], state: AdamState,
              grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params: Named parameters to update
        state: Moment buffers, mutated in place
        grads: Optional explicit gradients; defaults to each tensor's `.grad`
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam optimizer bound to a fixed set of named parameters."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, state: Optional[AdamState] = None):
        self.params = params
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# =============================================================================
# FINITE-DIFFERENCE ORACLE
# =============================================================================

def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar `fn()` with respect to `tensor`."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_check(fn: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """
    Compare tape gradients of `fn()` against central differences.

    Returns:
        Largest relative error |a - n| / max(|a| + |n|, floor) over all entries
    """
    for p in params.values():
        p.grad = None
    get_tape().clear()
    backward(fn())
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(fn, p, h)
        err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
        if err.size:
            worst = max(worst, float(err.max()))
        logger.debug("gradient check %s: max rel err %.3e", name, float(err.max()) if err.size else 0.0)
    return worst
