"""
Tensorgrad Module
Minimal double-precision reverse-mode automatic differentiation for the
policy networks: dense tensors, an operation tape, and a finite-difference
gradient checker.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

LOG_2PI = float(np.log(2.0 * np.pi))


class TensorShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation"""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shape_text = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class TensorValueError(ValueError):
    """Raised when operand values violate an operation's precondition"""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class Tensor:
    """
    Immutable dense fp64 tensor.

    The value array is read-only once created. `grad` is filled in by
    `Tape.backward` and has the same shape as `values`.
    """

    __slots__ = ("_values", "requires_grad", "name", "grad")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(values, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self._values = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Op outputs are fresh arrays owned by the tensor, no copy needed
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        out._values = arr
        out.requires_grad = requires_grad
        out.name = None
        out.grad = None
        return out

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._values.shape

    @property
    def ndim(self) -> int:
        return self._values.ndim

    @property
    def size(self) -> int:
        return self._values.size

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values"""
        return np.array(self._values, copy=True)

    def item(self) -> float:
        if self._values.size != 1:
            raise TensorShapeError("item", [self.shape], "expected a single value")
        return float(self._values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other: "Tensor") -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, _as_tensor(other))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, _as_tensor(other))

    def __rmul__(self, other: "Tensor") -> "Tensor":
        return mul(_as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Tensor that never receives gradients"""
    return Tensor(values, requires_grad=False, name=name)


def parameter(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Tensor that receives gradients when recorded on a tape"""
    return Tensor(values, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    """One executed operation on the tape"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_active = threading.local()


def current_tape() -> Optional["Tape"]:
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of operations executed while the tape is active.

    Usage:
        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)

    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._grads: Dict[int, np.ndarray] = {}
        self._tensors: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = []
            _active.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active.stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor, seed: Optional[ArrayLike] = None) -> Dict[int, np.ndarray]:
        """
        Propagate gradients from `output` back through the recorded nodes.

        Args:
            output: Tensor to differentiate (usually a scalar loss)
            seed: Upstream gradient, defaults to ones

        Returns:
            Mapping from id(tensor) to its gradient array
        """
        if seed is None:
            seed_arr = np.ones(output.shape, dtype=np.float64)
        else:
            seed_arr = np.array(seed, dtype=np.float64)
            if seed_arr.shape != output.shape:
                raise TensorShapeError("backward", [output.shape, seed_arr.shape], "seed shape")

        grads: Dict[int, np.ndarray] = {id(output): seed_arr}
        tensors: Dict[int, Tensor] = {id(output): output}
        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g

        for key, tensor in tensors.items():
            tensor.grad = grads[key]
        self._grads = grads
        self._tensors = tensors
        return grads

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward output w.r.t. `tensor` (zeros if unreached)"""
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros(tensor.shape, dtype=np.float64)
        return g


def _emit(op: str, values: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires)
    if requires:
        tape = current_tape()
        if tape is not None:
            tape.record(Node(op, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product a @ b.

    `a` may carry leading batch axes (…×k); `b` is a 2-D k×n matrix.
    """
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise TensorShapeError("matmul", [a.shape, b.shape], "inner extents must match")
    lead = a.shape[:-1]
    a2 = a.values.reshape(-1, a.shape[-1])
    out = (a2 @ b.values).reshape(lead + (b.shape[1],))

    def backward(g: np.ndarray):
        g2 = g.reshape(-1, b.shape[1])
        da = (g2 @ b.values.T).reshape(a.shape) if a.requires_grad else None
        db = a2.T @ g2 if b.requires_grad else None
        return da, db

    return _emit("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ weight + bias with weight of shape (in, out)"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise TensorShapeError("linear", [x.shape, weight.shape], "input width must match weight rows")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise TensorShapeError("linear", [weight.shape, bias.shape], "bias must match weight columns")
    lead = x.shape[:-1]
    x2 = x.values.reshape(-1, x.shape[-1])
    out2 = x2 @ weight.values
    if bias is not None:
        out2 = out2 + bias.values
    out = out2.reshape(lead + (weight.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray):
        g2 = g.reshape(-1, weight.shape[1])
        dx = (g2 @ weight.values.T).reshape(x.shape) if x.requires_grad else None
        dw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return dx, dw
        db = g2.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return _emit("linear", out, inputs, backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.shape == (1,)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise TensorShapeError(op, [a.shape, b.shape], "only equal shapes or scalar operands broadcast")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=np.float64)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.values + b.values

    def backward(g: np.ndarray):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.values - b.values

    def backward(g: np.ndarray):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.values * b.values

    def backward(g: np.ndarray):
        da = _reduce_to(g * b.values, a.shape) if a.requires_grad else None
        db = _reduce_to(g * a.values, b.shape) if b.requires_grad else None
        return da, db

    return _emit("mul", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.values, (x,), lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant"""
    factor = float(factor)
    return _emit("scale", x.values * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0.0):
        raise TensorValueError("log", "input must be positive")
    xv = x.values
    return _emit("log", np.log(xv), (x,), lambda g: (g / xv,))


def softplus(x: Tensor) -> Tensor:
    xv = x.values
    y = np.log1p(np.exp(-np.abs(xv))) + np.maximum(xv, 0.0)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _emit("softplus", y, (x,), lambda g: (g * sig,))


def square(x: Tensor) -> Tensor:
    xv = x.values
    return _emit("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "square": square,
}


def elementwise(op: str, *args: Union[Tensor, float]) -> Tensor:
    """
    Dispatch an elementwise operation by name.

    `scale` takes (tensor, factor); every other op takes tensors only.
    """
    if op == "scale":
        x, factor = args
        return scale(x, float(factor))
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"Unknown elementwise op: {op}")
    return fn(*(_as_tensor(a) for a in args))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only where unclamped"""
    xv = x.values
    y = np.clip(xv, low, high)
    mask = (xv >= low) & (xv <= high)
    return _emit("clip", y, (x,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to `a`"""
    _check_broadcast("minimum", a, b)
    take_a = a.values <= b.values
    out = np.where(take_a, a.values, b.values)

    def backward(g: np.ndarray):
        da = _reduce_to(np.where(take_a, g, 0.0), a.shape) if a.requires_grad else None
        db = _reduce_to(np.where(take_a, 0.0, g), b.shape) if b.requires_grad else None
        return da, db

    return _emit("minimum", out, (a, b), backward)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = np.sum(x.values, axis=axis)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.full(x.shape, np.asarray(g).item(), dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise TensorValueError("mean", "cannot average an empty axis")
    return scale(sum(x, axis=axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise TensorValueError("concat", "no tensors given")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise TensorShapeError("concat", [s.shape for s in tensors], f"axis {axis}")
    out = np.concatenate([t.values for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g: np.ndarray):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))]

    return _emit("concat", out, tuple(tensors), backward)


def expand(x: Tensor, axis: int, count: int) -> Tensor:
    """Insert a new axis at `axis` and repeat `count` times along it"""
    if count < 1:
        raise TensorValueError("expand", "count must be >= 1")
    ax = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.values, ax), count, axis=ax)
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=ax),))


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along `axis`; repeated indices accumulate on backward"""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise TensorShapeError("take", [x.shape, idx.shape], f"index out of range on axis {axis}")
    out = np.take(x.values, idx, axis=ax)

    def backward(g: np.ndarray):
        dx = np.zeros(x.shape, dtype=np.float64)
        moved = np.moveaxis(dx, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (dx,)

    return _emit("take", out, (x,), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.values.reshape(shape)
    except ValueError as e:
        raise TensorShapeError("reshape", [x.shape, tuple(shape)], str(e)) from e
    return _emit("reshape", out.copy(), (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# Network building blocks
# ---------------------------------------------------------------------------

LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalize the last axis to zero mean and unit variance, then apply
    the affine gain and bias.

    Args:
        x: Input of shape (..., d)
        gain: Per-feature gain of shape (d,)
        bias: Per-feature bias of shape (d,)
        eps: Variance stabilizer added inside the square root

    Returns:
        Normalized tensor with the shape of x
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise TensorShapeError("layer_norm", [x.shape, gain.shape, bias.shape])
    if d < 2:
        logger.warning(f"layer_norm over width {d}: output collapses to the bias")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.values + bias.values

    def backward(g: np.ndarray):
        dxhat = g * gain.values
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _emit("layer_norm", out, (x, gain, bias), backward)


def softmax_with_temperature(x: Tensor, tau: Tensor, eps_floor: float) -> Tensor:
    """
    Softmax of x / (tau + eps_floor) along the last axis.

    Gradients flow to both x and the scalar temperature tau.
    """
    if eps_floor <= 0.0:
        raise TensorValueError("softmax_with_temperature", "eps_floor must be positive")
    if tau.size != 1:
        raise TensorShapeError("softmax_with_temperature", [x.shape, tau.shape], "tau must be a scalar")
    denom = float(tau.values.reshape(-1)[0]) + eps_floor
    if denom <= 0.0:
        raise TensorValueError("softmax_with_temperature", f"tau + eps = {denom} must be positive")
    xv = x.values
    z = xv / denom
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        dz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        dx = dz / denom
        dtau = np.full(tau.shape, -(dz * xv).sum() / (denom * denom), dtype=np.float64)
        return dx, dtau

    return _emit("softmax_with_temperature", s, (x, tau), backward)


def _pairwise_rows(rows: np.ndarray) -> np.ndarray:
    # Balanced tree over axis 0; an odd trailing row is carried up a level
    while rows.shape[0] > 1:
        n = rows.shape[0]
        paired = rows[0:n - 1:2] + rows[1:n:2]
        if n % 2:
            paired = np.concatenate([paired, rows[n - 1:n]], axis=0)
        rows = paired
    return rows[0]


def reduce_sum_over_set(x: Tensor, axis: int = -2) -> Tensor:
    """
    Sum over the set axis with a permutation-invariant summation order.

    Each column is sorted along the set axis before a balanced pairwise
    tree adds it up, so any reordering of set elements yields bit-identical
    output.

    Args:
        x: Tensor of shape (..., J, d)
        axis: Set axis

    Returns:
        Tensor with the set axis removed
    """
    if x.ndim < 1:
        raise TensorShapeError("reduce_sum_over_set", [x.shape], "needs a set axis")
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise TensorValueError("reduce_sum_over_set", "empty set")
    ordered = np.sort(np.moveaxis(x.values, ax, 0), axis=0)
    out = _pairwise_rows(ordered)

    def backward(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _emit("reduce_sum_over_set", out, (x,), backward)


def gaussian_logprob(mean: Tensor, std: Tensor, sample: Tensor) -> Tensor:
    """
    Log density of a diagonal Gaussian, summed over the last axis.

    Args:
        mean: Means (..., d)
        std: Standard deviations (..., d), strictly positive
        sample: Points to evaluate (..., d)

    Returns:
        Tensor of shape (...)
    """
    if not (mean.shape == std.shape == sample.shape):
        raise TensorShapeError("gaussian_logprob", [mean.shape, std.shape, sample.shape])
    sv = std.values
    if np.any(sv <= 0.0):
        raise TensorValueError("gaussian_logprob", "std must be positive")
    diff = sample.values - mean.values
    zsq = (diff / sv) ** 2
    out = (-0.5 * zsq - np.log(sv) - 0.5 * LOG_2PI).sum(axis=-1)

    def backward(g: np.ndarray):
        ge = np.expand_dims(g, -1)
        dmean = ge * diff / (sv * sv)
        dstd = ge * (zsq - 1.0) / sv
        return dmean, dstd, -dmean

    return _emit("gaussian_logprob", np.asarray(out, dtype=np.float64), (mean, std, sample), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor],
               inputs: Sequence[Tensor],
               h: float = 1e-5,
               max_coords_per_input: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               abs_floor: float = 1e-3) -> float:
    """
    Compare reverse-mode gradients with central finite differences.

    Args:
        f: Function of the input tensors returning a scalar tensor
        inputs: Tensors to differentiate against (requires_grad=True)
        h: Finite-difference step in [1e-7, 1e-3]
        max_coords_per_input: Check only this many random coordinates per
            input (all when None)
        rng: Generator for coordinate sampling
        abs_floor: Lower bound on the error denominator

    Returns:
        Maximum relative error |analytic - numeric| / max(|analytic|, |numeric|, abs_floor)
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"Finite-difference step {h} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)

    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise TensorShapeError("grad_check", [out.shape], "function must return a scalar")
    tape.backward(out)
    analytic = [tape.gradient(t) for t in inputs]

    def evaluate(idx: int, flat: int, delta: float) -> float:
        arr = inputs[idx].numpy().reshape(-1)
        arr[flat] += delta
        shifted = Tensor(arr.reshape(inputs[idx].shape), requires_grad=inputs[idx].requires_grad)
        args = list(inputs)
        args[idx] = shifted
        return f(*args).item()

    worst = 0.0
    for idx, tensor in enumerate(inputs):
        coords = np.arange(tensor.size)
        if max_coords_per_input is not None and tensor.size > max_coords_per_input:
            coords = rng.choice(tensor.size, size=max_coords_per_input, replace=False)
        flat_grad = analytic[idx].reshape(-1)
        for flat in coords:
            numeric = (evaluate(idx, int(flat), h) - evaluate(idx, int(flat), -h)) / (2.0 * h)
            a = float(flat_grad[flat])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
    return worst
