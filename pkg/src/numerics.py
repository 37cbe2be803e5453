"""
Dense Tensor Arithmetic

Float64 tensors with reverse-mode gradient accumulation, the loss primitives
used by every network component, finite-difference gradient checking and the
Adam optimizer.

Every op returns a new Tensor that remembers its parents and a closure mapping
the output gradient to one gradient per parent. `backward` walks that graph
once in reverse topological order and then discards it.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, DomainError


PROB_FLOOR = 1e-12
NORMALIZATION_TOLERANCE = 1e-6
GRADCHECK_FLOOR = 1e-3

_grad_mode = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad():
    """Run forward ops without recording a graph (inference)"""
    previous = _grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    __slots__ = ('data', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence['Tensor'], backward_fn) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

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
        if self.data.size != 1:
            raise DimensionError(f'item: tensor of shape {list(self.shape)} is not a scalar')
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f' {self.name}' if self.name else ''
        return f'Tensor{label}(shape={list(self.shape)})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'{op}: cannot broadcast shapes {list(a.shape)} and {list(b.shape)}')


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor._result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)
    return Tensor._result(a.data * factor, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)
    return Tensor._result(y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return (g * y * (1.0 - y),)
    return Tensor._result(y, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f'matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}')

    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return Tensor._result(a.data @ b.data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError('concat: no tensors given')
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ', '.join(str(list(t.shape)) for t in tensors)
        raise DimensionError(f'concat: incompatible shapes {shapes} along axis {axis}')
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor._result(data, tensors, backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f'reshape: cannot reshape {list(a.shape)} into {list(shape)}')

    def backward(g):
        return (g.reshape(a.shape),)
    return Tensor._result(data, (a,), backward)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)
    return Tensor._result(np.ascontiguousarray(np.swapaxes(a.data, axis1, axis2)), (a,), backward)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing"""
    data = np.array(a.data[key], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)
    return Tensor._result(data, (a,), backward)


def total(a: Tensor, axis: Optional[int] = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return Tensor._result(np.asarray(data, dtype=np.float64), (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(total(a, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# Probability and loss primitives
# ---------------------------------------------------------------------------

def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis"""
    v = as_tensor(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise DomainError('softmax: empty input')
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._result(y, (v,), backward)


def cross_entropy(predicted: Tensor, target) -> Tensor:
    """
    −log p[target] with probabilities floored at PROB_FLOOR.

    `predicted` is one probability vector with an integer target, or a batch
    matrix (one row per sample) with an integer target array; the batch form
    returns the mean over rows.
    """
    predicted = as_tensor(predicted)
    probs = predicted.data
    batched = probs.ndim == 2
    rows = probs if batched else probs.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(target)).astype(np.int64)
    n_classes = rows.shape[1]

    if rows.shape[0] != targets.shape[0]:
        raise DimensionError(f'cross_entropy: {rows.shape[0]} rows but {targets.shape[0]} targets')
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise DomainError(f'cross_entropy: target outside [0, {n_classes})')
    if np.any(rows < -NORMALIZATION_TOLERANCE) or \
            np.any(np.abs(rows.sum(axis=1) - 1.0) > NORMALIZATION_TOLERANCE):
        raise DomainError('cross_entropy: input is not a probability vector')

    picked = rows[np.arange(rows.shape[0]), targets]
    clamped = np.maximum(picked, PROB_FLOOR)
    value = -np.log(clamped).mean()

    def backward(g):
        grad = np.zeros_like(rows)
        live = picked > PROB_FLOOR
        grad[np.arange(rows.shape[0])[live], targets[live]] = -1.0 / picked[live]
        grad *= float(g) / rows.shape[0]
        return (grad if batched else grad.reshape(probs.shape),)
    return Tensor._result(np.asarray(value, dtype=np.float64), (predicted,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f'mse: shape mismatch {list(a.shape)} vs {list(b.shape)}')
    diff = a.data - b.data
    count = diff.size

    def backward(g):
        grad = (2.0 * float(g) / count) * diff
        return grad, -grad
    return Tensor._result(np.asarray((diff * diff).mean(), dtype=np.float64), (a, b), backward)


# ---------------------------------------------------------------------------
# Parameters and gradients
# ---------------------------------------------------------------------------

class ParamGroup:
    """A named, jointly frozen/unfrozen collection of parameter tensors"""

    def __init__(self, name: str, tensors: Dict[str, TensorLike], trainable: bool = True):
        self.name = name
        self.tensors: Dict[str, Tensor] = {}
        for key, value in tensors.items():
            tensor = Tensor(value.data if isinstance(value, Tensor) else value, name=f'{name}/{key}')
            self.tensors[key] = tensor
        self.trainable = trainable
        self._sync()

    def _sync(self):
        for tensor in self.tensors.values():
            tensor.requires_grad = self.trainable

    def freeze(self):
        self.trainable = False
        self._sync()

    def unfreeze(self):
        self.trainable = True
        self._sync()

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def __iter__(self):
        return iter(self.tensors.items())

    def snapshot(self) -> Dict[str, bytes]:
        return {key: tensor.data.tobytes() for key, tensor in self.tensors.items()}

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class GradientRecord:
    group: str
    grads: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.grads

    def check_aligned(self, params: ParamGroup):
        if self.group != params.name:
            raise DimensionError(f'gradient record for {self.group} applied to group {params.name}')
        for key, grad in self.grads.items():
            if key not in params.tensors:
                raise DimensionError(f'gradient for unknown parameter {self.group}/{key}')
            if grad.shape != params[key].shape:
                raise DimensionError(
                    f'gradient shape {list(grad.shape)} does not match parameter '
                    f'{self.group}/{key} shape {list(params[key].shape)}')


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, groups: Iterable[ParamGroup]) -> Dict[str, GradientRecord]:
    """
    Gradients of a scalar loss for every trainable group it reaches.

    Frozen groups get no record. A loss that reaches no trainable parameter
    returns an empty mapping. The recorded graph is released afterwards.
    """
    if loss.size != 1:
        raise DimensionError(f'backward: loss must be scalar, got shape {list(loss.shape)}')
    groups = list(groups)
    if not loss.requires_grad:
        return {}

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad

    for node in order:
        node._parents = ()
        node._backward = None

    records: Dict[str, GradientRecord] = {}
    for group in groups:
        if not group.trainable:
            continue
        reached = {key: tensor for key, tensor in group if id(tensor) in grads}
        if not reached:
            continue
        record = GradientRecord(group.name)
        for key, tensor in group:
            g = grads.get(id(tensor))
            record.grads[key] = Tensor(np.zeros_like(tensor.data) if g is None else g.reshape(tensor.shape))
        records[group.name] = record
    return records


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


Moments = Dict[str, Tuple[np.ndarray, np.ndarray]]


def adam_step(params: ParamGroup, grads: GradientRecord, hyper: AdamHyper, t: int,
              moments: Moments) -> ParamGroup:
    """
    One bias-corrected Adam update, in place. `moments` is the caller-owned
    first/second moment state for this group; frozen groups are left untouched.
    """
    if t < 1:
        raise DomainError(f'adam_step: step index must be >= 1, got {t}')
    if not params.trainable:
        return params
    grads.check_aligned(params)

    correction1 = 1.0 - hyper.beta1 ** t
    correction2 = 1.0 - hyper.beta2 ** t
    for key, grad in grads.grads.items():
        param = params[key]
        m, v = moments.get(key, (np.zeros_like(param.data), np.zeros_like(param.data)))
        g = grad.data
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        moments[key] = (m, v)
        param.data -= hyper.rate * (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
    return params


class Adam:
    """Owns moment state and step counters for any number of groups"""

    def __init__(self, hyper: AdamHyper = None):
        self.hyper = hyper or AdamHyper()
        self.moments: Dict[str, Moments] = {}
        self.steps: Dict[str, int] = {}

    def step(self, params: ParamGroup, grads: GradientRecord):
        if not params.trainable or grads.is_empty:
            return
        t = self.steps.get(params.name, 0) + 1
        self.steps[params.name] = t
        adam_step(params, grads, self.hyper, t, self.moments.setdefault(params.name, {}))

    def apply(self, groups: Iterable[ParamGroup], records: Dict[str, GradientRecord]):
        for group in groups:
            record = records.get(group.name)
            if record is not None:
                self.step(group, record)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def grad_check(fragment: Callable[[], Tensor], groups: Sequence[ParamGroup],
               tolerance: float = 1e-4, step: float = 1e-5, max_extent: int = 8) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences.

    `fragment` rebuilds the scalar loss from the current parameter values and
    must be deterministic (fixed dropout seeds). The error per element is
    |analytic − numeric| / max(|analytic|, |numeric|, GRADCHECK_FLOOR).
    """
    for group in groups:
        for key, tensor in group:
            if any(extent > max_extent for extent in tensor.shape):
                raise DomainError(
                    f'grad_check: {group.name}/{key} shape {list(tensor.shape)} exceeds desk-scale extent {max_extent}')

    report = GradCheckReport(tolerance=tolerance)
    analytic = backward(fragment(), groups)

    for group in groups:
        if not group.trainable:
            continue
        record = analytic.get(group.name)
        for key, tensor in group:
            label = f'{group.name}/{key}'
            exact = record.grads[key].data if record else np.zeros_like(tensor.data)
            numeric = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            numeric_flat = numeric.reshape(-1)
            with no_grad():
                for i in range(flat.size):
                    original = flat[i]
                    flat[i] = original + step
                    upper = fragment().item()
                    flat[i] = original - step
                    lower = fragment().item()
                    flat[i] = original
                    numeric_flat[i] = (upper - lower) / (2.0 * step)

            if not np.all(np.isfinite(exact)):
                report.failures[label] = 'non-finite analytic gradient'
                report.errors[label] = float('inf')
                continue
            if not np.all(np.isfinite(numeric)):
                report.failures[label] = 'non-finite numeric gradient'
                report.errors[label] = float('inf')
                continue
            denominator = np.maximum(np.maximum(np.abs(exact), np.abs(numeric)), GRADCHECK_FLOOR)
            error = float(np.max(np.abs(exact - numeric) / denominator)) if exact.size else 0.0
            report.errors[label] = error
            if error >= tolerance:
                report.failures[label] = f'max relative error {error:.3e} >= {tolerance:.1e}'
    return report


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
