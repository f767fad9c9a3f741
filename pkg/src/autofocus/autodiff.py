"""Define-by-run reverse-mode differentiation.

Every op returns a :class:`Node` that remembers its parents and a closure
mapping the output gradient to parent gradients.  :func:`backward` walks the
graph in reverse topological order.  A node used by several consumers (the
shared autofocus kernel, for instance) receives the sum of their
contributions, added in ascending consumer-creation order so results do not
depend on traversal details.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor_core import ShapeError, center_crop_amounts, check_broadcast

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray, tuple], tuple]


class Node:
    __slots__ = ("id", "op", "value", "parents", "grad", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), backward: BackwardFn | None = None,
                 op: str = "const", requires_grad: bool | None = None):
        self.id = next(_ids)
        self.op = op
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.grad = None
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Node):
    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str, trainable: bool = True):
        super().__init__(value, op="param", requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _binary(a, b, op: str) -> tuple[Node, Node]:
    a, b = as_node(a), as_node(b)
    # Whichever operand is smaller must broadcast onto the other.
    if a.value.size >= b.value.size:
        check_broadcast(a.shape, b.shape)
    else:
        check_broadcast(b.shape, a.shape)
    return a, b


def add(a, b) -> Node:
    a, b = _binary(a, b, "add")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return Node(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Node:
    a, b = _binary(a, b, "sub")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return Node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Node:
    a, b = _binary(a, b, "mul")

    def backward(g, needs):
        return (_unbroadcast(g * b.value, a.shape) if needs[0] else None,
                _unbroadcast(g * a.value, b.shape) if needs[1] else None)

    return Node(a.value * b.value, (a, b), backward, "mul")


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0

    def backward(g, needs):
        return (g * mask,)

    return Node(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), backward, "relu")


def softmax(x, axis: int = 1) -> Node:
    """Softmax along ``axis`` with max subtraction."""
    x = as_node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Node(s, (x,), backward, "softmax")


def sum_all(x) -> Node:
    x = as_node(x)

    def backward(g, needs):
        return (np.broadcast_to(g, x.shape).astype(x.value.dtype),)

    return Node(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,), backward, "sum")


def mean_all(x) -> Node:
    x = as_node(x)
    n = x.value.size

    def backward(g, needs):
        return (np.full(x.shape, g / n, dtype=x.value.dtype),)

    return Node(np.asarray(x.value.mean(), dtype=x.value.dtype), (x,), backward, "mean")


def reshape(x, shape) -> Node:
    x = as_node(x)

    def backward(g, needs):
        return (g.reshape(x.shape),)

    return Node(x.value.reshape(shape), (x,), backward, "reshape")


def take_channel(x, k: int, axis: int = 1) -> Node:
    """Slice ``x[..., k:k+1, ...]`` along ``axis``, keeping the axis."""
    x = as_node(x)
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(k, k + 1)
    idx = tuple(idx)

    def backward(g, needs):
        out = np.zeros_like(x.value)
        out[idx] = g
        return (out,)

    return Node(x.value[idx], (x,), backward, "take")


def concat(xs: Sequence, axis: int = 1) -> Node:
    xs = [as_node(x) for x in xs]
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate([x.value for x in xs], axis=axis), xs, backward, "concat")


def pad_crop(x, amounts: Sequence[tuple[int, int]], mode: str = "pad") -> Node:
    """Differentiable zero-pad / crop on the trailing ``len(amounts)`` axes."""
    x = as_node(x)
    amounts = [(0, 0)] * (x.value.ndim - len(amounts)) + [tuple(p) for p in amounts]
    if any(lo < 0 or hi < 0 for lo, hi in amounts):
        raise ShapeError(f"negative pad/crop amount in {amounts}")
    if mode == "pad":
        inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(amounts, x.shape))
        value = np.pad(x.value, amounts)

        def backward(g, needs):
            return (g[inner],)
    elif mode == "crop":
        for (lo, hi), n in zip(amounts, x.shape):
            if lo + hi >= n:
                raise ShapeError(f"cannot crop {lo}+{hi} from extent {n}")
        inner = tuple(slice(lo, n - hi) for (lo, hi), n in zip(amounts, x.shape))
        value = x.value[inner]

        def backward(g, needs):
            out = np.zeros_like(x.value)
            out[inner] = g
            return (out,)
    else:
        raise ValueError(f"unknown pad_crop mode {mode!r}")
    return Node(value, (x,), backward, f"pad_crop:{mode}")


def center_crop(x, spatial: Sequence[int]) -> Node:
    x = as_node(x)
    amounts = center_crop_amounts(x.shape[-len(spatial):], spatial)
    if all(a == (0, 0) for a in amounts):
        return x
    return pad_crop(x, amounts, "crop")


# --------------------------------------------------------------------------
# backward pass


@dataclass
class Gradients:
    """Result of :func:`backward`: gradient per parameter name."""

    grads: dict[str, np.ndarray]
    unreachable: list[str] = field(default_factory=list)

    def __getitem__(self, name):
        return self.grads[name]


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node, params: Sequence[Parameter] | None = None) -> Gradients:
    """Accumulate d(loss)/d(node) into ``node.grad`` for every node needing it.

    Parameters listed in ``params`` that the loss does not reach get an
    all-zero gradient and are named in ``Gradients.unreachable``.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    order = _toposort(loss)
    pending: dict[int, list[tuple[int, np.ndarray]]] = {loss.id: [(-1, np.ones_like(loss.value))]}
    for node in reversed(order):
        contribs = pending.pop(node.id, None)
        if contribs is None:
            continue
        contribs.sort(key=lambda c: c[0])
        g = contribs[0][1]
        for _, extra in contribs[1:]:
            g = g + extra
        node.grad = g
        if node._backward is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        for parent, pg in zip(node.parents, node._backward(g, needs)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} != value shape {parent.shape} "
                    f"flowing from {node.op} into {parent.op}"
                )
            pending.setdefault(parent.id, []).append((node.id, pg))

    reached = {n.id for n in order}
    result = Gradients({})
    for p in params or [n for n in order if isinstance(n, Parameter)]:
        if not p.trainable:
            continue
        if p.id in reached and p.grad is not None:
            result.grads[p.name] = p.grad
        else:
            p.grad = np.zeros_like(p.value)
            result.grads[p.name] = p.grad
            result.unreachable.append(p.name)
    return result


def zero_grads(params: Sequence[Node]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    name: str
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        detail = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"{status} {self.name}: max rel err {self.max_error:.2e} ({detail})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(1e-8, max|a| + max|n|)."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = np.max(np.abs(analytic), initial=0.0) + np.max(np.abs(numeric), initial=0.0)
    return float(diff / max(1e-8, scale))


def grad_check(fn: Callable[..., Node], inputs: Mapping[str, np.ndarray], *,
               tolerance: float = 1e-4, step: float = 1e-5, seed: int = 0,
               name: str = "op", max_elements: int | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn`` receives one keyword argument per entry of ``inputs`` (as
    :class:`Parameter` nodes) and returns a node.  Non-scalar outputs are
    contracted with a fixed random projection first.  With ``max_elements``
    only that many randomly chosen entries per input are differenced.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    probe = fn(**{k: Node(v) for k, v in inputs.items()}).value
    projection = rng.standard_normal(probe.shape) if probe.ndim else None

    def scalar(out: Node) -> Node:
        return out if projection is None else sum_all(mul(out, projection))

    params = {k: Parameter(v.copy(), k) for k, v in inputs.items()}
    result = backward(scalar(fn(**params)), list(params.values()))

    def evaluate(vals) -> float:
        return float(scalar(fn(**{k: Node(v) for k, v in vals.items()})).value)

    errors = {}
    for key, base in inputs.items():
        flat_idx = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            flat_idx = rng.choice(base.size, max_elements, replace=False)
        numeric = np.empty(len(flat_idx))
        for j, i in enumerate(flat_idx):
            vals = dict(inputs)
            plus, minus = base.copy(), base.copy()
            plus.flat[i] += step
            minus.flat[i] -= step
            vals[key] = plus
            f_plus = evaluate(vals)
            vals[key] = minus
            numeric[j] = (f_plus - evaluate(vals)) / (2 * step)
        analytic = result.grads[key].ravel()[flat_idx]
        errors[key] = relative_error(analytic, numeric)
    return GradCheckReport(name, errors, tolerance)
