"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Node` is one entry on the tape: a cached forward value, the
:class:`Function` that produced it and that function's inputs. :func:`backward`
walks the graph from a scalar root in reverse topological order, visiting each
node once, and returns gradients for the requested leaves.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from . import tensor as T
from .errors import ConfigurationError, NonFiniteError, NonScalarRootError, ShapeMismatchError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Function:
    """A differentiable primitive.

    ``forward`` receives the input values and returns the output value;
    ``backward`` receives dRoot/dOutput and returns dRoot/dInput for every input.
    """

    def __init__(self, *inputs: "Node"):
        self.inputs = inputs

    def forward(self, *args: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Node", **kwargs) -> "Node":
        fn = cls(*inputs)
        for k, v in kwargs.items():
            setattr(fn, k, v)
        value = fn.forward(*(node.value for node in inputs))
        requires_grad = any(node.requires_grad for node in inputs)
        if not requires_grad:
            return Node(value)
        return Node(value, op=fn, parents=inputs, requires_grad=True)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out the axes numpy broadcasting added so ``grad`` matches ``shape``."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Node:
    """A value on the tape; leaves have no ``op``."""

    __array_priority__ = 1000

    def __init__(
        self,
        value: ArrayLike,
        op: Optional[Function] = None,
        parents: Tuple["Node", ...] = (),
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def leaf(cls, value: ArrayLike, name: Optional[str] = None) -> "Node":
        return cls(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} shape={self.shape} grad={self.requires_grad}>"

    def __add__(self, other): return Add.apply(self, as_node(other))
    def __radd__(self, other): return Add.apply(as_node(other), self)
    def __sub__(self, other): return Sub.apply(self, as_node(other))
    def __rsub__(self, other): return Sub.apply(as_node(other), self)
    def __mul__(self, other): return Mul.apply(self, as_node(other))
    def __rmul__(self, other): return Mul.apply(as_node(other), self)
    def __truediv__(self, other): return Div.apply(self, as_node(other))
    def __rtruediv__(self, other): return Div.apply(as_node(other), self)
    def __neg__(self): return Neg.apply(self)
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))

    def sum(self, axis=None, keepdims: bool = False) -> "Node":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Node":
        count = self.value.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape: int) -> "Node":
        return Reshape.apply(self, new_shape=shape)

    def relu(self) -> "Node":
        return ReLU.apply(self)

    def exp(self) -> "Node":
        return Exp.apply(self)

    def log(self) -> "Node":
        return Log.apply(self)

    def batch_head(self, count: int) -> "Node":
        return BatchHead.apply(self, count=int(count))

    def detach(self) -> "Node":
        return Node(self.value.copy())


def as_node(value: Union[Node, ArrayLike]) -> Node:
    """Wrap a raw value as a constant; nodes pass through."""
    if isinstance(value, Node):
        return value
    return Node(value)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            self.unbroadcast(grad * b.value, a.shape),
            self.unbroadcast(grad * a.value, b.shape),
        )


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        return (
            self.unbroadcast(grad / b.value, a.shape),
            self.unbroadcast(-grad * a.value / (b.value * b.value), b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    exponent: float = 1.0

    def forward(self, a):
        return a**self.exponent

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * self.exponent * a.value ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad / a.value,)


class Sum(Function):
    axis = None
    keepdims: bool = False

    def forward(self, a):
        if self.axis is None:
            return np.asarray(a.sum(keepdims=self.keepdims))
        axes = tuple(np.atleast_1d(self.axis).tolist())
        out = T.reduce_sum(a, axes)
        if self.keepdims:
            kept = {ax % a.ndim for ax in axes}
            out = out.reshape([1 if i in kept else n for i, n in enumerate(a.shape)])
        return out

    def backward(self, grad):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            axes = sorted(ax % a.value.ndim for ax in np.atleast_1d(self.axis).tolist())
            for ax in axes:
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Reshape(Function):
    new_shape: Tuple[int, ...] = ()

    def forward(self, a):
        return a.reshape(self.new_shape)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad.reshape(a.shape),)


class ReLU(Function):
    """Rectifier with subgradient 0 at exactly 0."""

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class BatchHead(Function):
    """The first ``count`` instances along the batch axis."""

    count: int = 1

    def forward(self, a):
        return a[: self.count].copy()

    def backward(self, grad):
        (a,) = self.inputs
        full = np.zeros(a.shape)
        full[: self.count] = grad
        return (full,)


class MatMul(Function):
    def forward(self, a, b):
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.value.T, a.value.T @ grad


class Conv2d(Function):
    spec: T.ConvSpec = T.ConvSpec()

    def forward(self, x, w):
        return T.conv2d_forward(x, w, self.spec)

    def backward(self, grad):
        x, w = self.inputs
        return T.conv2d_backward(grad, x.value, w.value, self.spec)


def conv2d(x: Union[Node, ArrayLike], w: Union[Node, ArrayLike], spec: T.ConvSpec = T.ConvSpec()) -> Node:
    return Conv2d.apply(as_node(x), as_node(w), spec=spec)


def matmul(a: Union[Node, ArrayLike], b: Union[Node, ArrayLike]) -> Node:
    return MatMul.apply(as_node(a), as_node(b))


def topological_order(root: Node) -> List[Node]:
    """Nodes reachable from ``root`` that require gradients, inputs before outputs."""
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node, leaves: Optional[Iterable[Node]] = None) -> Dict[Node, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to ``leaves``.

    When ``leaves`` is omitted every reachable leaf is returned. Leaves that cannot
    reach the root get zeros. Gradients are recomputed from scratch on each call and
    written to ``leaf.grad``, so calling twice yields identical results.
    """
    if root.value.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    order = topological_order(root)
    for node in reversed(order):
        if node.is_leaf:
            continue
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        for parent, parent_grad in zip(node.parents, node.op.backward(grad)):
            if not parent.requires_grad or parent_grad is None:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeMismatchError(
                    f"gradient from {type(node.op).__name__}", parent.shape, parent_grad.shape
                )
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = np.array(parent_grad, dtype=np.float64)

    if leaves is None:
        leaves = [node for node in order if node.is_leaf]
    result: Dict[Node, np.ndarray] = {}
    for leaf in leaves:
        grad = grads.get(id(leaf))
        leaf.grad = grad if grad is not None else np.zeros_like(leaf.value)
        result[leaf] = leaf.grad
    return result


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    passed: bool
    step: float
    tolerance: float
    excluded: Dict[str, List[Tuple[int, ...]]] = field(default_factory=dict)
    unresolved: Dict[str, int] = field(default_factory=dict)
    worst: Optional[Tuple[str, Tuple[int, ...], float, float, float]] = None

    @property
    def overall_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


# Central differences resolve a gradient only to about this many ulps of f, divided by h.
FD_NOISE_ULPS = 64


def relative_error(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)


def grad_check(
    f: Callable[[Dict[str, Node]], Node],
    params: Dict[str, ArrayLike],
    h: float = 1e-6,
    tolerance: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    kink_tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare :func:`backward` against central finite differences.

    ``f`` maps named parameter nodes to a scalar node. At most ``max_coords``
    coordinates per parameter are probed, chosen by a seeded permutation. A
    coordinate whose forward and backward one-sided slopes disagree sits on a
    kink (ReLU at 0, a weight changing sign under the balance shift) and is
    reported in ``excluded`` instead of being scored. Coordinates whose gradient
    is too small for the difference quotient to resolve at ``tolerance`` are
    compared by absolute error against that resolution and counted in
    ``unresolved``.
    """
    if h <= 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    def evaluate(values: Dict[str, np.ndarray]) -> float:
        out = f({name: Node(v) for name, v in values.items()})
        value = float(out.value)
        if not np.isfinite(value):
            raise NonFiniteError(f"checked function returned {value}")
        return value

    leaves = {name: Node.leaf(v, name=name) for name, v in base.items()}
    root = f(leaves)
    if not np.isfinite(root.value).all():
        raise NonFiniteError(f"checked function returned {root.value}")
    analytic = backward(root, leaves.values())
    f0 = float(root.value)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error={}, passed=True, step=h, tolerance=tolerance)
    for name, value in base.items():
        flat_count = value.size
        picks = np.arange(flat_count)
        if flat_count > max_coords:
            picks = np.sort(rng.permutation(flat_count)[:max_coords])
        worst = 0.0
        excluded = []
        unresolved = 0
        for flat in picks:
            index = np.unravel_index(int(flat), value.shape)
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][index] += h
            minus[name][index] -= h
            f_plus, f_minus = evaluate(plus), evaluate(minus)
            slope_right = (f_plus - f0) / h
            slope_left = (f0 - f_minus) / h
            jump = abs(slope_right - slope_left)
            if jump > max(kink_tolerance * max(abs(slope_right), abs(slope_left)), 1e3 * h):
                excluded.append(tuple(int(i) for i in index))
                continue
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g_ad = float(analytic[leaves[name]][index])
            err = relative_error(g_ad, g_fd)
            resolution = FD_NOISE_ULPS * np.finfo(np.float64).eps * max(abs(f_plus), abs(f0), abs(f_minus)) / h
            if max(abs(g_ad), abs(g_fd)) * tolerance < resolution:
                unresolved += 1
                if abs(g_ad - g_fd) <= resolution:
                    continue
            if err > worst:
                worst = err
            if report.worst is None or err > report.worst[4]:
                report.worst = (name, tuple(int(i) for i in index), g_ad, g_fd, err)
        report.max_rel_error[name] = worst
        if excluded:
            report.excluded[name] = excluded
            logger.debug(f"grad_check: {len(excluded)} kink coordinates excluded in {name}")
        if unresolved:
            report.unresolved[name] = unresolved
    report.passed = report.overall_error <= tolerance
    return report
