"""Dense float64 tensor math with reverse-mode differentiation, MLPs and Adam.

Everything in this package that needs a derivative goes through the small
tape-free autodiff engine here: each operation eagerly computes its value
and remembers how to push a gradient back to its parents.  Calling
``backward`` on a scalar output walks the recorded graph once, in reverse
topological order.

All data is float64.  The log-mean-exp arithmetic used by the MI bound is
sensitive enough that float32 drift would visibly pollute trend curves.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    Leaves created with ``requires_grad=True`` receive a ``.grad`` array
    after ``backward``.  Interior nodes are produced by the ops below and
    keep references to their parents plus a closure that distributes the
    incoming gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def item(self) -> float:
        return float(self.data.reshape(()))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    """Leaf tensor that accumulates a gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def const(data) -> Tensor:
    """Leaf tensor treated as a constant."""
    return Tensor(data)


def _node(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# -- primitive ops ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out_data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def backward(g):
        return (g.T,)

    return _node(a.data.T, (a,), backward)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    # stable in both tails
    s = np.where(a.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        return (g * s * (1.0 - s),)

    return _node(s, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|; derivative is sigmoid(x)."""
    a = _lift(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        s = np.where(a.data >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        return (g * s,)

    return _node(out_data, (a,), backward)


def square(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        return (g * 2.0 * a.data,)

    return _node(a.data * a.data, (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _node(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old_shape = a.data.shape

    def backward(g):
        return (g.reshape(old_shape),)

    return _node(a.data.reshape(shape), (a,), backward)


def ravel(a) -> Tensor:
    return reshape(a, (-1,))


def concat(tensors, axis=0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _node(out_data, tensors, backward)


# -- graph traversal ----------------------------------------------------

class Graph:
    """Recorded computation graph for one output: nodes in topological order."""

    __slots__ = ("output", "nodes")

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _toposort(output)


def _toposort(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(output: Tensor) -> Graph:
    """Fill ``.grad`` on every grad-requiring leaf reachable from `output`.

    `output` must be a scalar (size-1) node.  Returns the traversed Graph;
    each node is visited exactly once, in reverse topological order.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.data.shape}")
    if not output.requires_grad:
        raise ContractError("output does not depend on any grad-requiring leaf")
    graph = Graph(output)
    grads: dict[int, Array] = {id(output): np.ones_like(output.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


def gradients(output: Tensor, leaves: list[Tensor]) -> list[Array]:
    """Backward pass returning the gradient for each leaf (zeros if unused)."""
    for leaf in leaves:
        leaf.grad = None
    backward(output)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves]


# -- multilayer perceptron ---------------------------------------------

_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": None}


class Mlp:
    """Fully connected net; weights[l] has shape (dims[l], dims[l+1]).

    Weights start uniform in +-sqrt(6/(fan_in+fan_out)), biases at zero.
    """

    def __init__(self, layer_dims, rng: np.random.Generator,
                 hidden_activation="relu", output_activation="identity"):
        if len(layer_dims) < 2:
            raise ContractError("an Mlp needs at least input and output dims")
        for name in (hidden_activation, output_activation):
            if name not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {name!r}")
        self.layer_dims = list(layer_dims)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(param(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            self.biases.append(param(np.zeros(fan_out)))

    def forward(self, x) -> Tensor:
        """Apply the net to `x` of shape (batch, layer_dims[0])."""
        h = _lift(x)
        if h.data.ndim == 1:
            h = reshape(h, (1, -1))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if h.data.shape[1] != w.data.shape[0]:
                raise ShapeError(
                    f"layer {i} expects input dim {w.data.shape[0]}, got {h.data.shape[1]}")
            h = add(matmul(h, w), b)
            act = self.hidden_activation if i < last else self.output_activation
            fn = _ACTIVATIONS[act]
            if fn is not None:
                h = fn(h)
        return h

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def param_count(self) -> int:
        return sum(int(p.data.size) for p in self.parameters())


# -- Adam ----------------------------------------------------------------

class AdamState:
    """Adam moment accumulators for a fixed list of parameter shapes."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    @classmethod
    def for_params(cls, params, lr, **kw) -> "AdamState":
        return cls([np.asarray(p.data if isinstance(p, Tensor) else p).shape
                    for p in params], lr, **kw)


def adam_step(state: AdamState, params, grads, maximize=False):
    """One Adam update with bias correction; returns the new parameter arrays.

    Descent by default; `maximize=True` ascends (gradient sign flipped before
    entering the moments).  NaN/inf gradients abort the update untouched.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError("params/grads do not match the AdamState layout")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; Adam update aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if maximize:
            g = -g
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out
