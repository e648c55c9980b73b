"""Dense float64 tensor engine with reverse-mode automatic differentiation.

Everything downstream (tokenization, transformer blocks, losses, the training
loop) is expressed in the operation vocabulary defined here. Tensors wrap
row-major numpy arrays; operations record graph edges only when some input
requires a gradient, and ``backward`` walks the graph once in reverse
topological order, accumulating (never overwriting) gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "ContractError",
    "OracleError",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "matmul",
    "transpose",
    "reshape",
    "slice_",
    "concat",
    "mean",
    "tsum",
    "square",
    "sqrt",
    "exp",
    "log",
    "gelu",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "op_forward",
    "OP_KINDS",
    "grad_check",
]

LAYER_NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Input shapes are invalid for the requested operation."""


class DomainError(ValueError):
    """Operation applied outside its mathematical domain (log/sqrt of negatives)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class OracleError(RuntimeError):
    """The finite-difference oracle detected a non-deterministic function."""


class Tensor:
    """Node in the computation graph.

    Attributes:
        data: float64 numpy array (row-major). Treated as immutable after
            creation except by the optimizer / EMA updates, which mutate
            leaf parameters in place between graph constructions.
        grad: accumulated gradient buffer, same shape as ``data``, or None.
        requires_grad: True for trainable leaves and anything derived from one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}"
        if self.op:
            head += f", op={self.op}"
        return head + ")"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scalar_mul(self, 1.0 / float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- backpropagation -----------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires-grad ancestor of this scalar.

        Visits each graph node exactly once (iterative topological order, so
        deep graphs do not hit the recursion limit). Each pass works on its
        own gradient buffers and then adds them into the persistent ``grad``
        fields, so repeated calls without clearing grads accumulate.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        store = {}
        _PASS_STACK.append(store)
        try:
            store[id(self)] = np.ones_like(self.data)
            for node in reversed(topo):
                if node._backward is not None:
                    g = store.get(id(node))
                    if g is not None:
                        node._backward(g)
        finally:
            _PASS_STACK.pop()
        for node in topo:
            g = store.get(id(node))
            if g is not None and node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g


def _as_tensor_like(value, ref):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), ref.shape).copy())


# Stack of pass-local gradient maps (one per in-flight backward call).
_PASS_STACK = []


def _accumulate(t, g):
    """Add ``g`` into the current backward pass's buffer for ``t``."""
    if not t.requires_grad and t._backward is None:
        return
    store = _PASS_STACK[-1]
    buf = store.get(id(t))
    if buf is None:
        store[id(t)] = np.array(g, dtype=np.float64)
    else:
        buf += g


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise binary ops ----------------------------------------------------


def add(a, b):
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    _check_broadcast(a, b, "div")

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward, "div")


def scalar_mul(a, c):
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward, "scalar-mul")


# -- linear algebra / structure ------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible, {a.shape} @ {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward, "matmul")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for ndim {a.ndim}")
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(data, (a,), backward, "reshape")


def slice_(a, key):
    """Basic slicing and integer-array gathers; backward scatters with add.at."""
    data = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _accumulate(a, buf)

    return _make(data, (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    axis = int(axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    return _make(data, tuple(tensors), backward, "concat")


# -- reductions ------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g / count, a.shape).copy())

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


# -- elementwise unary ops --------------------------------------------------------


def square(a):
    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward, "square")


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g / (2.0 * data))

    return _make(data, (a,), backward, "sqrt")


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _make(data, (a,), backward, "exp")


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return _make(a.data * cdf, (a,), backward, "gelu")


def softmax(a):
    """Numerically stable softmax over the last axis (max subtraction)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _make(data, (a,), backward, "softmax-over-last-axis")


def layer_norm(a):
    """Zero-mean unit-variance normalization over the last axis (eps 1e-6)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    y = (a.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - y * gym))

    return _make(y, (a,), backward, "layer-norm-over-last-axis")


def l2_normalize(a):
    """Scale rows (last axis) to unit Euclidean length; zero rows stay zero."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = a.data / safe

    def backward(g):
        inner = (g * a.data).sum(axis=-1, keepdims=True)
        gx = g / safe - a.data * inner / (safe**3)
        _accumulate(a, np.where(norm > 0, gx, 0.0))

    return _make(y, (a,), backward, "l2-norm")


# -- generic dispatcher ------------------------------------------------------------

_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul}
_UNARY = {
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "gelu": gelu,
    "softmax-over-last-axis": softmax,
    "layer-norm-over-last-axis": layer_norm,
    "l2-norm": l2_normalize,
}

OP_KINDS = (
    "add",
    "sub",
    "mul",
    "div",
    "scalar-mul",
    "matmul",
    "transpose",
    "reshape",
    "slice",
    "concat",
    "mean",
    "sum",
    "square",
    "sqrt",
    "exp",
    "log",
    "gelu",
    "softmax-over-last-axis",
    "layer-norm-over-last-axis",
    "l2-norm",
)


def op_forward(kind, inputs, attrs=None):
    """Dispatch an operation by kind name.

    Args:
        kind: one of ``OP_KINDS``.
        inputs: list of input Tensors.
        attrs: attribute record; recognized keys depend on kind
            (``scalar``, ``axes``, ``shape``, ``key``, ``axis``, ``keepdims``).
    """
    attrs = attrs or {}
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{kind}: expected 2 inputs, got {len(inputs)}")
        return _BINARY[kind](inputs[0], inputs[1])
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ContractError(f"{kind}: expected 1 input, got {len(inputs)}")
        return _UNARY[kind](inputs[0])
    if kind == "scalar-mul":
        return scalar_mul(inputs[0], attrs["scalar"])
    if kind == "transpose":
        return transpose(inputs[0], attrs.get("axes"))
    if kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if kind == "slice":
        return slice_(inputs[0], attrs["key"])
    if kind == "concat":
        return concat(inputs, attrs.get("axis", 0))
    if kind == "mean":
        return mean(inputs[0], attrs.get("axis"), attrs.get("keepdims", False))
    if kind == "sum":
        return tsum(inputs[0], attrs.get("axis"), attrs.get("keepdims", False))
    raise ContractError(f"unknown operation kind {kind!r}")


# -- finite-difference oracle ---------------------------------------------------------


def grad_check(f, inputs, eps=1e-5):
    """Compare analytic gradients of ``f`` against central finite differences.

    Args:
        f: function of ``len(inputs)`` Tensors returning a scalar Tensor.
        inputs: Tensors whose entries are perturbed; marked requires_grad here.
        eps: central-difference step, > 0.

    Returns:
        max over all input entries of
        ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    inputs = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
    for t in inputs:
        t.requires_grad = True

    def evaluate():
        out = f(*inputs)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("grad_check: f must return a scalar Tensor")
        return out

    first = evaluate().item()
    second = evaluate().item()
    if first != second:
        raise OracleError("grad_check: f is non-deterministic across repeated evaluations")

    for t in inputs:
        t.grad = None
    evaluate().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            plus = evaluate().item()
            flat[i] = saved - eps
            minus = evaluate().item()
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
