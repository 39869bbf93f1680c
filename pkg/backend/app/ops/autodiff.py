"""
Reverse-mode automatic differentiation over dense numpy arrays.

A ``DTensor`` wraps an ndarray and, when gradients are enabled and any input
requires them, remembers its parents together with a rule that maps the output
gradient onto one gradient per parent. ``backward`` orders the graph below a
scalar root into a ``Tape`` and replays the rules in reverse.

Elementwise broadcasting is limited to scalar-or-same-shape operands; anything
else has to go through the explicit ``reshape`` / ``broadcast_to`` ops.
"""

from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.logger import get_logger_with_env_level

logger = get_logger_with_env_level(__name__)

_DTYPE = np.float32
_GRAD_ENABLED = True

Operand = Union["DTensor", np.ndarray, float, int]


def default_dtype():
    return _DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with (f64 for gradient checks)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextmanager
def no_grad():
    """Run forward passes without recording the graph (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class DTensor:
    """Dense array taking part in reverse-mode differentiation."""

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["DTensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"DTensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(value: Operand) -> DTensor:
    if isinstance(value, DTensor):
        return value
    return DTensor(value)


def _make(values, parents: Sequence[DTensor], backward: Callable, op: str) -> DTensor:
    out = DTensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # scalar operands collect the summed gradient
    if shape == grad.shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


def _check_shapes(a: DTensor, b: DTensor, op: str):
    if a.shape == b.shape:
        return
    for scalar, other in ((a, b), (b, a)):
        if scalar.size == 1 and scalar.ndim <= other.ndim:
            return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _binary(a: Operand, b: Operand, op: str):
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes(a, b, op)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> DTensor:
    a, b = _binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> DTensor:
    a, b = _binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> DTensor:
    a, b = _binary(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> DTensor:
    a, b = _binary(a, b, "div")
    out = a.values / b.values

    def backward(g):
        ga = g / b.values
        gb = -g * out / b.values
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "div")


def exp(x: Operand) -> DTensor:
    x = as_tensor(x)
    out = np.exp(x.values)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x: Operand) -> DTensor:
    """Natural log; non-positive entries give -inf forward and zero gradient."""
    x = as_tensor(x)
    positive = x.values > 0
    safe = np.where(positive, x.values, 1.0)
    out = np.where(positive, np.log(safe), -np.inf).astype(_DTYPE)

    def backward(g):
        return (np.where(positive, g / safe, 0.0).astype(g.dtype),)

    return _make(out, (x,), backward, "log")


def relu(x: Operand) -> DTensor:
    x = as_tensor(x)
    active = x.values > 0

    def backward(g):
        return (g * active,)

    return _make(np.where(active, x.values, 0.0), (x,), backward, "relu")


def sigmoid(x: Operand) -> DTensor:
    x = as_tensor(x)
    out = np.exp(-np.logaddexp(0.0, -x.values)).astype(_DTYPE)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def xlogx(x: Operand) -> DTensor:
    """x·log(x) with the 0·log(0) := 0 convention."""
    x = as_tensor(x)
    positive = x.values > 0
    safe = np.where(positive, x.values, 1.0)
    out = np.where(positive, safe * np.log(safe), 0.0)

    def backward(g):
        return (np.where(positive, g * (np.log(safe) + 1.0), 0.0),)

    return _make(out, (x,), backward, "xlogx")


def clip_min(x: Operand, low: float) -> DTensor:
    x = as_tensor(x)
    passed = x.values > low

    def backward(g):
        return (g * passed,)

    return _make(np.maximum(x.values, low), (x,), backward, "clip_min")


def masked_fill(x: Operand, mask: np.ndarray, value: float) -> DTensor:
    """Replace entries where ``mask`` is true; those entries receive no gradient."""
    x = as_tensor(x)
    # copied: callers keep mutating their mask between rounds
    mask = np.array(mask, dtype=bool, copy=True)
    if mask.shape != x.shape:
        raise ValueError(f"masked_fill: mask shape {mask.shape} != {x.shape}")

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _make(np.where(mask, value, x.values), (x,), backward, "masked_fill")


def straight_through(soft: Operand, hard: np.ndarray) -> DTensor:
    """Forward value ``hard``, backward identity into ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=_DTYPE)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through: {hard.shape} != {soft.shape}")

    def backward(g):
        return (g,)

    return _make(hard.copy(), (soft,), backward, "straight_through")


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(x: Operand, axis: int = 0, tau: float = 1.0) -> DTensor:
    """Softmax along ``axis`` with temperature; -inf entries map to exactly 0."""
    if tau <= 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    x = as_tensor(x)
    if np.any(np.all(np.isneginf(x.values), axis=axis)):
        raise ValueError("empty support")
    m = np.max(x.values, axis=axis, keepdims=True)
    e = np.exp((x.values - m) / tau)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return _make(out, (x,), backward, "softmax")


def softmax_tau(logits: Operand, tau: float) -> DTensor:
    """Temperature softmax over a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ValueError(f"softmax_tau expects a vector, got shape {logits.shape}")
    return softmax(logits, axis=0, tau=tau)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _normalize_axes(axes, ndim: int) -> Optional[Tuple[int, ...]]:
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ValueError(f"axis {axis} out of range for a {ndim}-d tensor")
        normalized.append(axis % ndim)
    return tuple(sorted(set(normalized)))


def sum(x: Operand, axes=None) -> DTensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    out = np.sum(x.values, axis=axes)

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Operand, axes=None) -> DTensor:
    x = as_tensor(x)
    norm_axes = _normalize_axes(axes, x.ndim)
    count = x.size if norm_axes is None else int(np.prod([x.shape[a] for a in norm_axes]))
    return mul(sum(x, norm_axes), 1.0 / count)


def reshape(x: Operand, shape: Sequence[int]) -> DTensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def broadcast_to(x: Operand, shape: Sequence[int]) -> DTensor:
    """Explicit numpy-style broadcast; the backward pass sums the expanded axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.values, shape).copy()
    lead = len(shape) - x.ndim

    def backward(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        keep = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _make(out, (x,), backward, "broadcast_to")


def concat(tensors: Sequence[Operand], axis: int = 0) -> DTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def getitem(x: Operand, index) -> DTensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    out = x.values[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] += g
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def _region(origin: Sequence[int], size: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def crop(x: Operand, origin: Sequence[int], size: Sequence[int]) -> DTensor:
    """Crop the trailing three axes at ``origin``."""
    x = as_tensor(x)
    lead = (slice(None),) * (x.ndim - 3)
    return getitem(x, lead + _region(origin, size))


def embed(x: Operand, origin: Sequence[int], full_shape: Sequence[int]) -> DTensor:
    """Place ``x`` into a zero volume of ``full_shape`` (trailing three axes at ``origin``)."""
    x = as_tensor(x)
    full_shape = tuple(full_shape)
    lead = (slice(None),) * (x.ndim - 3)
    index = lead + _region(origin, x.shape[-3:])
    out = np.zeros(full_shape, dtype=x.values.dtype)
    out[index] = x.values

    def backward(g):
        return (g[index].copy(),)

    return _make(out, (x,), backward, "embed")


def matvec(z: Operand, stack: Operand) -> DTensor:
    """⟨z, X⟩ contracting the leading (patch-index) axis of ``stack``."""
    z, stack = as_tensor(z), as_tensor(stack)
    if z.ndim != 1 or stack.ndim < 1 or stack.shape[0] != z.shape[0]:
        raise ValueError(f"matvec: shapes {z.shape} and {stack.shape} disagree on N")
    out = np.tensordot(z.values, stack.values, axes=(0, 0))

    def backward(g):
        rest = tuple(range(1, stack.ndim))
        gz = np.tensordot(stack.values, g, axes=(rest, tuple(range(g.ndim))))
        gx = np.multiply.outer(z.values, g)
        return gz, gx

    return _make(out, (z, stack), backward, "matvec")


# ---------------------------------------------------------------------------
# convolution and separable linear resampling
# ---------------------------------------------------------------------------


def conv3(
    x: Operand,
    kernel: Operand,
    bias: Optional[Operand] = None,
    stride: int = 1,
    padding: int = 0,
) -> DTensor:
    """3-D cross-correlation of ``x`` [Cin,H,W,D] with ``kernel`` [Cout,Cin,k,k,k]."""
    if stride < 1:
        raise ValueError(f"conv3 stride must be >= 1, got {stride}")
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 5 or kernel.shape[1] != x.shape[0]:
        raise ValueError(f"conv3: input {x.shape} incompatible with kernel {kernel.shape}")
    k = kernel.shape[2:]
    pad = ((0, 0),) + ((padding, padding),) * 3
    xp = np.pad(x.values, pad) if padding else x.values
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(1, 2, 3))
    windows = windows[:, ::stride, ::stride, ::stride]
    out_spatial = windows.shape[1:4]
    out = np.tensordot(kernel.values, windows, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.values[:, None, None, None]
        parents.append(bias)

    def backward(g):
        gk = np.tensordot(g, windows, axes=([1, 2, 3], [1, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(k[0]):
            for b in range(k[1]):
                for c in range(k[2]):
                    contrib = np.tensordot(kernel.values[:, :, a, b, c], g, axes=(0, 0))
                    gxp[
                        :,
                        a : a + stride * out_spatial[0] : stride,
                        b : b + stride * out_spatial[1] : stride,
                        c : c + stride * out_spatial[2] : stride,
                    ] += contrib
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, padding:-padding]
        grads = [gxp, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward, "conv3")


def _apply_axis_matrices(values: np.ndarray, mats, transpose: bool = False) -> np.ndarray:
    axes = range(values.ndim - 3, values.ndim)
    pairs = list(zip(axes, mats))
    if transpose:
        pairs = pairs[::-1]
    for axis, mat in pairs:
        if mat is None:
            continue
        mat = mat.T if transpose else mat
        values = np.moveaxis(np.tensordot(mat, values, axes=(1, axis)), 0, axis)
    return values


def separable(x: Operand, mats: Sequence[Optional[np.ndarray]]) -> DTensor:
    """Apply one linear map per spatial axis (trailing three axes); None leaves an axis alone."""
    x = as_tensor(x)
    mats = [None if m is None else np.asarray(m, dtype=_DTYPE) for m in mats]
    out = _apply_axis_matrices(x.values, mats)

    def backward(g):
        return (_apply_axis_matrices(g, mats, transpose=True),)

    return _make(out, (x,), backward, "separable")


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the graph below a root."""

    def __init__(self, root: DTensor):
        self.root = root
        self.nodes: List[DTensor] = self._topological_order(root)
        self.consumed = False

    @staticmethod
    def _topological_order(root: DTensor) -> List[DTensor]:
        order: List[DTensor] = []
        visited = set()
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def leaves(self) -> List[DTensor]:
        return [n for n in self.nodes if n.requires_grad and n._backward is None]

    def run(self):
        if self.consumed:
            raise RuntimeError("backward already called on this graph; call reset() first")
        self.root.grad = np.ones(self.root.shape, dtype=self.root.values.dtype)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, grad in zip(node._parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=parent.values.dtype)
                if parent.grad is None:
                    parent.grad = grad.copy()
                else:
                    parent.grad = parent.grad + grad
        self.consumed = True

    def reset(self):
        for node in self.nodes:
            node.grad = None
        self.consumed = False


def backward(root: DTensor) -> Dict[DTensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        root._tape = Tape(root)
    root._tape.run()
    return {leaf: leaf.grad for leaf in root._tape.leaves()}


def zero_grad(tensors: Iterable[DTensor]):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[DTensor], DTensor],
    x,
    eps: float = 1e-3,
    floor: float = 1e-8,
) -> float:
    """
    Compare backward gradients of a scalar function with central differences.

    Returns max_i |analytic_i − numeric_i| / max(floor, |numeric_i|).
    ``f`` must be deterministic: freeze any random draws before calling.
    """
    base = np.array(x.values if isinstance(x, DTensor) else x, dtype=_DTYPE)
    leaf = DTensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            f_plus = f(DTensor(plus.reshape(base.shape))).item()
            f_minus = f(DTensor(minus.reshape(base.shape))).item()
            flat[i] = (f_plus - f_minus) / (2 * eps)

    rel = np.abs(analytic - numeric) / np.maximum(floor, np.abs(numeric))
    worst = float(rel.max()) if rel.size else 0.0
    logger.debug(f"finite_diff_check: {base.size} coordinates, max relative error {worst:.3e}")
    return worst
