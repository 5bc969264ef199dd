"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

This module provides just enough of a tensor library to run the toy
transformer forward and backward on CPU:

- Tensor: a row-major float32 numpy array plus gradient bookkeeping
- Graph: reverse topological traversal of the operations behind a result
- the differentiable operations the model needs (matmul, linear, softmax,
  rmsnorm, rotary, cross-entropy, ...)

Reductions go through numpy in a fixed order, so identical inputs give
bitwise-identical outputs.
"""

import contextlib
import hashlib
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DegenerateRowError, DimensionError, HydraError, MaskError, NonFiniteError

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


class _EngineState:
    """Process-wide switches for gradient recording and working precision."""

    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32


_state = _EngineState()


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them for backward."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def float64_precision():
    """Create tensors in float64 (used by finite-difference gradient checks)."""
    previous = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """A dense array with optional gradient tracking."""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=_state.dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        Graph(self).backward(grad)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(values, name: Optional[str] = None, requires_grad: bool = True) -> Tensor:
    """Create a leaf tensor that owns a private copy of values."""
    return Tensor(np.array(values, dtype=_state.dtype, copy=True), requires_grad=requires_grad, name=name)


class Graph:
    """
    Operations that produced a root tensor, in topological order.

    backward() visits every node once in reverse order and accumulates
    gradients additively into leaf tensors.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    @property
    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf]

    def backward(self, grad: Optional[np.ndarray] = None):
        root = self.root
        if not root.requires_grad:
            raise HydraError("backward() called on a tensor that does not require grad")

        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.data.dtype)
        pending = {id(root): seed}

        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _check_finite(data: np.ndarray, allow_neg_inf: bool = False):
    if allow_neg_inf:
        bad = np.isnan(data).any() or np.isposinf(data).any()
    else:
        bad = not np.isfinite(data).all()
    if bad:
        raise NonFiniteError("operation produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable,
            allow_neg_inf: bool = False) -> Tensor:
    _check_finite(data, allow_neg_inf)
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to_shape(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# --------------------------------------------------------------------------- #
# Linear algebra
# --------------------------------------------------------------------------- #

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; b may be 2-D and shared across a's batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")

    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x @ weight.T with weight stored as [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: {x.shape} with weight {weight.shape}")

    data = np.matmul(x.data, weight.data.T)

    def backward(g):
        gx = np.matmul(g, weight.data) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g.reshape(-1, weight.shape[0]).T, x.data.reshape(-1, weight.shape[1]))
        return gx, gw

    return _result(data, (x, weight), backward)


# --------------------------------------------------------------------------- #
# Elementwise
# --------------------------------------------------------------------------- #

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may match only the trailing axes of a (bias add)."""
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")

    data = a.data + b.data

    def backward(g):
        return (g if a.requires_grad else None,
                _sum_to_shape(g, b.shape) if b.requires_grad else None)

    return _result(data, (a, b), backward)


def add_mask(scores: Tensor, bias: np.ndarray) -> Tensor:
    """Add a constant additive mask (0 / -inf) over the trailing axes of scores."""
    if scores.shape[scores.ndim - bias.ndim:] != bias.shape:
        raise DimensionError(f"mask shape {bias.shape} does not fit scores {scores.shape}")

    data = scores.data + bias.astype(scores.data.dtype, copy=False)

    def backward(g):
        return (g,)

    return _result(data, (scores,), backward, allow_neg_inf=True)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")

    data = a.data * b.data

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result(data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)
    data = x.data * factor

    def backward(g):
        return (g * factor,)

    return _result(data, (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return _result(data, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the keep mask is drawn from rng."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    data = x.data * keep

    def backward(g):
        return (g * keep,)

    return _result(data, (x,), backward)


# --------------------------------------------------------------------------- #
# Normalization and attention weights
# --------------------------------------------------------------------------- #

def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries map to exactly 0."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a last extent of at least 1")

    row_max = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        raise MaskError("softmax row has no valid attention target")
    e = np.exp(x.data - row_max)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=-1, keepdims=True)),)

    return _result(data, (x,), backward)


def rmsnorm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight."""
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise DimensionError(f"rmsnorm weight {weight.shape} does not match input {x.shape}")

    dtype = x.data.dtype.type
    inv_rms = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + dtype(eps))
    normed = x.data * inv_rms
    data = normed * weight.data

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = (g * normed).reshape(-1, weight.shape[0]).sum(axis=0)
        if x.requires_grad:
            g_hat = g * weight.data
            gx = inv_rms * g_hat - x.data * inv_rms ** 3 * (g_hat * x.data).mean(axis=-1, keepdims=True)
        return gx, gw

    return _result(data, (x, weight), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {x.shape}")

    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms < DEGENERATE_NORM).any():
        raise DegenerateRowError("cannot normalize a row with norm below 1e-12")
    data = x.data / norms

    def backward(g):
        return ((g - data * (g * data).sum(axis=-1, keepdims=True)) / norms,)

    return _result(data, (x,), backward)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + half) of x[..., seq, head_dim] by per-position angles."""
    if x.shape[-2:] != cos.shape or cos.shape != sin.shape or x.shape[-1] % 2:
        raise DimensionError(f"rotary tables {cos.shape} do not fit input {x.shape}")

    half = x.shape[-1] // 2
    cos = cos.astype(x.data.dtype, copy=False)
    sin = sin.astype(x.data.dtype, copy=False)

    def rotate_half(a):
        return np.concatenate((-a[..., half:], a[..., :half]), axis=-1)

    def rotate_half_transposed(a):
        return np.concatenate((a[..., half:], -a[..., :half]), axis=-1)

    data = x.data * cos + rotate_half(x.data) * sin

    def backward(g):
        return (g * cos + rotate_half_transposed(g * sin),)

    return _result(data, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits) rows."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [n, c] logits and n targets, got {logits.shape}")
    if logits.shape[0] == 0:
        raise DimensionError("cross_entropy over an empty batch")

    n = logits.shape[0]
    rows = np.arange(n)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = -log_probs[rows, targets].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        return (probs * (g / n),)

    return _result(np.asarray(data), (logits,), backward)


# --------------------------------------------------------------------------- #
# Shape plumbing and reductions
# --------------------------------------------------------------------------- #

def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), backward)


def permute(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(x.data, axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return permute(x, axes)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a [rows, d] table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise DimensionError("take_rows expects a 2-D table and 1-D ids")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"row id out of range for table with {table.shape[0]} rows")

    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(data, (table,), backward)


def select_rows(x: Tensor, idx) -> Tensor:
    """Keep the listed rows (axis 0) of x, in order."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    if len(tensors) == 1:
        return tensors[0]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("stack of zero tensors")
    data = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _result(data, tuple(tensors), backward)


def max_lastdim(x: Tensor) -> Tensor:
    """Max over the last axis; gradient flows to the first maximal entry."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("max over an empty axis")
    idx = np.argmax(x.data, axis=-1)
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (gx,)

    return _result(data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def backward(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _result(data, (x,), backward)


def sum_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0:
        raise DimensionError("sum_lastdim needs at least one axis")
    data = x.data.sum(axis=-1)

    def backward(g):
        return (np.broadcast_to(np.asarray(g)[..., None], x.shape).copy(),)

    return _result(data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(x.size, 1))


# --------------------------------------------------------------------------- #
# Utilities
# --------------------------------------------------------------------------- #

def tensor_digest(value) -> str:
    """SHA-256 over the little-endian float32 bytes of a tensor or array, lowercase hex."""
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    return hashlib.sha256(np.ascontiguousarray(array, dtype='<f4').tobytes()).hexdigest()


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3) -> float:
    """
    Compare analytic gradients of a scalar-valued fn against central differences.

    Runs in float64. Returns the largest absolute disagreement divided by the
    largest numeric gradient magnitude (floored at 1e-6).
    """
    with float64_precision():
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        if out.size != 1:
            raise DimensionError("gradcheck needs a scalar-valued function")
        out.backward()
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        worst_diff = 0.0
        worst_scale = 1e-6
        with no_grad():
            for position, array in enumerate(arrays):
                numeric = np.zeros_like(array)
                flat = array.reshape(-1)
                for i in range(flat.size):
                    original = flat[i]
                    flat[i] = original + eps
                    plus = fn(*[Tensor(a) for a in arrays]).item()
                    flat[i] = original - eps
                    minus = fn(*[Tensor(a) for a in arrays]).item()
                    flat[i] = original
                    numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
                worst_diff = max(worst_diff, float(np.max(np.abs(numeric - analytic[position]))))
                worst_scale = max(worst_scale, float(np.max(np.abs(numeric))))
    return worst_diff / worst_scale
