"""Dense float64 tensors with reverse-mode differentiation.

Every loss and encoder in the package is written against :class:`Tensor`.
Arrays are always ``float64``; operations broadcast like numpy and their
gradients are reduced back to the operand shapes.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An immutable float64 array that remembers how it was computed."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, data, parents: tuple, backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """A named trainable leaf."""

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return Tensor._result(
        out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_tensor(a)
    return Tensor._result(log_expit(a.data), (a,), lambda g: (g * expit(-a.data),))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU (smooth, so finite differences behave)."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_K * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return Tensor._result(out, (a,), backward)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return Tensor._result(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                   _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return Tensor._result(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                   _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(
        np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; no gradient flows there."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._result(
        np.where(mask, value, a.data), (a,),
        lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),))


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(np.matmul(a.data, b.data), (a, b), backward)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        a.data.sum(axis=axis, keepdims=keepdims), (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)])
    return Tensor._result(
        a.data.mean(axis=axis, keepdims=keepdims), (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def expand(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (row-gather for embeddings)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        ga = np.zeros(a.shape)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (ga,)

    return Tensor._result(np.take(a.data, index, axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# composite numerics used throughout the model
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(
        out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_rows(x) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("log_softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return Tensor._result(
        out, (a,),
        lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    return x * power(tsum(x * x, axis=axis, keepdims=True) + eps * eps, -0.5)


def cosine_sim(a, b, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two vectors, or the pairwise matrix of two row sets."""
    a, b = as_tensor(a), as_tensor(b)
    na, nb = l2_normalize(a, eps=eps), l2_normalize(b, eps=eps)
    if a.ndim == 1 and b.ndim == 1:
        return tsum(na * nb)
    return matmul(na, swapaxes(nb, -1, -2))


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute deviation scaled by the larger gradient's max magnitude."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_check(loss_fn: Callable[[], Tensor], leaves: Iterable[Tensor],
                   h: float = 1e-5, max_coords: int | None = None, rng=None,
                   floor: float = 1e-8) -> float:
    """Compare backward() against central differences for every leaf.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of the
    leaves on each call. With ``max_coords`` only that many randomly chosen
    coordinates per leaf are differenced. The result is the largest absolute
    discrepancy divided by the largest gradient magnitude seen over all
    leaves, so leaves whose true gradient is identically zero (attention key
    biases) are judged on the scale of the whole gradient.
    """
    leaves = list(leaves)
    rng = np.random.default_rng(0) if rng is None else rng
    for leaf in leaves:
        leaf.grad = None
    loss_fn().backward()
    worst_abs, scale = 0.0, floor
    for leaf in leaves:
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
        original = leaf.data.copy()
        coords = np.arange(leaf.size)
        if max_coords is not None and leaf.size > max_coords:
            coords = rng.choice(leaf.size, size=max_coords, replace=False)
        numeric = np.empty(coords.size)
        flat = original.copy().reshape(-1)
        for j, i in enumerate(coords):
            vals = []
            for step in (h, -h):
                flat[i] = original.reshape(-1)[i] + step
                leaf.data = flat.reshape(leaf.shape)
                with no_grad():
                    vals.append(loss_fn().item())
            flat[i] = original.reshape(-1)[i]
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError("non-finite loss during gradient check")
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        leaf.data = original
        sampled = analytic.reshape(-1)[coords]
        scale = max(scale, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        worst_abs = max(worst_abs, float(np.abs(sampled - numeric).max(initial=0.0)))
    return float(worst_abs / scale)


# ---------------------------------------------------------------------------
# checkpoint format: b"CGZ1", u32 count, then per record
#   u32 name_len, utf-8 name, u32 rank, u64 dims..., little-endian f64 data
# ---------------------------------------------------------------------------

MAGIC = b"CGZ1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        values = struct.unpack_from(fmt, raw, pos)
        pos += size
        return values

    (count,) = read("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        if pos + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        dims = read(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        if pos + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(
            np.float64).reshape(dims)
        pos += 8 * n
    return out
