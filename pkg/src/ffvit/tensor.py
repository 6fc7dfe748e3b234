"""Dense tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly with numpy and, when any operand requires a
gradient, remembers its operands together with a closure implementing the
adjoint rule. ``Tensor.backward`` orders those records topologically and
replays the adjoints in reverse.

Storage is row-major and contiguous. Ops that permute axes materialize a copy.
Scalar width (float32 or float64) is fixed per tensor at construction time and
the operands of a binary op must agree.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import RankError, ShapeError

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))
_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on the current thread (forward-only execution)."""
    prev = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in autodiff.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: mark as a leaf whose gradient ``backward`` accumulates.
        dtype: ``np.float32`` or ``np.float64``. Defaults to the dtype of a
            float ndarray input, otherwise float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in FLOAT_TYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_TYPES:
            raise TypeError(f"unsupported scalar type {dtype}; use float32 or float64")
        self.data = _contiguous(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Gradients add into any existing ``.grad``; callers reset explicitly.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                    if node.grad is None:
                        node.grad = Tensor(g.copy(), dtype=node.dtype)
                    else:
                        node.grad.data = node.grad.data + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose_last_two(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(np.asarray(data))
    out.grad = None
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _contiguous(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to shape (1,)
    return a if a.flags.c_contiguous else a.copy()


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_dtypes(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed scalar widths in one op: {dt.name} and {t.dtype.name}")


def _broadcast_shape(a: tuple, b: tuple, what: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a} and {b} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes along which ``shape`` was broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., M, K] @ [.., K, N] -> [.., M, N]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch dimensions")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose_last_two(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise RankError(f"transpose_last_two needs rank >= 2, got shape {x.shape}")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(np.swapaxes(x.data, -1, -2).copy(), (x,), backward, "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes).copy(), (x,), backward, "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), backward, "reshape")


# -- elementwise --------------------------------------------------------------


def add(x, y) -> Tensor:
    x = _as_tensor(x, getattr(y, "dtype", None))
    y = _as_tensor(y, x.dtype)
    _check_dtypes(x, y)
    _broadcast_shape(x.shape, y.shape, "add")

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _result(x.data + y.data, (x, y), backward, "add")


def sub(x, y) -> Tensor:
    x = _as_tensor(x, getattr(y, "dtype", None))
    y = _as_tensor(y, x.dtype)
    _check_dtypes(x, y)
    _broadcast_shape(x.shape, y.shape, "sub")

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _result(x.data - y.data, (x, y), backward, "sub")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_dtypes(x, y)
    _broadcast_shape(x.shape, y.shape, "mul")

    def backward(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return _result(x.data * y.data, (x, y), backward, "mul")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(x.data * x.dtype.type(c), (x,), backward, "mul_scalar")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-D vector to every row of ``x [.., D]``."""
    _check_dtypes(x, bias)
    if bias.ndim != 1 or x.ndim < 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias of shape {bias.shape} does not match last dimension of {x.shape}")

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return g, gb

    return _result(x.data + bias.data, (x, bias), backward, "add_bias")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if _broadcast_shape(x.shape, shape, "broadcast_to") != shape:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), backward, "broadcast_to")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))

    def backward(g):
        with np.errstate(over="ignore", under="ignore"):
            pdf = np.exp(-0.5 * np.square(x.data)) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x.data * pdf),)

    return _result((x.data * cdf).astype(x.dtype, copy=False), (x,), backward, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. A no-op when ``p == 0`` or no generator is given (eval mode)."""
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ValueError(f"dropout probability must be < 1, got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "dropout")


# -- normalization and reductions ---------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    _check_dtypes(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature size {d}"
        )
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.square(centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * rstd

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise RankError(f"cross_entropy_logits expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {b}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        raise IndexError(f"label {int(labels[bad][0])} outside [0, {c})")
    rows = np.arange(b)
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(s[:, 0])
    loss = (lse - logits.data[rows, labels]).mean()

    def backward(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul_scalar(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- structural ---------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes(*tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; the adjoint scatters back into a zero tensor."""
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(x.data[index]), (x,), backward, "take")


# -- verification -------------------------------------------------------------


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f(x)`` against central differences.

    ``x`` is a tensor or a sequence of tensors, all float64. When
    ``max_elements`` is set, at most that many entries per tensor are probed
    (chosen with a seeded generator); otherwise every entry is.

    Returns the max over probed entries of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
    saved_flags = [t.requires_grad for t in xs]
    saved_grads = [t.grad for t in xs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
        f(x).backward()
        analytic = [
            t.grad.data.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs
        ]
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
                a_flat = a.reshape(-1)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f(x).item()
                    flat[i] = orig - h
                    fm = f(x).item()
                    flat[i] = orig
                    numeric = (fp - fm) / (2.0 * h)
                    err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
                    worst = max(worst, err)
    finally:
        for t, flag, g in zip(xs, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g
    return worst
