"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap a C-contiguous (row-major) numpy array.  Operations record
themselves on the innermost active :class:`Tape` when at least one input
requires a gradient; with no active tape nothing is recorded, which is the
inference fast path.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = matmul(x, w).sum()
    tape.backward(loss)
    w.grad  # dloss/dw
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .rng import RngStream

LAYER_NORM_EPS = 1e-5

_default_dtype = np.float32
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. ``np.float64`` in tests)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def _raise_non_scalar(shape):
    raise ShapeError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the recorded list is already
    topologically sorted; :meth:`backward` walks it in reverse once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), out, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on all active tapes."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate ``dloss/dt`` into ``t.grad`` for every ``requires_grad`` tensor on the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not tape.nodes or not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.out) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"cannot concatenate shapes {[u.shape for u in tensors]} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "sigmoid": sigmoid,
    "relu": relu,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch a pointwise op by name (``concat-last-axis`` joins along the last axis)."""
    if kind == "concat-last-axis":
        return concat(operands, axis=-1)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands)


# -- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make(y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),)
    )


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(..., in)`` and ``w`` of shape ``(in, out)``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, (x, w) if b is None else (x, w, b), bw)


# -- normalisation -------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _make(y, (x,), bw)


def masked_softmax(x: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``keep`` is true.

    Masked positions get exactly zero weight.  A row with no kept position
    puts weight 1 on position 0 (the sentinel key) so the result stays finite.
    """
    if x.shape[-1] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {x.shape}")
    keep = np.broadcast_to(keep, x.shape)
    z = np.where(keep, x.data, -np.inf)
    mx = z.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(mx)
    mx = np.where(empty, 0.0, mx)
    e = np.exp(z - mx)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(empty, 1.0, s)
    if empty.any():
        rows = empty[..., 0]
        y[rows] = 0.0
        y[rows, 0] = 1.0
    y = y.astype(x.dtype, copy=False)

    def bw(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# -- stochastic ----------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: Optional[RngStream]) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so inference is the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    u = rng.uniform(x.shape, dtype=np.float32 if x.dtype == np.float32 else np.float64)
    m = (u >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * m, (x,), lambda g: (g * m,))


def gaussian_sample(shape, sigma: float, rng: RngStream) -> Tensor:
    """I.i.d. ``N(0, sigma^2)`` draws; ``sigma == 0`` yields exact zeros without consuming the stream."""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return Tensor(np.zeros(shape))
    return Tensor(rng.normal(shape) * sigma)


# -- embedding and loss --------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range for embedding of size {weight.shape[0]}")
    wshape = weight.shape

    def bw(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, smoothing: float = 0.0, ignore_index: int | None = None) -> Tensor:
    """Label-smoothed cross-entropy averaged over non-ignored positions.

    The smoothed target puts ``1 - smoothing`` on the gold id plus
    ``smoothing / V`` on every id.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    valid = np.ones(t.shape, bool) if ignore_index is None else t != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("all target positions are padding")
    lp = log_softmax_np(flat)
    rows = np.arange(t.size)
    nll = -lp[rows, t]
    smooth = -lp.mean(axis=-1)
    per_tok = (1.0 - smoothing) * nll + smoothing * smooth
    loss = np.asarray((per_tok * valid).sum() / n, dtype=logits.dtype)
    shape = logits.shape

    def bw(g):
        q = np.full(flat.shape, smoothing / V, dtype=flat.dtype)
        q[rows, t] += 1.0 - smoothing
        grad = (np.exp(lp) - q) * (valid[:, None] * (g / n))
        return (grad.reshape(shape).astype(logits.dtype, copy=False),)

    return _make(loss, (logits,), bw)
