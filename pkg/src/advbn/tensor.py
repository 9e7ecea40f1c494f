"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are plain numpy; a :class:`Tape` records one closure per op whose
inputs are tracked on it. Gradients are pulled with :func:`backward`::

    with Tape() as tape:
        tape.watch(w)
        loss = softmax_cross_entropy(linear(x, w, b), y)
    (gw,) = backward(loss, [w])

Broadcasting is restricted to per-channel vectors: a 1-D tensor of length C
combines with any tensor whose axis 1 has size C (NCHW features or N x K
activations). Everything else must match shape exactly.

Reductions go through numpy's pairwise summation along fixed axes and
matmuls through BLAS with a fixed operand layout, so results are
bit-reproducible for a given scalar width and thread count.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "backward",
    "finite_diff_check",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "relu",
    "total",
    "mean_all",
    "channel_mean",
    "reshape",
    "conv2d",
    "linear",
    "avg_pool2d",
    "global_avg_pool",
    "upsample_nearest",
    "softmax_cross_entropy",
    "mse_loss",
    "batch_norm_train",
    "channel_affine",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, untracked tensor, ...)."""


_DTYPE: type = np.float32


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Set the run-level scalar width (``np.float32`` or ``np.float64``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported scalar width {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """An ndarray plus an optional handle on the active tape."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _DTYPE, copy=True)
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def grad_handle(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no tape handle (shares memory)."""
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self._node}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records differentiable ops while active.

    Ops are appended as they execute, which is already a topological order,
    so backward is a single reverse sweep visiting each record once.
    """

    _stack: list["Tape"] = []
    _ids = itertools.count()

    def __init__(self):
        self._records: list[tuple[int, tuple[int | None, ...], Vjp]] = []
        self._next = 0
        self.tape_id = next(Tape._ids)

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def _new_node(self, t: Tensor) -> None:
        t._tape = self
        t._node = self._next
        self._next += 1

    def watch(self, *tensors: Tensor) -> None:
        """Make leaf tensors differentiable on this tape."""
        for t in tensors:
            if t._tape is not self:
                self._new_node(t)

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and t._tape is self and t._node is not None

    def record(self, out: Tensor, inputs: Sequence, vjp: Vjp) -> None:
        self._new_node(out)
        ids = tuple(t._node if self.tracks(t) else None for t in inputs)
        self._records.append((out._node, ids, vjp))

    def __len__(self) -> int:
        return len(self._records)

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.tracks(loss):
            raise TapeError("loss is not on this tape")
        for t in wrt:
            if not self.tracks(t):
                raise TapeError(f"{t!r} is not on this tape")
        wanted = {t._node for t in wrt}
        cot: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for out_id, in_ids, vjp in reversed(self._records):
            g = cot.get(out_id) if out_id in wanted else cot.pop(out_id, None)
            if g is None:
                continue
            for i, gi in zip(in_ids, vjp(g)):
                if i is None or gi is None:
                    continue
                if i in cot:
                    cot[i] = cot[i] + gi
                else:
                    cot[i] = gi
        return [
            cot[t._node].copy() if t._node in cot else np.zeros_like(t.data)
            for t in wrt
        ]


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` for exactly the tensors in ``wrt``."""
    if loss._tape is None:
        raise TapeError("loss is not on any tape")
    return loss._tape.gradient(loss, wrt)


def _result(arr: np.ndarray, inputs: Sequence, vjp: Vjp) -> Tensor:
    out = Tensor._wrap(arr)
    tape = Tape.active()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _needs(*inputs) -> tuple[bool, ...]:
    """Which inputs the active tape will want gradients for (skips dead work)."""
    tape = Tape.active()
    return tuple(tape is not None and tape.tracks(t) for t in inputs)


def _arr(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DTYPE)


# ---------------------------------------------------------------- elementwise


def _chan_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    # channel vector against NCHW / NK
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def _broadcast(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return a, _chan_view(b, a.ndim)
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return _chan_view(a, b.ndim), b
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    xa, ya = _broadcast(x, y)
    return _result(
        xa + ya, (a, b), lambda g: (_reduce_to(g, x.shape), _reduce_to(g, y.shape))
    )


def sub(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    xa, ya = _broadcast(x, y)
    return _result(
        xa - ya, (a, b), lambda g: (_reduce_to(g, x.shape), -_reduce_to(g, y.shape))
    )


def mul(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    xa, ya = _broadcast(x, y)
    return _result(
        xa * ya,
        (a, b),
        lambda g: (_reduce_to(g * ya, x.shape), _reduce_to(g * xa, y.shape)),
    )


def div(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    xa, ya = _broadcast(x, y)
    out = xa / ya
    return _result(
        out,
        (a, b),
        lambda g: (_reduce_to(g / ya, x.shape), _reduce_to(-g * out / ya, y.shape)),
    )


def neg(a) -> Tensor:
    return _result(-_arr(a), (a,), lambda g: (-g,))


def square(a) -> Tensor:
    x = _arr(a)
    return _result(x * x, (a,), lambda g: (2 * x * g,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_arr(a))
    return _result(out, (a,), lambda g: (g / (2 * out),))


def relu(a) -> Tensor:
    x = _arr(a)
    mask = x > 0
    return _result(np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,))


def total(a) -> Tensor:
    """Sum of all elements as a scalar."""
    x = _arr(a)
    return _result(np.asarray(x.sum(), dtype=x.dtype), (a,), lambda g: (np.full_like(x, g),))


def mean_all(a) -> Tensor:
    x = _arr(a)
    n = x.size
    return _result(
        np.asarray(x.mean(), dtype=x.dtype), (a,), lambda g: (np.full_like(x, g / n),)
    )


def _channel_axes(ndim: int) -> tuple[int, ...]:
    return (0,) + tuple(range(2, ndim))


def channel_mean(a) -> Tensor:
    """Per-channel mean over every axis except 1."""
    x = _arr(a)
    axes = _channel_axes(x.ndim)
    m = x.size // x.shape[1]

    def vjp(g):
        return (np.broadcast_to(_chan_view(g / m, x.ndim), x.shape).copy(),)

    return _result(x.mean(axis=axes), (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    x = _arr(a)
    return _result(x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


def channel_affine(a, scale, shift) -> Tensor:
    """``scale[c] * a + shift[c]`` with per-channel vectors."""
    return add(mul(a, scale), shift)


# ---------------------------------------------------------------- conv / linear


def _check4(name: str, t: np.ndarray) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D, got shape {t.shape}")


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) kernel, no bias."""
    xd, wd = _arr(x), _arr(w)
    _check4("input", xd)
    _check4("kernel", wd)
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding {stride}/{padding}")
    n, c, h, wid = xd.shape
    cout, cin, kh, kw = wd.shape
    if cin != c:
        raise ShapeError(f"input {xd.shape} has {c} channels, kernel {wd.shape} expects {cin}")
    hp, wp = h + 2 * padding, wid + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {wd.shape} larger than padded input {xd.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # (N, Ho, Wo, C, kh, kw) column tensor, fixed layout
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    w2 = wd.reshape(cout, c * kh * kw)
    out = (cols2 @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    need_x, need_w = _needs(x, w)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols2).reshape(wd.shape) if need_w else None
        if not need_x:
            return None, gw
        gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), vjp)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for x of shape (N, D), w (K, D), b (K,)."""
    xd, wd = _arr(x), _arr(w)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} vs weight {wd.shape}")
    out = xd @ wd.T
    if b is not None:
        bd = _arr(b)
        if bd.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bd.shape} vs weight {wd.shape}")
        out = out + bd

    need_x, need_w = _needs(x, w)

    def vjp(g):
        gx = g @ wd if need_x else None
        gw = g.T @ xd if need_w else None
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, vjp)


# ---------------------------------------------------------------- pooling / resize


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be divisible by k."""
    xd = _arr(x)
    _check4("input", xd)
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {xd.shape} not divisible by {k}")
    out = xd.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)

    return _result(out, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    xd = _arr(x)
    _check4("input", xd)
    n, c, h, w = xd.shape

    def vjp(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], xd.shape).copy(),)

    return _result(xd.mean(axis=(2, 3)), (x,), vjp)


def upsample_nearest(x, k: int = 2) -> Tensor:
    xd = _arr(x)
    _check4("input", xd)
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, k, axis=2), k, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    z = _arr(logits)
    y = np.asarray(labels)
    if z.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {z.shape}")
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels {y.shape} do not match logits {z.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, y] -= 1
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), vjp)


def mse_loss(a, b) -> Tensor:
    """Mean squared difference; gradient flows to both operands."""
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise ShapeError(f"mse_loss: {x.shape} vs {y.shape}")
    d = x - y
    n = d.size
    return _result(
        np.asarray((d * d).mean(), dtype=x.dtype),
        (a, b),
        lambda g: (2 * g * d / n, -2 * g * d / n),
    )


# ---------------------------------------------------------------- batch norm


def batch_norm_train(f, gamma, beta, eps: float):
    """Normalize with batch statistics over (N, H, W).

    Returns ``(out, mean, var)``; ``mean``/``var`` are plain arrays (population
    variance) for the caller's running-stat update. The backward pass includes
    the dependence of the statistics on ``f``.
    """
    x = _arr(f)
    gd, bd = _arr(gamma), _arr(beta)
    if x.ndim < 2 or gd.shape != (x.shape[1],) or bd.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: features {x.shape}, gamma {gd.shape}, beta {bd.shape}")
    axes = _channel_axes(x.ndim)
    m = x.size // x.shape[1]
    mean = x.mean(axis=axes)
    centered = x - _chan_view(mean, x.ndim)
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * _chan_view(inv, x.ndim)
    out = xhat * _chan_view(gd, x.ndim) + _chan_view(bd, x.ndim)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * _chan_view(gd, x.ndim)
        s1 = gxhat.sum(axis=axes)
        s2 = (gxhat * xhat).sum(axis=axes)
        gx = (
            gxhat - _chan_view(s1 / m, x.ndim) - xhat * _chan_view(s2 / m, x.ndim)
        ) * _chan_view(inv, x.ndim)
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (f, gamma, beta), vjp), mean, var


# ---------------------------------------------------------------- gradient checks


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    grad_fn: Callable[[Tensor], np.ndarray] | None = None,
    floor: float = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a tensor to a scalar tensor. Per coordinate the error is
    ``|a - n| / max(|a|, |n|, floor * max|n|)``; the floor keeps coordinates
    whose true gradient is ~0 from dividing rounding noise by nothing.
    ``grad_fn`` overrides how the analytic gradient is obtained (used by
    mutation tests).
    """
    x0 = np.array(x.data, copy=True)
    if grad_fn is None:
        with Tape() as tape:
            xt = Tensor(x0, dtype=x0.dtype)
            tape.watch(xt)
            out = fn(xt)
        analytic = backward(out, [xt])[0]
    else:
        analytic = grad_fn(Tensor(x0, dtype=x0.dtype))

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for idx in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[idx] += h
        fp = fn(Tensor(xp.reshape(x0.shape), dtype=x0.dtype)).item()
        xm = x0.copy().reshape(-1)
        xm[idx] -= h
        fm = fn(Tensor(xm.reshape(x0.shape), dtype=x0.dtype)).item()
        flat[idx] = (fp - fm) / (2 * h)

    scale = float(np.abs(numeric).max()) if numeric.size else 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    diff = np.abs(analytic - numeric)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1), 0.0)
    return float(rel.max()) if rel.size else 0.0
