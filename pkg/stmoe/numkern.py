"""Dense numeric kernel with reverse-mode differentiation.

Tensors wrap row-major numpy arrays. Every differentiable operation run
while a :class:`Tape` is active (and with at least one input that requires
a gradient) appends a record to that tape; ``Tape.backward`` replays the
records in strict reverse execution order. Tapes and the working precision
are thread-local, so separate threads can run separate tapes.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, TokenIndexError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# -----------------------------------------------------------------------------
# Precision
# -----------------------------------------------------------------------------


def get_dtype() -> Any:
    return getattr(_state, "dtype", np.float32)


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise DimensionError(f"unknown precision {name!r} (expected float32 or float64)")
    _state.dtype = _DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    prev = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = prev


# -----------------------------------------------------------------------------
# Tensor and tape
# -----------------------------------------------------------------------------


class Tensor:
    """A dense array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
    ) -> None:
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    # Operators
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar result. A tape is rebuilt per forward
    pass; gradients accumulate into leaf tensors across backward calls
    until they are cleared.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec: _Record) -> None:
        self.records.append(rec)

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.array(grad, dtype=loss.data.dtype)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                _accumulate(inp, gi)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs and tape is not None:
        tape.record(_Record(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def parameter(data: Any, name: Optional[str] = None, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable, name=name)


# -----------------------------------------------------------------------------
# Elementwise arithmetic
# -----------------------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        "div",
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


# -----------------------------------------------------------------------------
# Shape and reduction
# -----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result("matmul", np.matmul(ad, bd), (a, b), backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(int(i) for i in np.argsort(perm))
    return _result(
        "transpose",
        np.ascontiguousarray(np.transpose(a.data, perm)),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def swap_last(a: Tensor) -> Tensor:
    perm = list(range(a.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(a, perm)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (axis 0) at integer indices of any shape."""
    idx = np.asarray(idx)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TokenIndexError(f"row index out of range [0, {n})")
    src = a.data

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        gz = np.zeros_like(src)
        np.add.at(gz, idx, g)
        return (gz,)

    return _result("take", np.take(src, idx, axis=0), (a,), backward)


def take_along(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis (``np.take_along_axis``)."""
    idx = np.asarray(idx)
    src = a.data

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        gz = np.zeros_like(src)
        # column by column so repeated indices accumulate
        for j in range(idx.shape[-1]):
            col = idx[..., j : j + 1]
            cur = np.take_along_axis(gz, col, axis=-1)
            np.put_along_axis(gz, col, cur + g[..., j : j + 1], axis=-1)
        return (gz,)

    return _result("take_along", np.take_along_axis(src, idx, axis=-1), (a,), backward)


def scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place ``values`` at distinct rows ``idx`` of a zero array with ``n_rows`` rows."""
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.data.dtype)
    out[idx] = values.data
    return _result("scatter_rows", out, (values,), lambda g: (g[idx],))


# -----------------------------------------------------------------------------
# Model primitives
# -----------------------------------------------------------------------------


def l2_normalize(v: Tensor, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """v / (||v||_2 + eps) along ``axis``; the zero vector maps to itself."""
    if v.shape[axis] < 1:
        raise DimensionError("l2_normalize needs a non-empty axis")
    vd = v.data
    norm = np.sqrt(np.sum(vd * vd, axis=axis, keepdims=True))
    denom = norm + eps

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        dot = np.sum(vd * g, axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - vd * dot / (safe * denom * denom),)

    return _result("l2_normalize", vd / denom, (v,), backward)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (True = keep) zeroes excluded entries."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    z = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (s + xd * s * (1.0 - s)),)

    return _result("silu", xd * s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs d >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},)")
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - np.mean(gx_hat, axis=-1, keepdims=True)
            - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _result("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


def _rope_tables(seq: int, head_dim: int, base: float, offset: int, dtype: Any) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-(np.arange(half, dtype=np.float64) * 2.0) / head_dim)
    positions = np.arange(offset, offset + seq, dtype=np.float64)
    angles = np.outer(positions, inv_freq)
    # (seq, 1, half) broadcasts across heads
    return np.cos(angles)[:, None, :].astype(dtype), np.sin(angles)[:, None, :].astype(dtype)


def rope_apply(x: Tensor, base: float = 10000.0, offset: int = 0) -> Tensor:
    """Rotary position embedding on ``[..., seq, heads, head_dim]``.

    Feature pairs (2i, 2i+1) at position p are rotated by ``p * base**(-2i/head_dim)``.
    """
    if x.ndim < 3:
        raise DimensionError(f"rope_apply expects [..., seq, heads, head_dim], got {x.shape}")
    seq, head_dim = x.shape[-3], x.shape[-1]
    if head_dim % 2:
        raise DimensionError(f"rope_apply needs an even head_dim, got {head_dim}")
    cos, sin = _rope_tables(seq, head_dim, base, offset, x.data.dtype)
    xd = x.data
    even, odd = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _result("rope", out, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target entries of ``[n, V]`` logits."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target id out of range [0, {vocab})")
    ld = logits.data
    z = ld - np.max(ld, axis=-1, keepdims=True)
    e = np.exp(z)
    total = np.sum(e, axis=-1, keepdims=True)
    rows = np.arange(n)
    logp = z[rows, targets] - np.log(total[:, 0])
    loss = np.asarray(-np.mean(logp), dtype=ld.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        p = e / total
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _result("cross_entropy", loss, (logits,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor._wrap(keep, False))


# -----------------------------------------------------------------------------
# Gradient oracle
# -----------------------------------------------------------------------------


def _scalar(value: Union[Tensor, float]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: TensorLike, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, evaluated in 64-bit."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base.copy(), dtype=np.float64)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base.copy(), dtype=np.float64)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad, dtype=np.float64)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / scale


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape and central-difference gradients.

    ``loss_fn`` must rebuild the forward pass from ``params`` each call;
    parameters are perturbed in place and restored.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
