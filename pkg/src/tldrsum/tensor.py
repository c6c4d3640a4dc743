"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is exactly what the summarizer needs: matrix products, Kronecker
products, row softmax, layer norm, elementwise math, and a handful of
reshaping/indexing helpers. Ops record onto the innermost active `GradTape`
(per thread); without a tape they are plain numpy and cost nothing extra.

Tensors are immutable after construction except for the `grad` buffer that
`GradTape.backward` fills in. Rank is capped at 3; scalars are carried as
shape-(1,) tensors.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import Stream

NEG_INF = -1e30  # additive mask value; exp() underflows to exactly 0.0


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the rank-3 cap")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "GradTape | None" = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float) -> Tensor:
    return Tensor(np.array([float(value)]))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


WEIGHT_STD = 0.02


def gaussian_param(stream: Stream, shape, std: float = WEIGHT_STD) -> Tensor:
    """Fresh trainable tensor with N(0, std^2) entries from `stream`."""
    shape = tuple(shape)
    n = int(np.prod(shape))
    return Tensor(stream.normal(n, 0.0, std).reshape(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# tape


_tls = threading.local()


def _stack() -> list:
    s = getattr(_tls, "stack", None)
    if s is None:
        s = []
        _tls.stack = s
    return s


def _active_tape() -> "GradTape | None":
    s = _stack()
    return s[-1] if s else None


class _Record:
    __slots__ = ("out", "inputs", "back")

    def __init__(self, out, inputs, back):
        self.out = out
        self.inputs = inputs
        self.back = back


class GradTape:
    """Ordered record of ops; backward replays it in exact reverse order.

    One tape per training step, confined to the thread that opened it.
    A tape can be replayed once; reuse raises GradError.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _stack().pop()
        return False

    def _add(self, out: Tensor, inputs: Sequence[Tensor], back: Callable) -> None:
        out._tape = self
        self._records.append(_Record(out, inputs, back))

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise GradError("tape already replayed; build a fresh tape per step")
        if loss._tape is not self:
            raise GradError("loss is not attached to this tape (detached graph)")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = adjoint.get(id(rec.out))
            if g is None:
                continue
            grads = rec.back(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                tensors[id(inp)] = inp
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = gi if prev is None else prev + gi
        for tid, t in tensors.items():
            if t.requires_grad:
                g = adjoint.get(tid)
                if g is not None:
                    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Replay the tape that produced `loss`, populating `.grad` buffers."""
    if loss._tape is None:
        raise GradError("loss was not produced under an active tape")
    loss._tape.backward(loss)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], back: Callable) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._add(out, tuple(inputs), back)
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum away axes that broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank>=2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {x.shape}")
    return _emit(x.data.T, (x,), lambda g: (g.T,))


def kron(p: Tensor, q: Tensor) -> Tensor:
    """Kronecker product: out[i*c+k, j*d+l] = p[i,j] * q[k,l]."""
    if p.data.ndim != 2 or q.data.ndim != 2:
        raise ShapeError(f"kron expects rank-2 operands, got {p.shape} x {q.shape}")
    a, b = p.shape
    c, d = q.shape
    out = np.kron(p.data, q.data)

    def back(g):
        g4 = g.reshape(a, c, b, d)
        gp = np.einsum("ikjl,kl->ij", g4, q.data) if p.requires_grad else None
        gq = np.einsum("ikjl,ij->kl", g4, p.data) if q.requires_grad else None
        return gp, gq

    return _emit(out, (p, q), back)


def vdot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"vdot expects equal rank-1 shapes, got {a.shape} x {b.shape}")
    out = np.array([a.data @ b.data])

    def back(g):
        ga = g[0] * b.data if a.requires_grad else None
        gb = g[0] * a.data if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), back)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [t.shape[0] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=0)

    def back(g):
        grads, off = [], 0
        for t, s in zip(parts, sizes):
            grads.append(g[off : off + s] if t.requires_grad else None)
            off += s
        return grads

    return _emit(out, parts, back)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [t.shape[1] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=1)

    def back(g):
        grads, off = [], 0
        for t, s in zip(parts, sizes):
            grads.append(g[:, off : off + s] if t.requires_grad else None)
            off += s
        return grads

    return _emit(out, parts, back)


def slice_rows(x: Tensor, i0: int, i1: int) -> Tensor:
    out = x.data[i0:i1].copy()

    def back(g):
        gx = np.zeros_like(x.data)
        gx[i0:i1] = g
        return (gx,)

    return _emit(out, (x,), back)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    out = x.data[:, j0:j1].copy()

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, j0:j1] = g
        return (gx,)

    return _emit(out, (x,), back)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx].copy()

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(out, (table,), back)


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name} shapes disagree: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def back(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _emit(x.data + float(c), (x,), lambda g: (g,))


def smul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a shape-(1,) scalar tensor (both sides differentiable)."""
    if s.size != 1:
        raise ShapeError(f"smul scalar must have one element, got shape {s.shape}")
    sv = s.data.reshape(-1)[0]

    def back(g):
        gx = g * sv if x.requires_grad else None
        gs = np.array([(g * x.data).sum()]) if s.requires_grad else None
        return gx, gs

    return _emit(x.data * sv, (x, s), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add a rank-1 vector along the last axis."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes disagree: {x.shape} + {b.shape}")

    def back(g):
        gx = g if x.requires_grad else None
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if b.requires_grad else None
        return gx, gb

    return _emit(x.data + b.data, (x, b), back)


def add_colvec(x: Tensor, v: Tensor) -> Tensor:
    """Broadcast-add a rank-1 vector down the columns of a matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ShapeError(f"add_colvec shapes disagree: {x.shape} + {v.shape}")

    def back(g):
        gx = g if x.requires_grad else None
        gv = g.sum(axis=1) if v.requires_grad else None
        return gx, gv

    return _emit(x.data + v.data[:, None], (x, v), back)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return _emit(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0.0),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    if not (x.data > 0.0).all():
        raise NumericError("log of non-positive value")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)
    return _emit(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.array([x.data.sum()]), (x,), lambda g: (np.full_like(x.data, g[0]),))


def mean_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows expects rank 2, got {x.shape}")
    m = x.shape[0]
    out = x.data.mean(axis=0)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / m, x.shape).copy(),))


def sqnorm_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"sqnorm_rows expects rank 2, got {x.shape}")
    out = (x.data * x.data).sum(axis=1)
    return _emit(out, (x,), lambda g: (2.0 * x.data * g[:, None],))


# ---------------------------------------------------------------------------
# normalizations


def softmax_rows(x: Tensor) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows on non-finite input")
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError("log_softmax_rows on non-finite input")
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects rank 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _emit(out, (x,), back)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row zero mean / unit variance, then affine. Epsilon inside the sqrt."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects rank 2, got {x.shape}")
    n = x.shape[1]
    if n < 2:
        raise ShapeError("layer_norm needs at least 2 columns")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=0)
        if bias.requires_grad:
            gbias = g.sum(axis=0)
        if x.requires_grad:
            gp = g * gain.data
            gx = inv * (
                gp
                - gp.mean(axis=1, keepdims=True)
                - xhat * (gp * xhat).mean(axis=1, keepdims=True)
            )
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# gradient oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    `f` must be deterministic; a double forward evaluation guards against
    hidden randomness.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check eps {eps} outside [1e-7, 1e-3]")

    def value_at(arr: np.ndarray) -> float:
        return f(Tensor(arr)).item()

    base = value_at(x.data)
    again = value_at(x.data)
    if base != again:
        raise NumericError("grad_check target is non-deterministic (double evaluation mismatch)")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        loss = f(leaf)
    tape.backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        up = value_at(probe.reshape(x.shape))
        probe[i] = flat[i] - eps
        down = value_at(probe.reshape(x.shape))
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization: "TNSR" magic, u32 rank, u64 dims, f64 payload, little-endian


TENSOR_MAGIC = b"TNSR"


def tensor_to_bytes(x: Tensor) -> bytes:
    arr = np.ascontiguousarray(x.data, dtype="<f8")
    head = struct.pack("<4sI", TENSOR_MAGIC, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes()


def tensor_from_bytes(blob: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor; returns (tensor, offset past its payload)."""
    magic, rank = struct.unpack_from("<4sI", blob, offset)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    if not 1 <= rank <= 3:
        raise ValueError(f"unsupported tensor rank {rank}")
    offset += 8
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(dims))
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
    return Tensor(data.copy()), offset + 8 * count


def save_tensor(path, x: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    t, end = tensor_from_bytes(blob)
    if end != len(blob):
        raise ValueError(f"trailing bytes after tensor payload in {path}")
    return t
