"""Dense tensors with reverse-mode differentiation on top of numpy.

Only what the four-stream transformer, the flow loss and the LoRA updates
need is implemented. Every op records a closure mapping the output gradient
to the gradients of its inputs; :func:`backward` walks the recorded graph
once in reverse topological order.

Broadcasting follows numpy's right-aligned rules; gradients are summed back
onto the original operand shape.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

CHECK_FINITE = True

# additive bias values at or below this are treated as "masked" (-inf)
MASK_THRESHOLD = -1e8
NEG_SENTINEL = {np.dtype(np.float32): -1e9, np.dtype(np.float64): -1e30}

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A float32/float64 array that can take part in a gradient graph.

    Leaves created with ``requires_grad=True`` are trainable parameters and
    receive ``.grad`` after :func:`backward`. Leaves with
    ``requires_grad=False`` are frozen: no graph is recorded through them and
    their ``grad`` stays ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, held-out losses)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _result(x.data * s, (x,), backward, "silu")


# ------------------------------------------------------------------ reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shape {pred.shape} != {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _result(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), backward, "mse")


# --------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    return _result(data, xs, backward, "concat")


def take(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _result(x.data[index], (x,), backward, "take")


# --------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul: operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dims {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear_lora(x: Tensor, W: Tensor, A: Tensor | None = None, B: Tensor | None = None,
                scale: float = 1.0) -> Tensor:
    """``x @ (W + scale * A @ B)`` evaluated as ``x@W + scale * (x@A) @ B``.

    Passing ``A=B=None`` gives the plain frozen projection.
    """
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear_lora: x width {x.shape[-1]} != W rows {W.shape[0]}")
    base = x.data @ W.data
    if A is None and B is None:
        def backward_base(g):
            gx = g @ W.data.T if x.requires_grad else None
            gw = _flat(x.data).T @ _flat(g) if W.requires_grad else None
            return gx, gw

        return _result(base, (x, W), backward_base, "linear")

    if A is None or B is None:
        raise DimensionError("linear_lora: A and B must be given together")
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0] or A.shape[1] < 1:
        raise DimensionError(f"linear_lora: bad adapter shapes {A.shape}, {B.shape}")
    if A.shape[0] != W.shape[0] or B.shape[1] != W.shape[1]:
        raise DimensionError(f"linear_lora: adapter {A.shape}x{B.shape} does not match W {W.shape}")
    xa = x.data @ A.data
    out = base + scale * (xa @ B.data)

    def backward(g):
        g2 = _flat(g)
        gx = gw = ga = gb = None
        if x.requires_grad:
            gx = g @ W.data.T + scale * ((g @ B.data.T) @ A.data.T)
        if W.requires_grad:
            gw = _flat(x.data).T @ g2
        if A.requires_grad:
            ga = scale * (_flat(x.data).T @ (g2 @ B.data.T))
        if B.requires_grad:
            gb = scale * (_flat(xa).T @ g2)
        return gx, gw, ga, gb

    return _result(out, (x, W, A, B), backward, "linear_lora")


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


# -------------------------------------------------------------- normalization


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    gain = as_tensor(gain, x)
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm: gain {gain.shape} vs width {x.shape[-1]}")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r

    def backward(g):
        gx = ggain = None
        if x.requires_grad:
            u = g * gain.data
            gx = r * u - x.data * (r ** 3) * np.mean(u * x.data, axis=-1, keepdims=True)
        if gain.requires_grad:
            ggain = _flat(g * xhat).sum(axis=0)
        return gx, ggain

    return _result(xhat * gain.data, (x, gain), backward, "rms_norm")


def masked_softmax(logits: Tensor, bias) -> Tensor:
    """Softmax over the last axis of ``logits + bias``.

    ``bias`` is an additive matrix of zeros and "-inf" (any value at or
    below ``MASK_THRESHOLD``). Masked entries come out exactly zero. The
    bias is a constant: no gradient flows into it.
    """
    b = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=logits.dtype)
    try:
        shape = np.broadcast_shapes(logits.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"masked_softmax: bias {b.shape} vs logits {logits.shape}") from exc
    if shape != logits.shape:
        raise DimensionError("masked_softmax: bias must broadcast onto logits")
    masked = b <= MASK_THRESHOLD
    if masked.all(axis=-1).any():
        raise ValueError("masked_softmax: a row is masked everywhere")
    b_eff = np.where(masked, -np.inf, b).astype(logits.dtype)
    z = logits.data + b_eff
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p.astype(logits.dtype, copy=False), (logits,), backward, "masked_softmax")


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``arr`` (mutated in place, restored)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backward() and finite differences over ``params``."""
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(lambda: float(loss_fn().data), p.data, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ----------------------------------------------------------------- checkpoint

_MAGIC = b"MCKP"
_VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FROM_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays in the little-endian MCKP container."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not an MCKP checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dt = _FROM_TAG[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += size
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
