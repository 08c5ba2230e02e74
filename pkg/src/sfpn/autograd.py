"""Dense 4-d tensors with reverse-mode autodiff.

Only the handful of operators the pyramid network needs are provided. Every
value is an ``n x c x h x w`` array; there is no broadcasting.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """A 4-d array that optionally records how it was computed."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dims must be positive, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)


_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (inference)."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._op = op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"backward needs a 1x1x1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        assert mark != 1, "cycle in autodiff graph"
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and state.get(id(p)) != 2:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check_finite(g, "backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# ---------------------------------------------------------------- operators


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation via im2col.

    ``weight`` is ``[outC, inC, kH, kW]``; ``bias`` is stored as a
    ``1 x outC x 1 x 1`` tensor.
    """
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output size {oh}x{ow} is not positive")
    if bias is not None and bias.size != oc:
        raise ValueError("conv2d bias length must equal output channels")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, oh, ow, c, kh, kw) -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(oc, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.reshape(1, oc)
    out = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))

    def _backward(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0).reshape(bias.shape) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _backward, "conv2d")


def resize_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """``dst x src`` interpolation matrix with half-pixel centres."""
    m = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for d in range(dst):
        s = (d + 0.5) * scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, src - 1)
        f = s - i0
        m[d, i0] += 1.0 - f
        m[d, i1] += f
    return m


_RESIZE_CACHE: dict[tuple, np.ndarray] = {}


def _cached_resize_matrix(src: int, dst: int, dtype) -> np.ndarray:
    key = (src, dst, np.dtype(dtype).str)
    m = _RESIZE_CACHE.get(key)
    if m is None:
        m = resize_matrix(src, dst, dtype)
        m.setflags(write=False)
        _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1x1")
    n, c, h, w = x.shape
    ry = _cached_resize_matrix(h, out_h, x.dtype)
    rx = _cached_resize_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def _backward(g: np.ndarray):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), _backward, "bilinear_resize")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(items: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of equally shaped tensors."""
    if not items:
        raise ValueError("add_n needs at least one operand")
    out = items[0]
    for t in items[1:]:
        out = add(out, t)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_scalar(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _make(a.data * k, (a,), lambda g: (g * k,), "mul_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements as a 1x1x1x1 tensor."""
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1, 1, 1, 1)
    return _make(out, (a,), lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),), "sum")


def custom_op(inputs: Sequence[Tensor], out: np.ndarray, backward_fn, name: str) -> Tensor:
    """Record a fused operator with a hand-written backward."""
    return _make(np.asarray(out).reshape(out.shape if np.ndim(out) == 4 else (1, 1, 1, 1)),
                 inputs, backward_fn, name)


# ----------------------------------------------------------- parameters


class ParamStore:
    """Named parameters in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count(self, prefix: str | Iterable[str] | None = None) -> int:
        if prefix is None:
            return sum(t.size for t in self._params.values())
        prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
        if not prefixes:
            return 0
        return sum(t.size for n, t in self._params.items() if n.startswith(prefixes))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self._params.items())

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name])
            if arr.size != t.size:
                raise ValueError(f"size mismatch for {name!r}: {arr.shape} vs {t.shape}")
            t.data = arr.reshape(t.shape).astype(t.dtype)


class SGD:
    """SGD with heavy-ball momentum: v = m*v + g; w = w - lr*v."""

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        for name, p in self.params:
            v = self.velocity.get(name)
            v = p.grad.astype(p.dtype) if v is None else self.momentum * v + p.grad
            v = v.astype(p.dtype, copy=False)
            self.velocity[name] = v
            p.data = p.data - self.lr * v
            p.grad = None


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> ParamStore:
    """Functional form of one momentum-SGD update; ``velocity`` is updated in place."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return params


# ----------------------------------------------------------- checkpoints

MAGIC = b"SFPN"
FORMAT_VERSION = 1


def save_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays (up to 4 dims) as little-endian float64."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.ndim > 4:
            raise ValueError(f"{name!r} has more than 4 dims")
        dims = (1,) * (4 - arr.ndim) + arr.shape
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("parameter name too long")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<4I", *dims))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def load_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise ValueError("not an SFPN checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dims = struct.unpack_from("<4I", blob, pos)
            pos += 16
            n = int(np.prod(dims))
            if pos + 8 * n > len(blob):
                raise ValueError("truncated checkpoint payload")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
            pos += 8 * n
    except struct.error as exc:
        raise ValueError("truncated checkpoint header") from exc
    return out
