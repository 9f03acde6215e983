"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the policy/value and reasoner networks are
provided: valid strided convolution, dense layers, elementwise activations,
softmax/log-softmax and a handful of arithmetic and reduction ops.  Every
op records its parents and a backward closure; :func:`backward` walks the
recorded :class:`Graph` in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, NumericalError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (forward-only inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d array with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Recorded operations reachable from an output, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Optional[Graph] = None, retain: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor requiring grad.

    Gradients accumulate across calls; callers zero them between steps.
    Intermediate tensors listed in ``retain`` get their gradient stored in
    ``.grad`` (overwritten, not accumulated).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    # intermediate gradients live in a side table so leaves accumulate cleanly
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(t) for t in retain}
    for t in retain:
        t.grad = np.zeros_like(t.data)
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in keep and node._backward is not None:
            node.grad = np.array(g, copy=True)
        if node._backward is None:
            _accum(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accum(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # gradient at exactly zero is zero
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return _make(out.astype(x.dtype), (a,), lambda g: (g * s,), "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights.T + bias`` for x of shape [n] or [batch, n]."""
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input has {x.shape[-1]} features, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weights.shape[0]},)")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        if g.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, weights, bias), bw, "dense")


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided cross-correlation.

    ``x`` is [C_in, H, W] or [N, C_in, H, W]; ``kernels`` is
    [C_out, C_in, kH, kW].  Output spatial size is ``(H - kH)//stride + 1``.
    """
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects [C,H,W] or [N,C,H,W] input and a 4-d kernel")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = kernels.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {cin}")
    if h < kh or w < kw:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    oh, ow = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    xd = np.ascontiguousarray(xd)
    s0, s1, s2, s3 = xd.strides
    patches = as_strided(
        xd, shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    cols = patches.reshape(n * oh * ow, c * kh * kw)
    kflat = kernels.data.reshape(cout, -1)
    out = (cols @ kflat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def bw(g):
        g4 = g[None] if unbatched else g
        gflat = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gflat.T @ cols).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            dcols = (gflat @ kflat).reshape(n, oh, ow, c, kh, kw)
            gx = np.zeros((n, c, h, w), dtype=xd.dtype)
            hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if unbatched:
                gx = gx[0]
        return gx, gk

    return _make(out, (x, kernels), bw, "conv2d")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to a [C,H,W] or [N,C,H,W] activation."""
    return add(x, reshape(bias, (bias.shape[0], 1, 1)))


# ---------------------------------------------------------------------------
# Parameters, optimizers, checkpoints
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DEFAULT_DTYPE)


class ParamSet:
    """Ordered, named collection of parameter tensors."""

    def __init__(self, items: Iterable[tuple] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, dtype=DEFAULT_DTYPE)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_arrays(self, arrays) -> None:
        for k, arr in arrays.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            t = self._params[k]
            if t.shape != tuple(arr.shape):
                raise ShapeError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params.items():
            self.state.m[name] = np.zeros_like(t.data)
            self.state.v[name] = np.zeros_like(t.data)

    def step(self) -> None:
        st = self.state
        for name, t in self.params.items():
            if t.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward first")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, t in self.params.items():
            g = t.grad
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= (st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(t.dtype)


class SGD:
    """Plain gradient descent; kept for reproducibility studies."""

    def __init__(self, params: ParamSet, lr: float):
        self.params = params
        self.state = OptimizerState(lr=lr)

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward first")
        self.state.step += 1
        for _, t in self.params.items():
            t.data -= (self.state.lr * t.grad).astype(t.dtype)


def make_optimizer(kind: str, params: ParamSet, lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'adam' or 'sgd')")


def check_finite(t: Tensor, what: str = "value") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite {what}")


# Checkpoint layout: b"A2CR", version byte, then for each parameter
# <u32 name_len><name utf-8><u32 rank><u32 dims...><f32 data...>, all little-endian.
CHECKPOINT_MAGIC = b"A2CR"
CHECKPOINT_VERSION = 1


def dump_params(params: ParamSet) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out.append(CHECKPOINT_VERSION)
    for name, t in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(out)


def parse_params(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an A2CR checkpoint (bad magic)")
    if len(buf) < 5 or buf[4] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {buf[4] if len(buf) > 4 else None}")
    pos = 5
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(buf):
                raise ValueError(f"truncated data for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"corrupt checkpoint: {exc}") from exc
    return arrays


def save_params(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return parse_params(fh.read())
