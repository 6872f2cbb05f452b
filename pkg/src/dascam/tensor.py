"""Dense float32 tensors with taped reverse-mode differentiation.

Values are immutable float32 arrays. Tracing is opt-in: ops only append to a
tape while a ``Graph`` is active on the current thread, and only when at least
one input is itself traced on that graph. Evaluation code therefore runs at
plain numpy speed with no bookkeeping.

Numerics: scalars are stored as float32; reductions and the inner loops of
matmul/conv accumulate in float64 before rounding back. Scalar reductions
additionally keep their float64 value (``Tensor.f64``) so finite-difference
checks are not drowned by float32 rounding of large sums.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "TraceError",
    "constant", "add", "sub", "mul", "scalar_mul", "matmul", "conv2d",
    "relu", "max_pool2d", "avg_pool2d", "sum", "mean", "square",
    "concat", "getitem", "broadcast", "reshape", "custom_op",
    "backward", "finite_diff_check",
    "save_tensors", "load_tensors",
]

_builtin_sum = sum  # shadowed below by the reduction op


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class TraceError(RuntimeError):
    """Raised on tape misuse: wrong graph, wrong thread, untraced root."""


class Tensor:
    """Immutable dense float32 array, optionally attached to a Graph node."""

    __slots__ = ("data", "node", "f64")

    def __init__(self, data, node=None, f64=None):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        else:
            arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.f64 = f64  # float64 readout for scalar reductions, else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.f64) if self.f64 is not None else float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data) if self.node is not None else self

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f", node={self.node.nid}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """An untraced tensor; gradients never flow into it."""
    return Tensor(data)


class Node:
    """One tape record: op kind, parent node ids, output value, vjp closure."""

    __slots__ = ("nid", "op", "parents", "value", "vjp")

    def __init__(self, nid, op, parents, value, vjp):
        self.nid = nid
        self.op = op
        self.parents = parents  # tuple of parent node ids
        self.value = value      # output Tensor
        self.vjp = vjp          # grad_out ndarray -> list of ndarray|None per parent


class Graph:
    """Reverse-mode tape. Confined to the thread that created it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> "Graph":
        self._check_thread()
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def _check_thread(self):
        if threading.get_ident() != self._thread:
            raise TraceError("Graph used from a thread other than its owner")

    def leaf(self, data) -> Tensor:
        """Register a differentiable input; returns the traced tensor."""
        self._check_thread()
        t = _as_tensor(data)
        node = Node(len(self.nodes), "leaf", (), None, None)
        out = Tensor(t.data, node=node)
        node.value = out
        self.nodes.append(node)
        return out

    def _append(self, op, out_data, parents, vjp, f64=None) -> Tensor:
        self._check_thread()
        node = Node(len(self.nodes), op, tuple(p.node.nid for p in parents), None, vjp)
        out = Tensor(out_data, node=node, f64=f64)
        node.value = out
        self.nodes.append(node)
        return out


_tls = threading.local()


def _stack() -> list:
    stack = getattr(_tls, "graphs", None)
    if stack is None:
        stack = []
        _tls.graphs = stack
    return stack


def _current() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


def _record(op: str, out_data, inputs: Sequence[Tensor],
            vjp_all: Callable[[np.ndarray], Sequence[np.ndarray | None]],
            f64=None) -> Tensor:
    """Wrap op output; append a tape node iff a graph is active and fed.

    ``vjp_all`` receives d(root)/d(out) and must return one gradient per
    entry of ``inputs`` (None for inputs that need no gradient). Untraced
    inputs are constants; their slots are dropped from the node.
    """
    g = _current()
    if g is None:
        return Tensor(out_data, f64=f64)
    traced = [t for t in inputs if t.node is not None]
    if not traced:
        return Tensor(out_data, f64=f64)
    for t in traced:
        if t.node.nid >= len(g.nodes) or g.nodes[t.node.nid] is not t.node:
            raise TraceError(f"op '{op}': input traced on a different graph")
    traced_pos = [i for i, t in enumerate(inputs) if t.node is not None]

    def vjp(grad_out):
        grads = vjp_all(grad_out)
        return [grads[i] for i in traced_pos]

    return g._append(op, out_data, traced, vjp, f64=f64)


def custom_op(op: str, out_data, inputs: Sequence[Tensor],
              vjp_all: Callable[[np.ndarray], Sequence[np.ndarray | None]],
              f64=None) -> Tensor:
    """Public hook for modules that define their own differentiable ops."""
    return _record(op, out_data, [_as_tensor(t) for t in inputs], vjp_all, f64=f64)


def backward(graph: Graph, root: Tensor) -> dict[int, Tensor]:
    """Gradient of ``root`` w.r.t. every node of ``graph``.

    Returns {node id: gradient tensor}; nodes not reaching the root get
    all-zero gradients. Contributions are accumulated in float64 and
    rounded to float32 once per node.
    """
    graph._check_thread()
    if root.node is None or graph.nodes[root.node.nid] is not root.node:
        raise TraceError("backward root is not traced on this graph")
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")

    acc: list[np.ndarray | None] = [None] * len(graph.nodes)
    acc[root.node.nid] = np.ones(root.shape, dtype=np.float64)
    for node in reversed(graph.nodes):
        g_out = acc[node.nid]
        if g_out is None or node.vjp is None:
            continue
        for pid, g_in in zip(node.parents, node.vjp(g_out.astype(np.float32))):
            if g_in is None:
                continue
            if acc[pid] is None:
                acc[pid] = np.asarray(g_in, dtype=np.float64).copy()
            else:
                acc[pid] += g_in

    table: dict[int, Tensor] = {}
    for node in graph.nodes:
        g = acc[node.nid]
        if g is None:
            table[node.nid] = Tensor(np.zeros(node.value.shape, dtype=np.float32))
        else:
            table[node.nid] = Tensor(g.astype(np.float32))
    return table


def grad_of(table: dict[int, Tensor], t: Tensor) -> Tensor:
    """Look up a traced tensor's gradient in a backward table."""
    if t.node is None:
        raise TraceError("gradient requested for an untraced tensor")
    return table[t.node.nid]


# ---------------------------------------------------------------------------
# elementwise / linear ops


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(np.float32)


def _check_broadcastable(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable("add", a, b)
    out = a.data + b.data
    return _record("add", out, [a, b],
                   lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable("sub", a, b)
    out = a.data - b.data
    return _record("sub", out, [a, b],
                   lambda g: [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable("mul", a, b)
    out = a.data * b.data
    return _record("mul", out, [a, b],
                   lambda g: [_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)])


def scalar_mul(t: Tensor, s: float) -> Tensor:
    t = _as_tensor(t)
    s = float(s)
    f64 = t.f64 * s if t.f64 is not None else None
    return _record("scalar_mul", t.data * np.float32(s), [t],
                   lambda g: [g * np.float32(s)], f64=f64)


def square(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    return _record("square", t.data * t.data, [t], lambda g: [2.0 * t.data * g])


def relu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    mask = t.data > 0  # subgradient 0 at exactly 0
    return _record("relu", np.where(mask, t.data, np.float32(0.0)), [t],
                   lambda g: [g * mask])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(np.float32)

    def vjp(g):
        g64 = g.astype(np.float64)
        da = (g64 @ b.data.astype(np.float64).T).astype(np.float32)
        db = (a.data.astype(np.float64).T @ g64).astype(np.float32)
        return [da, db]

    return _record("matmul", out, [a, b], vjp)


def broadcast(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {t.shape} to {shape}") from None
    return _record("broadcast", np.ascontiguousarray(out), [t],
                   lambda g: [_unbroadcast(g.astype(np.float64), t.shape)])


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {t.shape} as {shape}") from None
    return _record("reshape", out, [t], lambda g: [g.reshape(t.shape)],
                   f64=t.f64 if t.size == 1 else None)


def getitem(t: Tensor, key) -> Tensor:
    """Basic slicing (the tape's slice op); gradients scatter back."""
    t = _as_tensor(t)
    out = t.data[key]

    def vjp(g):
        buf = np.zeros(t.shape, dtype=np.float32)
        buf[key] = g
        return [buf]

    return _record("slice", np.ascontiguousarray(out), [t], vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return [np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                for i in range(len(ts))]

    return _record("concat", out, ts, vjp)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    out64 = t.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    f64 = float(out64) if out64.size == 1 else None

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, t.shape).astype(np.float32)]

    return _record("sum", out64.astype(np.float32), [t], vjp, f64=f64)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    count = 1
    for a in axes:
        count *= t.shape[a]
    out64 = t.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64)
    f64 = float(out64) if out64.size == 1 else None
    inv = np.float32(1.0 / count)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [(np.broadcast_to(g, t.shape) * inv).astype(np.float32)]

    return _record("mean", out64.astype(np.float32), [t], vjp, f64=f64)


# ---------------------------------------------------------------------------
# convolution and pooling (NHWC; weights [kh, kw, Cin, Cout])


def _sliding_patches(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,H,W,C] -> [N, Ho, Wo, kh, kw, C] strided view."""
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    v = v[:, ::stride, ::stride]
    return v.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, float64 accumulation."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need x[N,H,W,C] and w[kh,kw,Cin,Cout], "
                         f"got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: channel mismatch between x {x.shape} and w {w.shape}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input "
                         f"{(h + 2 * padding, wd + 2 * padding)}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    patches = _sliding_patches(xp, kh, kw, stride)
    ho, wo = patches.shape[1], patches.shape[2]
    cols = patches.reshape(n * ho * wo, kh * kw * cin).astype(np.float64)
    wmat = w.data.reshape(kh * kw * cin, cout).astype(np.float64)
    out = (cols @ wmat).reshape(n, ho, wo, cout).astype(np.float32)

    def vjp(g):
        g64 = g.reshape(n * ho * wo, cout).astype(np.float64)
        dw = (cols.T @ g64).reshape(w.shape).astype(np.float32)
        # dx: dilate grad by stride, pad, correlate with spatially-flipped w
        hd, wd2 = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        gd = np.zeros((n, hd, wd2, cout), dtype=np.float32)
        gd[:, ::stride, ::stride] = g
        ph, pw = kh - 1 - padding, kw - 1 - padding
        gp = np.pad(gd, ((0, 0), (max(ph, 0), max(ph, 0)), (max(pw, 0), max(pw, 0)), (0, 0)))
        if ph < 0:
            gp = gp[:, -ph:gp.shape[1] + ph]
        if pw < 0:
            gp = gp[:, :, -pw:gp.shape[2] + pw]
        wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2)  # [kh,kw,Cout,Cin]
        gpat = _sliding_patches(gp, kh, kw, 1)
        gh, gw = gpat.shape[1], gpat.shape[2]
        gcols = gpat.reshape(n * gh * gw, kh * kw * cout).astype(np.float64)
        wfm = wflip.reshape(kh * kw * cout, cin).astype(np.float64)
        dx_core = (gcols @ wfm).reshape(n, gh, gw, cin).astype(np.float32)
        dx = np.zeros(x.shape, dtype=np.float32)
        dx[:, :gh, :gw] = dx_core
        return [dx, dw]

    return _record("conv2d", out, [x, w], vjp)


def _pool_prepare(op, x, size):
    if x.ndim != 4:
        raise ShapeError(f"{op}: need x[N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    if h < size or w < size:
        raise ShapeError(f"{op}: window {size} larger than input {(h, w)}")
    ho, wo = h // size, w // size
    clipped = x.data[:, :ho * size, :wo * size]
    windows = clipped.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 2, 4, 5)
    return n, h, w, c, ho, wo, windows.reshape(n, ho, wo, size * size, c)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first window slot."""
    x = _as_tensor(x)
    n, h, w, c, ho, wo, win = _pool_prepare("max_pool2d", x, size)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def vjp(g):
        buf = np.zeros((n, ho, wo, size * size, c), dtype=np.float32)
        np.put_along_axis(buf, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        buf = buf.reshape(n, ho, wo, size, size, c).transpose(0, 1, 3, 2, 4, 5)
        dx = np.zeros(x.shape, dtype=np.float32)
        dx[:, :ho * size, :wo * size] = buf.reshape(n, ho * size, wo * size, c)
        return [dx]

    return _record("max_pool2d", np.ascontiguousarray(out), [x], vjp)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    x = _as_tensor(x)
    n, h, w, c, ho, wo, win = _pool_prepare("avg_pool2d", x, size)
    out = win.mean(axis=3, dtype=np.float64).astype(np.float32)
    inv = np.float32(1.0 / (size * size))

    def vjp(g):
        spread = np.repeat(np.repeat(g * inv, size, axis=1), size, axis=2)
        dx = np.zeros(x.shape, dtype=np.float32)
        dx[:, :ho * size, :wo * size] = spread
        return [dx]

    return _record("avg_pool2d", out, [x], vjp)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Max relative error between taped gradient of f and central differences.

    ``f`` must be pure and return a scalar tensor. Relative error per
    coordinate is |analytic - fd| / (|fd| + 1e-8).
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    x = _as_tensor(x)
    with Graph() as g:
        xt = g.leaf(x)
        y = f(xt)
    analytic = grad_of(backward(g, y), xt).data.astype(np.float64).ravel()

    base = x.data.ravel()
    fd = np.empty(base.size, dtype=np.float64)
    for i in range(base.size):
        # bump in float32 space and divide by the realized spread, so the
        # check measures the derivative of the tensor program actually run
        up = base.copy()
        up[i] = np.float32(float(base[i]) + step)
        dn = base.copy()
        dn[i] = np.float32(float(base[i]) - step)
        hi = f(Tensor(up.reshape(x.shape))).item()
        lo = f(Tensor(dn.reshape(x.shape))).item()
        fd[i] = (hi - lo) / (float(up[i]) - float(dn[i]))
    rel = np.abs(analytic - fd) / (np.abs(fd) + 1e-8)
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# serialization: "DAST" records, all integers little-endian u32, payload f32


_MAGIC = b"DAST"
_VERSION = 1


def _tensor_bytes(t: Tensor) -> bytes:
    head = _MAGIC + struct.pack("<II", _VERSION, t.ndim)
    dims = struct.pack(f"<{t.ndim}I", *t.shape) if t.ndim else b""
    payload = t.data.astype("<f4").tobytes(order="C")
    return head + dims + payload


def save_tensors(path, tensors: Sequence[Tensor]) -> None:
    """Write tensors as consecutive DAST records."""
    with open(path, "wb") as fh:
        for t in tensors:
            fh.write(_tensor_bytes(_as_tensor(t)))


def load_tensors(path) -> list[Tensor]:
    """Read consecutive DAST records until end of file."""
    out = []
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0
    while off < len(blob):
        if blob[off:off + 4] != _MAGIC:
            raise ValueError(f"{path}: bad magic at offset {off}")
        version, rank = struct.unpack_from("<II", blob, off + 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        off += 12
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out.append(Tensor(arr))
    return out
