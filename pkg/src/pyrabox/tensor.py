"""Dense NCHW tensors with tape-style reverse-mode differentiation.

Every differentiable op records a node carrying a global sequence number.
``backward`` collects the nodes reachable from a scalar loss and replays
their adjoints in exactly the reverse of execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

L2_EPS = 1e-12

_seq = itertools.count()


class _Settings:
    dtype = np.float32
    grad_enabled = True
    checked = False


_settings = _Settings()


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class DimensionError(ContractError):
    """Raised on incompatible shapes, channel groups or kernel sizes."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    prev = _settings.dtype
    _settings.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _settings.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _settings.grad_enabled
    _settings.grad_enabled = False
    try:
        yield
    finally:
        _settings.grad_enabled = prev


@contextlib.contextmanager
def checked_mode() -> Iterator[None]:
    """Assert every op output is finite while active."""
    prev = _settings.checked
    _settings.checked = True
    try:
        yield
    finally:
        _settings.checked = prev


def default_dtype():
    return _settings.dtype


@dataclass(eq=False)
class _Node:
    seq: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A numpy array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _settings.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / float(scalar))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward_fn, op: str) -> Tensor:
    if _settings.checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs = _settings.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._node = _Node(next(_seq), op, inputs, backward_fn) if needs else None
    return out


class Graph:
    """Operations reachable from a root, ordered by execution."""

    def __init__(self, root: Tensor):
        nodes: dict[int, _Node] = {}
        stack = [root]
        seen: set[int] = set()
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            nodes[t._node.seq] = (t, t._node)
            stack.extend(inp for inp in t._node.inputs if inp.requires_grad)
        self.entries = [nodes[k] for k in sorted(nodes)]

    def __len__(self) -> int:
        return len(self.entries)

    def reverse(self):
        return reversed(self.entries)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Leaf gradients are accumulated into any existing ``.grad``. Interior
    nodes are detached afterwards, so the graph can be replayed only once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = Graph(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for out, node in graph.reverse():
        g = adj.pop(id(out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    for key, t in leaves.items():
        g = adj[key].astype(t.data.dtype, copy=False).reshape(t.data.shape)
        t.grad = g if t.grad is None else t.grad + g
    for out, _ in graph.entries:
        out._node = None
        out.requires_grad = False


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    sx, sy = x.shape, y.shape
    return _make(x.data + y.data, (x, y), lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)), "add")


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    sx, sy = x.shape, y.shape
    return _make(x.data - y.data, (x, y), lambda g: (_unbroadcast(g, sx), -_unbroadcast(g, sy)), "sub")


def mul(x, y) -> Tensor:
    x = _as_tensor(x)
    if not isinstance(y, Tensor):
        c = np.asarray(y, dtype=x.data.dtype)
        return _make(x.data * c, (x,), lambda g: (_unbroadcast(g * c, x.shape),), "mul_const")
    xd, yd = x.data, y.data
    return _make(
        xd * yd,
        (x, y),
        lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    dt = x.data.dtype
    return _make(
        np.asarray(x.data.sum(dtype=np.float64), dtype=dt),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dt),),
        "sum",
    )


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(a, b)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice [{start}, {stop}) out of range for axis {axis} of extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dt = x.shape, x.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), bw, "slice")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows (axis 0) of ``x``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    shape, dt = x.shape, x.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw, "take_rows")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*d^2 for |d| < 1, |d| - 0.5 otherwise."""
    d = x.data
    a = np.abs(d)
    small = a < 1
    out = np.where(small, 0.5 * d * d, a - 0.5)
    dd = np.where(small, d, np.sign(d))
    return _make(out.astype(d.dtype), (x,), lambda g: (g * dd,), "smooth_l1")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax_channels(x: Tensor, group: int) -> Tensor:
    """Softmax over each consecutive block of ``group`` channels of an NCHW map."""
    n, c, h, w = x.shape
    if group <= 0 or c % group:
        raise DimensionError(f"channel count {c} is not a multiple of group {group}")
    d = x.data.reshape(n, c // group, group, h, w)
    e = np.exp(d - d.max(axis=2, keepdims=True))
    p = e / e.sum(axis=2, keepdims=True)

    def bw(g):
        g = g.reshape(p.shape)
        return ((p * (g - (g * p).sum(axis=2, keepdims=True))).reshape(n, c, h, w),)

    return _make(p.reshape(n, c, h, w), (x,), bw, "softmax_channels")


def channel_group_max(x: Tensor, group_start: int, group_len: int) -> Tensor:
    """Per-position max over channels [start, start+len); shape (N, 1, H, W).

    The gradient flows to the argmax channel only; the lowest index wins ties.
    """
    n, c, h, w = x.shape
    if group_len <= 0:
        raise DimensionError("empty channel group")
    if group_start < 0 or group_start + group_len > c:
        raise DimensionError(f"channel group [{group_start}, {group_start + group_len}) outside {c} channels")
    block = x.data[:, group_start:group_start + group_len]
    arg = block.argmax(axis=1)[:, None]
    out = np.take_along_axis(block, arg, axis=1)
    shape, dt = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        sub_ = np.zeros((n, group_len, h, w), dtype=dt)
        np.put_along_axis(sub_, arg, g, axis=1)
        full[:, group_start:group_start + group_len] = sub_
        return (full,)

    return _make(out, (x,), bw, "channel_group_max")


def l2_rescale(x: Tensor, gamma: Tensor, eps: float = L2_EPS) -> Tensor:
    """Normalise each position's channel vector to unit L2 norm, then scale per channel."""
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise DimensionError(f"gamma shape {gamma.shape} does not match {c} channels")
    d = x.data
    norm = np.sqrt((d * d).sum(axis=1, keepdims=True))
    den = norm + eps
    u = d / den
    gam = gamma.data.reshape(1, c, 1, 1)

    def bw(g):
        gg = g * gam
        dot = (gg * d).sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        dx = gg / den - d * dot / (den * den * safe)
        dgamma = (g * u).sum(axis=(0, 2, 3))
        return dx, dgamma

    return _make(u * gam, (x, gamma), bw, "l2_rescale")


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (floor mode); ties go to the first element."""
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh == 0 or ow == 0:
        raise DimensionError(f"cannot 2x-pool a {h}x{w} map")
    d = x.data[:, :, : oh * 2, : ow * 2]
    blocks = d.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shape, dt = x.shape, x.data.dtype

    def bw(g):
        gb = np.zeros((n, c, oh, ow, 4), dtype=dt)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)
        full = np.zeros(shape, dtype=dt)
        full[:, :, : oh * 2, : ow * 2] = gb
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool2x")


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = (i + 0.5) / 2 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[i, min(max(lo, 0), n - 1)] += 1 - frac
        m[i, min(max(lo + 1, 0), n - 1)] += frac
    return m


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    n, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def bw(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(out, (x,), bw, "upsample_nearest")
    if mode == "bilinear":
        mh = _bilinear_matrix(h, x.data.dtype)
        mw = _bilinear_matrix(w, x.data.dtype)
        out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)
        return _make(
            out,
            (x,),
            lambda g: (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),),
            "upsample_bilinear",
        )
    raise ContractError(f"unknown upsample mode {mode!r}")


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d weight expects {ci} input channels, input has {c}")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    if stride < 1 or pad < 0 or dilation < 1:
        raise ContractError(f"invalid conv2d geometry stride={stride} pad={pad} dilation={dilation}")
    oh = conv_out_size(h, kh, stride, pad, dilation)
    ow = conv_out_size(wd, kw, stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d output would be empty for input {h}x{wd}")
    wm = w.data.reshape(o, c * kh * kw)
    inputs = (x, w) if b is None else (x, w, b)
    dt = x.data.dtype

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        xm = x.data.reshape(n, c, h * wd)
        out = np.matmul(wm, xm)
        if b is not None:
            out += b.data[:, None]

        def bw1(g):
            gm = g.reshape(n, o, h * wd)
            dx = np.matmul(wm.T, gm).reshape(n, c, h, wd) if x.requires_grad else None
            dw = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            grads = [dx, dw]
            if b is not None:
                grads.append(gm.sum(axis=(0, 2)))
            return grads

        return _make(out.reshape(n, o, h, wd), inputs, bw1, "conv2d_1x1")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride, ::dilation, ::dilation]
    # (N, C, kh, kw, OH, OW) -> (N, C*kh*kw, OH*OW)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[:, None]
    hp, wp = xp.shape[2], xp.shape[3]

    def bw(g):
        gm = g.reshape(n, o, oh * ow)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros((n, c, hp, wp), dtype=dt)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    dxp[:, :, r0 : r0 + (oh - 1) * stride + 1 : stride, c0 : c0 + (ow - 1) * stride + 1 : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    return _make(out.reshape(n, o, oh, ow), inputs, bw, "conv2d")


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradcheckReport:
    seed: int
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> list:
        return [k for k, e in self.errors.items() if not (np.isfinite(e) and e < self.tolerance)]


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. elements of ``arr`` (mutated in place, then restored).

    ``coords`` restricts the probe to those flat indices; other entries stay zero.
    """
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise discrepancy relative to the larger gradient scale."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(op_builder, seed: int, eps: float = 1e-5, tolerance: float = 1e-4,
              max_coords: int | None = None) -> GradcheckReport:
    """Compare analytic and central-difference gradients in 64-bit.

    ``op_builder(rng)`` returns ``(fn, inputs)`` where ``inputs`` maps names to
    arrays and ``fn(**tensors)`` builds a scalar Tensor. With ``max_coords``,
    inputs larger than that are probed at a seeded random subset of entries.
    """
    report = GradcheckReport(seed=seed, tolerance=tolerance)
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        fn, inputs = op_builder(rng)
        arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        loss = fn(**tensors)
        backward(loss)

        def evaluate() -> float:
            with no_grad():
                return float(fn(**{k: Tensor(v) for k, v in arrays.items()}).data)

        pick = np.random.default_rng([seed, 1])
        for k, t in tensors.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(arrays[k])
            coords = None
            if max_coords is not None and arrays[k].size > max_coords:
                coords = np.sort(pick.choice(arrays[k].size, max_coords, replace=False))
                mask = np.zeros(arrays[k].size, dtype=bool)
                mask[coords] = True
                analytic = np.where(mask.reshape(analytic.shape), analytic, 0.0)
            numeric = numeric_grad(evaluate, arrays[k], eps, coords)
            report.errors[k] = relative_error(analytic, numeric)
    return report
