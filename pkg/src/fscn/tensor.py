"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the operations the FSCN graph needs are provided. Every op returns a
new :class:`Tensor` that remembers its parents and a closure mapping the
upstream gradient to one gradient per parent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.data.ndim > 0:
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Executed operations reachable from an output, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
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
        return cls(order)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``.grad`` on every tensor with ``requires_grad`` that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` arrays of leaves. Gradients of
    intermediate nodes are released once they have been propagated.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# --------------------------------------------------------------------------
# elementwise


def add(x: Tensor, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make(x.data + y.data, (x, y), bw, "add")


def mul(x: Tensor, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)

    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _make(x.data * y.data, (x, y), bw, "mul")


def scalar_mul(x: Tensor, a) -> Tensor:
    """Multiply every element of ``x`` by the scalar ``a`` (float or 0-d Tensor)."""
    if not isinstance(a, Tensor):
        factor = np.asarray(a, dtype=x.dtype)
        return _make(x.data * factor, (x,), lambda g: (g * factor,), "scale")

    if a.data.size != 1:
        raise ShapeError(f"scalar_mul expects a scalar, got shape {a.shape}")

    def bw(g):
        return g * a.data, np.sum(g * x.data).reshape(a.shape).astype(a.dtype)

    return _make(x.data * a.data.reshape(()), (x, a), bw, "scalar_mul")


def tensor_sum(x: Tensor) -> Tensor:
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


# when a list, relu appends its activation pattern (used by grad_check)
_kink_trace: Optional[list] = None


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    active = x.data > 0
    if _kink_trace is not None:
        _kink_trace.append(active)
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * active,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument cannot overflow
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0, e) / (1.0 + e)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# channel ops


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concat {p.shape} with leading part {parts[0].shape}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover {x.shape[1]} channels")
    out, start = [], 0
    for size in sizes:
        sl = slice(start, start + size)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[:, sl] = g
            return (full,)

        out.append(_make(x.data[:, sl].copy(), (x,), bw, "split"))
        start += size
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    h, w = x.shape[2], x.shape[3]

    def bw(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,), bw, "gap")


def scale_channels(x: Tensor, gates: Tensor) -> Tensor:
    n, c = x.shape[:2]
    if gates.shape != (n, c, 1, 1):
        raise ShapeError(f"gates {gates.shape} do not match input {x.shape}")

    def bw(g):
        return g * gates.data, np.sum(g * x.data, axis=(2, 3), keepdims=True)

    return _make(x.data * gates.data, (x, gates), bw, "scale_channels")


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of an NCHW input with an (out, in, k, k) kernel."""
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels but weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {k}x{k2}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"input {h}x{w} with pad {pad} is smaller than kernel {k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    if stride == 1 and cin >= cout:
        out, bw = _conv_shift_sum(x, weight, bias, pad, ho, wo)
    else:
        out, bw = _conv_im2col(x, weight, bias, stride, pad, ho, wo)
    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw, "conv2d")



def _pad_nhwc(data: np.ndarray, pad: int) -> np.ndarray:
    xh = data.transpose(0, 2, 3, 1)
    if pad:
        return np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    return np.ascontiguousarray(xh)


def _conv_shift_sum(x, weight, bias, pad, ho, wo):
    # stride 1. Padded images are flattened channels-first into (c, L); tap
    # (i, j) then reads a fixed offset i*wp + j, so the output is a sum of
    # k*k contiguous slices of one matmul result, and the backward stacks k*k
    # shifted copies of the gradient instead of unfolding the input.
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    xc = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(xc)
    hp, wp = xp.shape[2:]
    size = n * hp * wp
    xflat = xp.reshape(cin, size)
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    span = size - offsets[-1]
    wt = weight.data.transpose(2, 3, 0, 1).reshape(k * k * cout, cin)
    taps = (wt @ xflat).reshape(k * k, cout, size)
    acc = np.zeros((cout, size), dtype=taps.dtype)
    for t, off in enumerate(offsets):
        acc[:, :span] += taps[t, :, off : off + span]
    out = acc.reshape(cout, n, hp, wp)[:, :, :ho, :wo]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gz = np.zeros((cout, n, hp, wp), dtype=g.dtype)
        gz[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gflat = gz.reshape(cout, size)
        # shifted[t][:, q] = g at anchor q - offset_t (zero outside)
        shifted = np.zeros((k * k, cout, size), dtype=g.dtype)
        for t, off in enumerate(offsets):
            shifted[t, :, off:] = gflat[:, : size - off]
        shifted = shifted.reshape(k * k * cout, size)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((shifted @ xflat.T).reshape(k, k, cout, cin).transpose(2, 3, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # (L, cin) output keeps the long axis as BLAS rows, which is faster
            gxp = (shifted.T @ wt).reshape(n, hp, wp, cin)
            gx = np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + w].transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return out, bw


def _conv_im2col(x, weight, bias, stride, pad, ho, wo):
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    xh = _pad_nhwc(x.data, pad)
    # rows are output pixels, columns (ky, kx, cin)
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, cin)
            gxh = np.zeros(xh.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            if pad:
                gxh = gxh[:, pad : pad + h, pad : pad + w, :]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return out, bw

# --------------------------------------------------------------------------
# resampling


def _bilinear_taps(n_in: int, n_out: int):
    # half-pixel centres, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resample_axis(data: np.ndarray, axis: int, n_out: int):
    """Resample ``data`` along ``axis``; returns output and a gradient mapper."""
    n_in = data.shape[axis]
    if n_out == n_in:
        return data, lambda g: g
    if n_out < n_in:
        if n_in % n_out:
            raise ValueError(f"cannot downscale {n_in} -> {n_out}: factor is not an integer")
        f = n_in // n_out
        shape = data.shape[:axis] + (n_out, f) + data.shape[axis + 1 :]
        out = data.reshape(shape).mean(axis=axis + 1)
        return out, lambda g: np.repeat(g / f, f, axis=axis)

    if n_out % n_in == 0:
        return _upsample_integer(data, axis, n_out // n_in)

    i0, i1, frac = _bilinear_taps(n_in, n_out)
    frac = frac.astype(data.dtype)
    bshape = [1] * data.ndim
    bshape[axis] = n_out
    fr = frac.reshape(bshape)
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    out = a + fr * (b - a)

    mat = np.zeros((n_out, n_in), dtype=data.dtype)
    np.add.at(mat, (np.arange(n_out), i0), 1 - frac)
    np.add.at(mat, (np.arange(n_out), i1), frac)

    def grad(g):
        moved = np.moveaxis(g, axis, -1) @ mat
        return np.moveaxis(moved, -1, axis)

    return out, grad


def _upsample_integer(data: np.ndarray, axis: int, f: int):
    # Output index f*m + r samples source m + (r + 0.5)/f - 0.5, so each residue
    # r is a fixed-weight lerp between two shifted copies of the edge-padded input.
    n_in = data.shape[axis]

    def sl(s):
        idx = [slice(None)] * data.ndim
        idx[axis] = s
        return tuple(idx)

    pad = [(0, 0)] * data.ndim
    pad[axis] = (1, 1)
    xp = np.pad(data, pad, mode="edge")
    shape = list(data.shape)
    shape[axis] = n_in * f
    out = np.empty(shape, dtype=data.dtype)
    mat = np.zeros((n_in * f, n_in + 2), dtype=data.dtype)
    for r in range(f):
        delta = (r + 0.5) / f - 0.5
        lo = 0 if delta < 0 else 1  # left tap, in padded coordinates
        frac = delta + 1 if delta < 0 else delta
        a = xp[sl(slice(lo, lo + n_in))]
        b = xp[sl(slice(lo + 1, lo + 1 + n_in))]
        out[sl(slice(r, None, f))] = a + data.dtype.type(frac) * (b - a)
        rows = np.arange(r, n_in * f, f)
        mat[rows, np.arange(n_in) + lo] += 1 - frac
        mat[rows, np.arange(n_in) + lo + 1] += frac
    # fold the edge padding back onto the border samples
    mat[:, 1] += mat[:, 0]
    mat[:, n_in] += mat[:, n_in + 1]
    mat = np.ascontiguousarray(mat[:, 1 : n_in + 1])

    def grad(g):
        moved = np.moveaxis(g, axis, -1) @ mat
        return np.moveaxis(moved, -1, axis)

    return out, grad


def resample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear upsampling or integer-factor average pooling to ``(target_h, target_w)``."""
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be positive, got {target_h}x{target_w}")
    mid, grad_h = _resample_axis(x.data, 2, target_h)
    out, grad_w = _resample_axis(mid, 3, target_w)
    if out is x.data:
        out = out.copy()
    return _make(np.ascontiguousarray(out), (x,), lambda g: (grad_h(grad_w(g)),), "resample")


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_parameter_errors: list
    passed: bool
    tol: float = 1e-3
    kink_reprobes: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {self.kink_reprobes} kink re-probes" if self.kink_reprobes else ""
        return f"{status}  {self.op_name:<30s} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}{extra})"


def _eval_traced(f):
    global _kink_trace
    _kink_trace = []
    try:
        value = f().item()
        return value, _kink_trace
    finally:
        _kink_trace = None


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
    op_name: str = "f",
    min_eps: float = 1e-7,
) -> GradCheckReport:
    """Compare backward() against central differences on sampled entries of ``params``.

    ``f`` rebuilds the graph from the current parameter values on every call.
    All parameters must be float64. A probe whose two sides see different relu
    activation patterns straddles a kink, where the function has no derivative;
    such a probe is repeated with eps divided by 10, down to ``min_eps``.

    The relative error uses ``max(|a| + |n|, noise / tol)`` as denominator,
    where ``noise`` is the rounding error of the difference quotient. Gradients
    below that level are judged on absolute error instead.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or p.shape}")
        p.grad = None
    out = f()
    f0 = abs(out.item())
    backward(out)
    rng = np.random.default_rng(seed)

    worst = 0.0
    per_param = []
    reprobes = 0
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i]
            h = eps
            while True:
                flat[i] = orig + h
                fp, kp = _eval_traced(f)
                flat[i] = orig - h
                fm, km = _eval_traced(f)
                flat[i] = orig
                if _same_pattern(kp, km) or h / 10 < min_eps:
                    break
                h /= 10
                reprobes += 1
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            noise = 4 * np.finfo(np.float64).eps * max(1.0, f0) / h
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric), noise / tol)
            if not np.isfinite(rel):
                rel = np.inf
            err = max(err, rel)
        per_param.append((p.name or f"param{k}", float(err)))
        worst = max(worst, err)
    for p in params:
        p.grad = None
    return GradCheckReport(op_name, float(worst), per_param, bool(worst <= tol), tol, reprobes)
