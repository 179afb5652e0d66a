"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set covers exactly what the segmentation blocks need:
grouped stride-1 "same" convolution, 2x2 max pooling, nearest-repeat
upsampling, batch norm, the usual activations, and strict elementwise /
reduction arithmetic. The graph is recorded eagerly: each op stores its
parent tensors and a backward closure on the output tensor. Creation
order doubles as tape order, so ``backward()`` walks the reachable nodes
by descending creation index and replays each recorded application
exactly once. Gradients accumulate additively into ``.grad``; call
:func:`zero_grad` between optimizer steps.

There is no implicit broadcasting: elementwise ops require equal shapes
or a Python scalar. That keeps every gradient exact and every shape
error loud.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "zero_grad",
    "check_finite",
    "flop_counter",
    "add",
    "mul",
    "div",
    "log",
    "absolute",
    "clamp",
    "tsum",
    "tmean",
    "matmul",
    "relu",
    "leaky_relu",
    "sigmoid",
    "conv2d",
    "max_pool2",
    "upsample_repeat2",
    "global_avg_pool",
    "batch_norm",
    "dropout",
    "concat_channels",
    "slice_channels",
    "permute_channels",
    "scale_channels",
]


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf where finite values are required."""


_COUNTER = itertools.count()
_GRAD_ENABLED = True
_FLOP_HOOK = None


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def flop_counter(hook):
    """Route per-op FLOP counts (see the documented convention) to ``hook``."""
    global _FLOP_HOOK
    prev = _FLOP_HOOK
    _FLOP_HOOK = hook
    try:
        yield
    finally:
        _FLOP_HOOK = prev


def _flops(n: int) -> None:
    if _FLOP_HOOK is not None:
        _FLOP_HOOK(int(n))


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_nid", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._nid = next(_COUNTER)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Reverse sweep from this tensor, accumulating into ``.grad`` buffers.

        Nodes are visited in descending creation order, which for an
        eagerly recorded graph is exactly the reverse of the recorded
        application order; every reachable node is handled once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar root")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError("seed gradient shape mismatch")

        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._nid, reverse=True)

        pending = {self._nid: grad}
        for t in nodes:
            g = pending.pop(t._nid, None)
            if g is None:
                continue
            if t.requires_grad and t._backward is None:  # leaf
                t.grad = g.copy() if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not (p.requires_grad or p._backward is not None):
                    continue
                prev = pending.get(p._nid)
                pending[p._nid] = pg if prev is None else prev + pg

    # operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, -other)
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))


def zero_grad(tensors) -> None:
    """Reset gradient buffers; call between optimizer steps."""
    for t in tensors:
        t.grad = None


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NonFiniteError` when ``t`` holds NaN or Inf."""
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b):
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        out = _make(a.data + b.data, (a, b), lambda g: (g, g))
    else:
        s = float(b)
        out = _make(a.data + s, (a,), lambda g: (g,))
    _flops(out.data.size)
    return out


def mul(a: Tensor, b):
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        out = _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    else:
        s = float(b)
        out = _make(a.data * s, (a,), lambda g: (g * s,))
    _flops(out.data.size)
    return out


def div(a: Tensor, b: Tensor):
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    res = ad / bd

    def backward(g):
        return g / bd, -g * res / bd

    out = _make(res, (a, b), backward)
    _flops(out.data.size)
    return out


def log(x: Tensor):
    xd = x.data
    out = _make(np.log(xd), (x,), lambda g: (g / xd,))
    _flops(out.data.size)
    return out


def absolute(x: Tensor):
    xd = x.data
    out = _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))
    _flops(out.data.size)
    return out


def clamp(x: Tensor, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes on the closed interval."""
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    out = _make(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))
    _flops(out.data.size)
    return out


def tsum(x: Tensor):
    shape = x.data.shape
    out = _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    _flops(x.data.size)
    return out


def tmean(x: Tensor):
    shape = x.data.shape
    n = x.data.size
    out = _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))
    _flops(x.data.size)
    return out


def matmul(a: Tensor, b: Tensor):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    _flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return out


# activations ------------------------------------------------------------


def relu(x: Tensor):
    xd = x.data
    out = _make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0.0),))
    _flops(out.data.size)
    return out


def leaky_relu(x: Tensor, slope: float = 0.3):
    xd = x.data
    pos = xd > 0.0
    out = _make(np.where(pos, xd, slope * xd), (x,), lambda g: (g * np.where(pos, 1.0, slope),))
    _flops(out.data.size)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor):
    s = _sigmoid(x.data)
    out = _make(s, (x,), lambda g: (g * s * (1.0 - s),))
    _flops(out.data.size)
    return out


# convolution and spatial ops --------------------------------------------


try:  # optional JIT for the patch gather / layout kernels (numpy fallback below)
    import numba as _numba

    @_numba.njit(cache=True)
    def _nb_gather(x, kh, kw, out):  # x (N,C,H,W) -> out (N*H*W, C*kh*kw)
        n, c, h, w = x.shape
        ph, pw = kh // 2, kw // 2
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    row = (ni * h + i) * w + j
                    col = 0
                    interior = pw <= j < w - pw
                    for ci in range(c):
                        for u in range(kh):
                            y = i + u - ph
                            if 0 <= y < h:
                                if interior:
                                    for v in range(kw):
                                        out[row, col] = x[ni, ci, y, j + v - pw]
                                        col += 1
                                else:
                                    for v in range(kw):
                                        xx = j + v - pw
                                        out[row, col] = x[ni, ci, y, xx] if 0 <= xx < w else 0.0
                                        col += 1
                            else:
                                for v in range(kw):
                                    out[row, col] = 0.0
                                    col += 1

    @_numba.njit(cache=True)
    def _nb_to_nchw(om, n, h, w, out):  # om (N*H*W, C) -> out (N,C,H,W)
        c = om.shape[1]
        for ni in range(n):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        out[ni, ci, i, j] = om[(ni * h + i) * w + j, ci]

    @_numba.njit(cache=True)
    def _nb_patch(x, ni, cbase, cg, kh, kw, patch):
        # one sample's channel block -> (H*W, cg*kh*kw) patch rows
        h, w = x.shape[2], x.shape[3]
        ph, pw = kh // 2, kw // 2
        for i in range(h):
            for j in range(w):
                row = i * w + j
                col = 0
                interior = pw <= j < w - pw
                for c in range(cg):
                    xc = x[ni, cbase + c]
                    for u in range(kh):
                        y = i + u - ph
                        if 0 <= y < h:
                            if interior:
                                for v in range(kw):
                                    patch[row, col] = xc[y, j + v - pw]
                                    col += 1
                            else:
                                for v in range(kw):
                                    xx = j + v - pw
                                    patch[row, col] = xc[y, xx] if 0 <= xx < w else 0.0
                                    col += 1
                        else:
                            for v in range(kw):
                                patch[row, col] = 0.0
                                col += 1

    @_numba.njit(cache=True)
    def _nb_conv_gemm(x, wmat, kh, kw, out, patch):
        # out[n, g*cog+oo] = patch(x, group g) @ wmat[g][:, oo]
        n, cin, h, w = x.shape
        groups = wmat.shape[0]
        cg = cin // groups
        cog = wmat.shape[2]
        for ni in range(n):
            for g in range(groups):
                _nb_patch(x, ni, g * cg, cg, kh, kw, patch)
                res = np.dot(patch, wmat[g])  # (h*w, cog)
                for oo in range(cog):
                    o = g * cog + oo
                    for i in range(h):
                        base = i * w
                        for j in range(w):
                            out[ni, o, i, j] = res[base + j, oo]

    @_numba.njit(cache=True)
    def _nb_conv_dw_gemm(x, gout, groups, kh, kw, dwmat, patch):
        # dwmat[g] += gout rows (cog, H*W) @ patch (H*W, cg*k2), summed over n
        n, cin, h, w = x.shape
        cg = cin // groups
        cout = gout.shape[1]
        cog = cout // groups
        hw = h * w
        for ni in range(n):
            for g in range(groups):
                _nb_patch(x, ni, g * cg, cg, kh, kw, patch)
                gmat = gout[ni, g * cog:(g + 1) * cog].reshape(cog, hw)
                dwmat[g] += np.dot(gmat, patch)

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N,C,H,W) -> (N*H*W, C*kh*kw) patch matrix, zero "same" padding."""
    n, c, h, w = xd.shape
    if kh == 1 and kw == 1:
        return xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    if _HAVE_NUMBA:
        out = np.empty((n * h * w, c * kh * kw))
        _nb_gather(np.ascontiguousarray(xd), kh, kw, out)
        return out
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def _to_nchw(om: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(N*H*W, C) GEMM output back to a contiguous (N,C,H,W) array."""
    c = om.shape[1]
    if _HAVE_NUMBA:
        out = np.empty((n, c, h, w))
        _nb_to_nchw(np.ascontiguousarray(om), n, h, w, out)
        return out
    return om.reshape(n, h, w, c).transpose(0, 3, 1, 2).copy()


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1):
    """Grouped 2-D correlation, stride 1, odd kernel, zero "same" padding.

    ``weight`` has shape (out_ch, in_ch/groups, kh, kw); output spatial
    dims equal the input's. Differentiable w.r.t. x, weight and bias.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d supports odd kernels only (same padding)")
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"weight expects {cg * groups} input channels, tensor has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("bias must have shape (out_channels,)")

    cog = cout // groups
    k2 = kh * kw
    xd, wd = x.data, weight.data
    need_x = x.requires_grad or x._backward is not None
    need_w = weight.requires_grad or weight._backward is not None

    if _HAVE_NUMBA and k2 > 1:
        xc = np.ascontiguousarray(xd)
        wmat = np.empty((groups, cg * k2, cog))
        for gi in range(groups):
            wmat[gi] = wd[gi * cog:(gi + 1) * cog].reshape(cog, cg * k2).T
        out = np.empty((n, cout, h, w))
        _nb_conv_gemm(xc, wmat, kh, kw, out, np.empty((h * w, cg * k2)))
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(gout):
            gc = np.ascontiguousarray(gout)
            dw = None
            if need_w:
                dwmat = np.zeros((groups, cog, cg * k2))
                _nb_conv_dw_gemm(xc, gc, groups, kh, kw, dwmat, np.empty((h * w, cg * k2)))
                dw = dwmat.reshape(cout, cg, kh, kw)
            dx = None
            if need_x:
                # full correlation with spatially flipped, channel-swapped weights
                wf = np.empty((groups, cog * k2, cg))
                for gi in range(groups):
                    blk = wd[gi * cog:(gi + 1) * cog, :, ::-1, ::-1]
                    wf[gi] = blk.transpose(0, 2, 3, 1).reshape(cog * k2, cg)
                dx = np.empty((n, cin, h, w))
                _nb_conv_gemm(gc, wf, kh, kw, dx, np.empty((h * w, cog * k2)))
            db = gout.sum(axis=(0, 2, 3)) if bias is not None else None
            return (dx, dw) if bias is None else (dx, dw, db)
    else:
        cols = _im2col(xd, kh, kw)
        parts = []
        for gi in range(groups):
            wg = wd[gi * cog:(gi + 1) * cog].reshape(cog, cg * k2)
            parts.append(cols[:, gi * cg * k2:(gi + 1) * cg * k2] @ wg.T)
        om = parts[0] if groups == 1 else np.concatenate(parts, axis=1)
        if bias is not None:
            om += bias.data[None, :]
        out = _to_nchw(om, n, h, w)
        saved_cols = cols if need_w else None

        def backward(gout):
            gm = gout.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
            dw = None
            if need_w:
                dw = np.empty_like(wd)
                for gi in range(groups):
                    gmat = gm[:, gi * cog:(gi + 1) * cog]
                    dw[gi * cog:(gi + 1) * cog] = (
                        gmat.T @ saved_cols[:, gi * cg * k2:(gi + 1) * cg * k2]
                    ).reshape(cog, cg, kh, kw)
            dx = None
            if need_x:
                gcols = _im2col(gout, kh, kw)
                dparts = []
                for gi in range(groups):
                    wf = wd[gi * cog:(gi + 1) * cog, :, ::-1, ::-1]
                    wmat = wf.transpose(0, 2, 3, 1).reshape(cog * k2, cg)
                    dparts.append(gcols[:, gi * cog * k2:(gi + 1) * cog * k2] @ wmat)
                dm = dparts[0] if groups == 1 else np.concatenate(dparts, axis=1)
                dx = _to_nchw(dm, n, h, w)
            db = gout.sum(axis=(0, 2, 3)) if bias is not None else None
            return (dx, dw) if bias is None else (dx, dw, db)

    _flops(2 * k2 * cg * cout * h * w * n + (cout * h * w * n if bias is not None else 0))
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def max_pool2(x: Tensor):
    """2x2 stride-2 max pool; the gradient routes to the first argmax."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    v = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = v.argmax(axis=4)
    out = np.take_along_axis(v, idx[..., None], axis=4)[..., 0]
    _flops(3 * out.size)

    def backward(g):
        dv = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(dv, idx[..., None], g[..., None], axis=4)
        dx = dv.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _make(out, (x,), backward)


def upsample_repeat2(x: Tensor):
    """Nearest upsampling: each value fills a 2x2 patch; grad sums the patch."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor):
    """(N,C,H,W) -> (N,C) spatial mean per channel."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.shape
    out = _make(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),),
    )
    _flops(x.data.size)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
):
    """Per-channel batch norm over (N,H,W); biased batch variance.

    Train mode normalizes with batch statistics and updates the running
    buffers in place by exponential moving average (``momentum`` is the
    keep factor). Eval mode uses the running buffers.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must match the channel count")
    m = n * h * w
    if m == 0:
        raise ShapeError("batch_norm needs a nonzero batch x spatial extent")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv
    shift = beta.data - mu * scale
    out = xd * scale[None, :, None, None] + shift[None, :, None, None]
    _flops(2 * out.size)

    def backward(g):
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if training:
            dxhat = g * gamma.data[None, :, None, None]
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        else:
            dx = g * scale[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; identity in eval mode; mask drawn from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng for reproducibility")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _make(x.data * keep, (x,), lambda g: (g * keep,))
    _flops(out.data.size)
    return out


def concat_channels(xs):
    """Concatenate 4-D tensors along the channel axis, order preserved."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    base = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError("concat_channels: non-channel dims must match")
    sizes = [t.shape[1] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=1), tuple(xs), backward)


def slice_channels(x: Tensor, lo: int, hi: int):
    n, c, h, w = x.shape
    if not 0 <= lo < hi <= c:
        raise ShapeError(f"invalid channel slice [{lo}:{hi}] for {c} channels")

    def backward(g):
        dx = np.zeros((n, c, h, w))
        dx[:, lo:hi] = g
        return (dx,)

    return _make(x.data[:, lo:hi].copy(), (x,), backward)


def permute_channels(x: Tensor, perm):
    """Reorder channels by ``perm``; the gradient applies the inverse map."""
    perm = np.asarray(perm, dtype=np.intp)
    c = x.shape[1]
    if perm.shape != (c,) or not np.array_equal(np.sort(perm), np.arange(c)):
        raise ShapeError("perm must be a permutation of the channel indices")
    inv = np.argsort(perm)
    return _make(x.data[:, perm], (x,), lambda g: (g[:, inv],))


def scale_channels(x: Tensor, s: Tensor):
    """Multiply each (H,W) slice of x (N,C,H,W) by the matching s (N,C) entry."""
    if x.ndim != 4 or s.ndim != 2 or s.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: got x {x.shape}, s {s.shape}")
    xd, sd = x.data, s.data

    def backward(g):
        return g * sd[:, :, None, None], (g * xd).sum(axis=(2, 3))

    out = _make(xd * sd[:, :, None, None], (x, s), backward)
    _flops(out.data.size)
    return out
