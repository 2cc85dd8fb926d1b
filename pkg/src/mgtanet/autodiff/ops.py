"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants), computes the
forward value with numpy and registers a closure computing input gradients on
the active tape. Shapes follow the pipeline's unbatched convention: feature
maps are ``[C, H, W]`` and point/voxel features are ``[rows, C]``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ConfigError
from .tensor import Tensor, as_tensor, record


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data + b.data
    return record("add", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data - b.data
    return record("sub", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,),
                  lambda g: (g * mask,), pattern=lambda: np.packbits(mask).tobytes())


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_t(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs]
    return concat(expanded, axis=axis)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; no fancy indices."""
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return record("getitem", np.ascontiguousarray(out), (x,), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("mean", np.asarray(out), (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def fc(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W + b`` over the last axis of ``x``."""
    x = _t(x, W)
    if x.ndim < 1 or W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ConfigError(f"fc dimension mismatch: x{tuple(x.shape)} vs W{tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[1],):
        raise ConfigError(f"fc bias shape {b.shape} does not match W{tuple(W.shape)}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, W) if b is None else (x, W, b)
    return record("fc", out, inputs, backward)


def _conv_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"'same' padding needs odd kernel sizes, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def conv2d(x: Tensor, W: Tensor, b: Tensor | None = None, stride: int = 1,
           padding="same") -> Tensor:
    """Cross-correlation of ``x[Cin,H,W]`` with ``W[Cout,Cin,kh,kw]``."""
    x = _t(x, W)
    if x.ndim != 3 or W.ndim != 4 or x.shape[0] != W.shape[1]:
        raise ConfigError(f"conv2d shape mismatch: x{tuple(x.shape)} vs kernel{tuple(W.shape)}")
    cout, cin, kh, kw = W.shape
    ph, pw = _conv_padding(padding, kh, kw)
    _, H, Wd = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (Wd + 2 * pw - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigError(f"conv2d output would be empty for input {x.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, Ho * Wo)
    Wm = W.data.reshape(cout, -1)
    out = Wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, Ho, Wo)

    def backward(g):
        g2 = g.reshape(cout, -1)
        gx = None
        if x.requires_grad:
            dcols = (Wm.T @ g2).reshape(cin, kh, kw, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            gx = dxp[:, ph:ph + H, pw:pw + Wd]
        gW = (g2 @ cols.T).reshape(W.shape) if W.requires_grad else None
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    inputs = (x, W) if b is None else (x, W, b)
    return record("conv2d", out, inputs, backward)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, clamped at the borders
    M = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    rows = np.arange(n_out)
    np.add.at(M, (rows, i0), 1.0 - w)
    np.add.at(M, (rows, i1), w)
    return M


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of ``x[C,H,W]`` to ``size`` (half-pixel, edge-clamped)."""
    _, H, W = x.shape
    Uh = _resize_matrix(H, size[0], x.dtype)
    Uw = _resize_matrix(W, size[1], x.dtype)
    out = np.einsum("ah,chw,bw->cab", Uh, x.data, Uw, optimize=True)
    return record("upsample_bilinear", out, (x,),
                  lambda g: (np.einsum("ah,cab,bw->chw", Uh, g, Uw, optimize=True),))


# ---------------------------------------------------------------- sampling

def bilinear_sample(x: Tensor, px, py) -> Tensor:
    """Sample ``x[C,H,W]`` at continuous locations ``(px, py)``.

    ``px`` indexes columns and ``py`` rows; both share an arbitrary shape S and
    the result is ``[C, *S]``. Corners outside the grid read as zero.
    """
    px = _t(px, x)
    py = _t(py, x)
    if px.shape != py.shape:
        raise ConfigError(f"sample coordinate shapes differ: {px.shape} vs {py.shape}")
    C, H, W = x.shape
    S = px.shape
    fx = px.data.reshape(-1)
    fy = py.data.reshape(-1)
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    wx = fx - x0
    wy = fy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xf = x.data.reshape(C, H * W)
    n = fx.size

    corners = []
    for dy, dx, w in ((0, 0, (1 - wx) * (1 - wy)), (0, 1, wx * (1 - wy)),
                      (1, 0, (1 - wx) * wy), (1, 1, wx * wy)):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        flat = np.where(valid, cy * W + cx, 0)
        vals = xf[:, flat] * valid
        corners.append((flat, valid, w, vals))

    v00, v01, v10, v11 = (c[3] for c in corners)
    out = (corners[0][2] * v00 + corners[1][2] * v01
           + corners[2][2] * v10 + corners[3][2] * v11)

    def backward(g):
        g2 = g.reshape(C, n)
        gx = gpx = gpy = None
        if x.requires_grad:
            rows = np.concatenate([np.arange(n)] * 4)
            colsi = np.concatenate([c[0] for c in corners])
            vals = np.concatenate([c[2] * c[1] for c in corners])
            S_mat = sp.csr_matrix((vals, (rows, colsi)), shape=(n, H * W))
            gx = (S_mat.T @ g2.T).T.reshape(C, H, W)
        if px.requires_grad:
            dpx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            gpx = np.sum(g2 * dpx, axis=0).reshape(S)
        if py.requires_grad:
            dpy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            gpy = np.sum(g2 * dpy, axis=0).reshape(S)
        return gx, gpx, gpy

    def pattern():
        return x0.tobytes() + y0.tobytes()

    return record("bilinear_sample", out.reshape((C,) + S), (x, px, py), backward, pattern)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               trace: list | None = None) -> Tensor:
    """Normalise over the last axis, then apply ``gamma``/``beta``.

    ``trace``, when given, receives the pre-affine normalised values.
    """
    if x.shape[-1] < 2:
        raise ConfigError("layer_norm needs at least 2 channels")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if trace is not None:
        trace.append((xhat.copy(), var.copy()))
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return record("layer_norm", out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    factor = keep.astype(x.dtype) / (1.0 - rate)
    return record("dropout", x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------- point/voxel ops

def segment_max(x: Tensor, starts: np.ndarray) -> Tensor:
    """Max over contiguous row segments of ``x[P, C]`` beginning at ``starts``."""
    starts = np.asarray(starts, dtype=np.int64)
    P, C = x.shape
    out = np.maximum.reduceat(x.data, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, P)))
    hit = x.data == out[seg]
    rows = np.where(hit, np.arange(P)[:, None], P)
    arg = np.minimum.reduceat(rows, starts, axis=0)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[arg, np.arange(C)[None, :]] = g
        return (gx,)

    return record("segment_max", out, (x,), backward, pattern=lambda: arg.tobytes())


def scatter_to_grid(feat: Tensor, iy: np.ndarray, ix: np.ndarray, H: int, W: int) -> Tensor:
    """Write rows of ``feat[V, C]`` into a zero ``[C, H, W]`` canvas."""
    V, C = feat.shape
    flat = np.asarray(iy, dtype=np.int64) * W + np.asarray(ix, dtype=np.int64)
    if flat.size != np.unique(flat).size:
        raise ConfigError("duplicate grid coordinate in scatter")
    canvas = np.zeros((C, H * W), dtype=feat.dtype)
    canvas[:, flat] = feat.data.T

    def backward(g):
        return (g.reshape(C, H * W)[:, flat].T.copy(),)

    return record("scatter_to_grid", canvas.reshape(C, H, W), (feat,), backward)


# ---------------------------------------------------------------- losses

def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def gaussian_focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 2.0,
                        beta: float = 4.0, normalizer: float | None = None) -> Tensor:
    """Penalty-reduced focal loss on sigmoid heatmaps (positives where target == 1)."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    p = expit(z)
    log_p = -_softplus(-z)
    log_1mp = -_softplus(z)
    pos = t == 1.0
    w_neg = (1.0 - t) ** beta
    pos_term = -((1.0 - p) ** alpha) * log_p
    neg_term = -w_neg * (p ** alpha) * log_1mp
    num_pos = float(pos.sum())
    norm = normalizer if normalizer is not None else max(num_pos, 1.0)
    total = np.where(pos, pos_term, neg_term).sum() / norm

    def backward(g):
        d_pos = alpha * p * (1 - p) ** alpha * log_p - (1 - p) ** (alpha + 1)
        d_neg = -w_neg * alpha * p ** alpha * (1 - p) * log_1mp + w_neg * p ** (alpha + 1)
        return (g * np.where(pos, d_pos, d_neg) / norm,)

    return record("gaussian_focal_loss", np.asarray(total, dtype=z.dtype), (logits,), backward)


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray,
              normalizer: float | None = None) -> Tensor:
    """Sum of |pred - target| over channels at cells where ``mask`` is set."""
    diff = pred.data - np.asarray(target, dtype=pred.dtype)
    m = np.asarray(mask, dtype=pred.dtype)
    norm = normalizer if normalizer is not None else max(float(m.sum()), 1.0)
    total = (np.abs(diff) * m).sum() / norm
    sgn = np.sign(diff)

    def backward(g):
        return (g * sgn * m / norm,)

    return record("masked_l1", np.asarray(total, dtype=pred.dtype), (pred,), backward,
                  pattern=lambda: sgn.astype(np.int8).tobytes())
