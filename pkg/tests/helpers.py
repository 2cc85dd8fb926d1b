"""Shared test utilities: scalar probes and naive reference implementations."""

from __future__ import annotations

import math

import numpy as np

from mgtanet.autodiff import Tensor, ops


def probe(out: Tensor, seed: int = 0) -> Tensor:
    """Random linear functional of ``out``, so every output element affects the scalar."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, Tensor(w.astype(out.dtype))))


def leaf(arr, dtype=np.float64) -> Tensor:
    return Tensor(np.array(arr, dtype=dtype), requires_grad=True)


def naive_conv2d(x, w, b=None, stride=1, pad=None):
    C, H, W = x.shape
    co, ci, kh, kw = w.shape
    ph = (kh - 1) // 2 if pad is None else pad
    pw = (kw - 1) // 2 if pad is None else pad
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros((co, Ho, Wo))
    for o in range(co):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else b[o]
                for c in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            y = i * stride + u - ph
                            xx = j * stride + v - pw
                            if 0 <= y < H and 0 <= xx < W:
                                acc += w[o, c, u, v] * x[c, y, xx]
                out[o, i, j] = acc
    return out


def naive_bilinear(x, px, py):
    """One location at a time, four explicit neighbour reads with zero padding."""
    C, H, W = x.shape
    x0, y0 = math.floor(px), math.floor(py)
    fx, fy = px - x0, py - y0

    def at(r, c):
        if 0 <= r < H and 0 <= c < W:
            return x[:, r, c]
        return np.zeros(C)

    return ((1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1)
            + (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1))


def naive_deform_conv(x, offsets, modulation, w, b=None):
    """Per-pixel, per-tap loop over modulated deformable convolution."""
    C, H, W = x.shape
    co, ci, kh, kw = w.shape
    out = np.zeros((co, H, W))
    for i in range(H):
        for j in range(W):
            for t in range(kh * kw):
                u, v = divmod(t, kw)
                py = i + u - (kh - 1) // 2 + offsets[2 * t + 1, i, j]
                px = j + v - (kw - 1) // 2 + offsets[2 * t, i, j]
                s = naive_bilinear(x, px, py) * modulation[t, i, j]
                out[:, i, j] += w[:, :, u, v] @ s
            if b is not None:
                out[:, i, j] += b
    return out


def naive_softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def naive_nonlocal(x, s, name):
    """O((HW)^2) double loop over positions."""
    C, H, W = x.shape
    pos = x.reshape(C, H * W).T

    def lin(part, v):
        return v @ s[f"{name}.{part}.w"].data + s[f"{name}.{part}.b"].data

    th, ph, g = lin("theta", pos), lin("phi", pos), lin("g", pos)
    n = H * W
    aff = np.zeros((n, n))
    for i in range(n):
        row = np.array([th[i] @ ph[j] for j in range(n)])
        aff[i] = naive_softmax(row)
    agg = np.zeros_like(g)
    for i in range(n):
        for j in range(n):
            agg[i] += aff[i, j] * g[j]
    return lin("out", agg).T.reshape(C, H, W), aff


def tiny_config(**model):
    """Smallest end-to-end run: 8x8 BEV grid, 4 scans, 3 frames, 8 channels."""
    from mgtanet.config import RunConfig

    m = {"grid": {"range_min": [-3.2, -3.2, -5.0], "range_max": [3.2, 3.2, 3.0],
                  "voxel_size": [0.8, 0.8, 8.0]},
         "widths": {"c_q": 4, "c_m": 8, "c_b": 8}, "channels": 8, "num_scans": 4,
         "stfa": {"channels": 8, "heads": 2, "points": 2, "layers": 1, "ffn_hidden": 16}}
    m.update(model)
    return RunConfig.model_validate({
        "model": m,
        "data": {"num_train": 2, "num_test": 1, "scene_range": [-3.2, -3.2, 3.2, 3.2],
                 "min_objects": 1, "max_objects": 2, "ground_points": 20},
        "train": {"stage1_epochs": 2, "stage2_epochs": 1, "batch_size": 2},
    })
