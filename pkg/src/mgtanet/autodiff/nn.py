"""Composite layers built from the primitives in :mod:`ops`."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import ParamStore, Tensor

SE_REDUCTION = 4


def channel_wise_attention(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor,
                           pool_axes: tuple[int, ...] = ()) -> Tensor:
    """Squeeze-excitation gate on the last axis of ``x``.

    ``pool_axes`` are averaged before the gate MLP (the "squeeze"); with the
    default empty tuple every row gets its own gate, which is what a single
    motion vector needs. The gate lies in (0, 1), so ``|y| <= |x|``.
    """
    C = x.shape[-1]
    if C < 2:
        raise ConfigError("channel-wise attention needs at least 2 channels")
    if C < SE_REDUCTION or W1.shape != (C, C // SE_REDUCTION):
        raise ConfigError(f"channel-wise attention with C={C} needs W1 of shape "
                          f"({C}, {C // SE_REDUCTION}) and C >= {SE_REDUCTION}")
    s = ops.mean(x, axis=pool_axes, keepdims=True) if pool_axes else x
    h = ops.relu(ops.fc(s, W1, b1))
    gate = ops.sigmoid(ops.fc(h, W2, b2))
    return ops.mul(x, gate)


def nonlocal_block(x: Tensor, theta: tuple[Tensor, Tensor], phi: tuple[Tensor, Tensor],
                   g: tuple[Tensor, Tensor], out: tuple[Tensor, Tensor],
                   trace: dict | None = None) -> Tensor:
    """Embedded-Gaussian non-local operation on ``x[C,H,W]``.

    The 1x1 convolutions are applied as per-position FC layers. Returns only
    the block output; the caller adds the residual.
    """
    C, H, W = x.shape
    xf = ops.transpose(ops.reshape(x, (C, H * W)), (1, 0))
    t = ops.fc(xf, *theta)
    p = ops.fc(xf, *phi)
    v = ops.fc(xf, *g)
    affinity = ops.softmax(ops.matmul(t, ops.transpose(p, (1, 0))), axis=-1)
    if trace is not None:
        trace.setdefault("nonlocal_affinity", []).append(affinity.data)
    y = ops.fc(ops.matmul(affinity, v), *out)
    return ops.reshape(ops.transpose(y, (1, 0)), (C, H, W))


def kernel_taps(kh: int = 3, kw: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Row/column displacement of each kernel tap, row-major."""
    dy, dx = np.meshgrid(np.arange(kh) - (kh - 1) // 2, np.arange(kw) - (kw - 1) // 2, indexing="ij")
    return dy.reshape(-1), dx.reshape(-1)


def deform_conv2d(x: Tensor, offsets: Tensor, modulation: Tensor, W: Tensor,
                  b: Tensor | None = None) -> Tensor:
    """Modulated deformable convolution, stride 1, output size = input size.

    ``offsets`` is ``[2*T, H, W]`` with channels ``(dx_0, dy_0, dx_1, dy_1, ...)``
    for the T kernel taps in row-major order; ``modulation`` is ``[T, H, W]``.
    Output ``y[o, p] = sum_{c,i} W[o,c,i] * m_i(p) * x_c(p + tap_i + off_i(p))``.
    """
    C, H, Wd = x.shape
    cout, cin, kh, kw = W.shape
    T = kh * kw
    if cin != C:
        raise ConfigError(f"deform_conv2d channel mismatch: x has {C}, kernel expects {cin}")
    if offsets.shape != (2 * T, H, Wd) or modulation.shape != (T, H, Wd):
        raise ConfigError(f"deformable mask shapes {offsets.shape}/{modulation.shape} "
                          f"do not match input {x.shape} with {kh}x{kw} kernel")
    tap_y, tap_x = kernel_taps(kh, kw)
    rows, cols = np.meshgrid(np.arange(H), np.arange(Wd), indexing="ij")
    base_x = (cols[None] + tap_x[:, None, None]).astype(x.dtype)
    base_y = (rows[None] + tap_y[:, None, None]).astype(x.dtype)
    off = ops.reshape(offsets, (T, 2, H, Wd))
    px = ops.add(ops.getitem(off, (slice(None), 0)), base_x)
    py = ops.add(ops.getitem(off, (slice(None), 1)), base_y)
    sampled = ops.bilinear_sample(x, px, py)             # [C, T, H, W]
    sampled = ops.mul(sampled, ops.reshape(modulation, (1, T, H, Wd)))
    colsm = ops.reshape(sampled, (C * T, H * Wd))
    y = ops.matmul(ops.reshape(W, (cout, C * T)), colsm)
    if b is not None:
        y = ops.add(y, ops.reshape(b, (cout, 1)))
    return ops.reshape(y, (cout, H, Wd))


# ---------------------------------------------------------------- registration helpers

def add_fc(store: ParamStore, name: str, cin: int, cout: int, init: str = "uniform") -> None:
    store.add(f"{name}.w", (cin, cout), init=init, fan_in=cin)
    store.add(f"{name}.b", (cout,), init="zeros")


def add_conv(store: ParamStore, name: str, cin: int, cout: int, k: int = 3,
             init: str = "uniform", bias: bool = True) -> None:
    store.add(f"{name}.w", (cout, cin, k, k), init=init, fan_in=cin * k * k)
    if bias:
        store.add(f"{name}.b", (cout,), init="zeros")


def add_cwa(store: ParamStore, name: str, c: int) -> None:
    if c < SE_REDUCTION:
        raise ConfigError(f"channel-wise attention needs C >= {SE_REDUCTION}, got {c}")
    add_fc(store, f"{name}.fc1", c, c // SE_REDUCTION)
    add_fc(store, f"{name}.fc2", c // SE_REDUCTION, c)


def add_nonlocal(store: ParamStore, name: str, c: int) -> None:
    inner = max(c // 2, 1)
    for part in ("theta", "phi", "g"):
        add_fc(store, f"{name}.{part}", c, inner)
    add_fc(store, f"{name}.out", inner, c)


def fc_params(store: ParamStore, name: str) -> tuple[Tensor, Tensor]:
    return store[f"{name}.w"], store[f"{name}.b"]


def conv(store: ParamStore, name: str, x: Tensor, stride: int = 1) -> Tensor:
    b = store[f"{name}.b"] if f"{name}.b" in store else None
    return ops.conv2d(x, store[f"{name}.w"], b, stride=stride, padding="same")


def cwa(store: ParamStore, name: str, x: Tensor, pool_axes: tuple[int, ...] = ()) -> Tensor:
    return channel_wise_attention(x, *fc_params(store, f"{name}.fc1"),
                                  *fc_params(store, f"{name}.fc2"), pool_axes=pool_axes)


def nonlocal_(store: ParamStore, name: str, x: Tensor, trace: dict | None = None) -> Tensor:
    return nonlocal_block(x, fc_params(store, f"{name}.theta"), fc_params(store, f"{name}.phi"),
                          fc_params(store, f"{name}.g"), fc_params(store, f"{name}.out"),
                          trace=trace)
