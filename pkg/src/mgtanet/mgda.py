"""Motion-guided deformable alignment of a past BEV map onto the current frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.nn import add_conv, add_nonlocal, conv, deform_conv2d, nonlocal_
from .autodiff.tensor import ParamStore, Tensor
from .backbone import BEVFeatureMap
from .errors import ConfigError

KERNEL = 3
TAPS = KERNEL * KERNEL


@dataclass
class AlignmentMask:
    offsets: Tensor      # [2*T, H, W], (dx, dy) per tap, in grid cells
    modulation: Tensor   # [T, H, W], in (0, 1)


def motion_features(store: ParamStore, prev: list[BEVFeatureMap], cur: list[BEVFeatureMap],
                    prefix: str = "mgda", trace: dict | None = None) -> Tensor:
    """Fuse per-scale motion features of a (past, current) pair at scale-1 size."""
    if len(prev) != len(cur):
        raise ConfigError("motion features need the same scales for both frames")
    fused = None
    out_hw = prev[0].shape[1:]
    for s, (fp, fc) in enumerate(zip(prev, cur), start=1):
        if fp.shape != fc.shape:
            raise ConfigError(f"scale {s} shape mismatch: {fp.shape} vs {fc.shape}")
        diff = ops.sub(fc.tensor, fp.tensor)
        pre = conv(store, f"{prefix}.motion.s{s}", ops.concat([fp.tensor, diff], axis=0))
        m = ops.add(pre, nonlocal_(store, f"{prefix}.nonlocal.s{s}", pre, trace=trace))
        if m.shape[1:] != out_hw:
            m = ops.upsample_bilinear(m, out_hw)
        fused = m if fused is None else ops.add(fused, m)
    return fused


def predict_mask(store: ParamStore, motion: Tensor, prefix: str = "mgda") -> AlignmentMask:
    raw = conv(store, f"{prefix}.mask", motion)
    return AlignmentMask(ops.getitem(raw, slice(0, 2 * TAPS)),
                         ops.sigmoid(ops.getitem(raw, slice(2 * TAPS, 3 * TAPS))))


def deform_align(store: ParamStore, prev: BEVFeatureMap, mask: AlignmentMask,
                 prefix: str = "mgda") -> BEVFeatureMap:
    y = deform_conv2d(prev.tensor, mask.offsets, mask.modulation,
                      store[f"{prefix}.align.w"], store[f"{prefix}.align.b"])
    return BEVFeatureMap(y, prev.frame_index, prev.scale, aligned=True)


class MotionGuidedAlignment:
    """One parameter set shared by every past frame."""

    def __init__(self, store: ParamStore, channels: int, num_scales: int = 2, prefix: str = "mgda"):
        self.store, self.prefix, self.channels = store, prefix, channels
        for s in range(1, num_scales + 1):
            add_conv(store, f"{prefix}.motion.s{s}", 2 * channels, channels)
            add_nonlocal(store, f"{prefix}.nonlocal.s{s}", channels)
        add_conv(store, f"{prefix}.mask", channels, 3 * TAPS, k=1, init="zeros")
        # centre tap x2 offsets the 0.5 modulation at init: alignment starts as identity
        add_conv(store, f"{prefix}.align", channels, channels, k=KERNEL, init="zeros")
        w = np.zeros((channels, channels, KERNEL, KERNEL))
        w[np.arange(channels), np.arange(channels), KERNEL // 2, KERNEL // 2] = 2.0
        store.set(f"{prefix}.align.w", w)

    def __call__(self, prev: list[BEVFeatureMap], cur: list[BEVFeatureMap], prev_fused: BEVFeatureMap,
                 trace: dict | None = None) -> BEVFeatureMap:
        motion = motion_features(self.store, prev, cur, self.prefix, trace)
        mask = predict_mask(self.store, motion, self.prefix)
        if trace is not None:
            trace.setdefault("motion", []).append(motion.data)
            trace.setdefault("offsets", []).append(mask.offsets.data)
            trace.setdefault("modulation", []).append(mask.modulation.data)
        return deform_align(self.store, prev_fused, mask, self.prefix)
