"""Compact dense two-scale BEV backbone."""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ops
from .autodiff.nn import add_conv, conv
from .autodiff.tensor import ParamStore, Tensor
from .errors import ConfigError


@dataclass
class BEVFeatureMap:
    tensor: Tensor
    frame_index: int = 0
    scale: int = 1
    aligned: bool = False

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape


class Backbone:
    """Stage 1 at full resolution, stage 2 at half, merged by a 3x3 conv.

    Returns ``(F1, F2, F)`` where ``F1``/``F2`` are the per-scale features used
    for motion extraction and ``F`` is the fused map used downstream.
    """

    def __init__(self, store: ParamStore, in_channels: int, channels: int = 32,
                 prefix: str = "backbone"):
        self.store, self.prefix, self.channels = store, prefix, channels
        c = channels
        add_conv(store, f"{prefix}.stage1.conv0", in_channels, c)
        add_conv(store, f"{prefix}.stage1.conv1", c, c)
        add_conv(store, f"{prefix}.stage2.down", c, c)
        add_conv(store, f"{prefix}.stage2.conv0", c, c)
        add_conv(store, f"{prefix}.stage2.conv1", c, c)
        add_conv(store, f"{prefix}.fuse", 2 * c, c)

    def __call__(self, canvas: Tensor, frame_index: int = 0
                 ) -> tuple[BEVFeatureMap, BEVFeatureMap, BEVFeatureMap]:
        _, H, W = canvas.shape
        if H % 2 or W % 2:
            raise ConfigError(f"backbone needs even BEV dims, got {H}x{W}")
        s, p = self.store, self.prefix
        x = ops.relu(conv(s, f"{p}.stage1.conv0", canvas))
        f1 = ops.relu(conv(s, f"{p}.stage1.conv1", x))
        x = ops.relu(conv(s, f"{p}.stage2.down", f1, stride=2))
        x = ops.relu(conv(s, f"{p}.stage2.conv0", x))
        f2 = ops.relu(conv(s, f"{p}.stage2.conv1", x))
        fused = conv(s, f"{p}.fuse", ops.concat([f1, ops.upsample_bilinear(f2, (H, W))], axis=0))
        return (BEVFeatureMap(f1, frame_index, 1), BEVFeatureMap(f2, frame_index, 2),
                BEVFeatureMap(fused, frame_index, 1))
