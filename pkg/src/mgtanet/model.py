"""End-to-end pipeline: voxel encoding, backbone, temporal fusion, detection head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autodiff import ops
from .autodiff.nn import add_conv, conv
from .autodiff.tensor import ParamStore, Tensor
from .backbone import Backbone, BEVFeatureMap
from .detection import DetectionHead
from .errors import ConfigError
from .mgda import MotionGuidedAlignment
from .sequence import NUM_FRAMES, NUM_SCANS, Sequence
from .stfa import SpatioTemporalAggregation, StfaConfig
from .voxel import EncoderWidths, GridConfig, TemporalVoxelSet, VoxelFeatureEncoder, voxelize


class ModelConfig(BaseModel):
    """Architecture switches.

    ``temporal="none"`` is the single-frame model (only the last frame is
    encoded). ``"stfa"`` aggregates K frames with deformable attention, after
    motion-guided alignment when ``use_mgda`` is set. ``"concat"`` fuses the
    raw K maps with one 3x3 conv and no alignment.
    """

    model_config = ConfigDict(extra="forbid")

    grid: GridConfig = Field(default_factory=GridConfig)
    widths: EncoderWidths = Field(default_factory=EncoderWidths)
    channels: int = 32
    num_scans: int = NUM_SCANS
    num_frames: int = NUM_FRAMES
    num_classes: int = 2
    use_smvfe: bool = True
    occupancy: bool = False
    temporal: Literal["none", "stfa", "concat"] = "stfa"
    use_mgda: bool = True
    stfa: StfaConfig = Field(default_factory=StfaConfig)
    dtype: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.num_frames < 1 or self.num_scans < 1 or self.num_classes < 1:
            raise ValueError("frames, scans and classes must be positive")
        if self.temporal != "none" and self.num_frames < 2:
            raise ValueError("temporal fusion needs num_frames >= 2")
        if self.use_smvfe and self.num_scans < 2:
            raise ValueError("motion-aware voxel encoding needs at least two scans")
        if self.stfa.channels != self.channels:
            raise ValueError(f"stfa.channels {self.stfa.channels} != channels {self.channels}")
        H, W = self.grid.bev_shape
        if H % 2 or W % 2:
            raise ValueError(f"BEV grid must have even dims, got {H}x{W}")
        return self

    @property
    def frames_used(self) -> int:
        return 1 if self.temporal == "none" else self.num_frames


@dataclass
class EncodedInputs:
    voxels: list[TemporalVoxelSet]   # oldest first, last entry is the frame of interest


class MGTANet:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.store = store if store is not None else ParamStore(rng_seed=seed, dtype=dtype)
        s, C = self.store, cfg.channels
        self.vfe = VoxelFeatureEncoder(s, cfg.grid, cfg.num_scans, cfg.widths,
                                       use_motion=cfg.use_smvfe, occupancy=cfg.occupancy)
        self.backbone = Backbone(s, self.vfe.out_channels, C)
        self.mgda = None
        self.stfa = None
        if cfg.temporal == "stfa":
            if cfg.use_mgda:
                self.mgda = MotionGuidedAlignment(s, C)
            self.stfa = SpatioTemporalAggregation(s, cfg.stfa.model_copy(update={"num_frames": cfg.num_frames}))
        elif cfg.temporal == "concat":
            add_conv(s, "concat.fuse", cfg.num_frames * C, C, init="zeros")
            w = np.zeros((C, cfg.num_frames * C, 3, 3))
            w[np.arange(C), np.arange(C), 1, 1] = 1.0   # start as the single-frame map
            s.set("concat.fuse.w", w)
        self.head = DetectionHead(s, C, cfg.num_classes)

    # ------------------------------------------------------------ inputs

    def encode_inputs(self, seq: Sequence, seed: int = 0) -> EncodedInputs:
        """Voxelize the frames the model consumes; ``seq`` must be ego-compensated."""
        need = self.cfg.frames_used
        if seq.num_frames < need:
            raise ConfigError(f"model needs {need} frames, sequence has {seq.num_frames}")
        frames = seq.frames[-need:]
        for f in frames:
            if f.num_scans != self.cfg.num_scans:
                raise ConfigError(f"model built for {self.cfg.num_scans} scans, frame has {f.num_scans}")
        # seeded by lag from the keyframe, so the keyframe is voxelized alike for any K
        return EncodedInputs([voxelize(f, self.cfg.grid, seed=seed + 7919 * (need - 1 - i))
                              for i, f in enumerate(frames)])

    # ------------------------------------------------------------ forward

    def bev_features(self, voxels: TemporalVoxelSet, frame_index: int = 0):
        canvas = self.vfe(voxels)
        return self.backbone(canvas, frame_index)

    def forward(self, inputs: EncodedInputs, training: bool = False,
                rng: np.random.Generator | None = None, trace: dict | None = None) -> dict[str, Tensor]:
        feats = [self.bev_features(v, i) for i, v in enumerate(inputs.voxels)]
        cur = feats[-1]
        past = feats[-2::-1]   # t-1, t-2, ...
        if trace is not None:
            trace["bev"] = [f[2].tensor.data for f in feats]
        fused = self.fuse(cur, past, training, rng, trace)
        pred = self.head(fused)
        if trace is not None:
            trace["fused"] = fused.data
            trace["heatmap"] = pred["heatmap"].data
        return pred

    __call__ = forward

    def fuse(self, cur: tuple[BEVFeatureMap, ...], past: list[tuple[BEVFeatureMap, ...]],
             training: bool, rng, trace: dict | None) -> Tensor:
        if self.cfg.temporal == "none":
            return cur[2].tensor
        if self.cfg.temporal == "concat":
            return conv(self.store, "concat.fuse",
                        ops.concat([cur[2].tensor] + [p[2].tensor for p in past], axis=0))
        aligned = []
        for p in past:
            if self.mgda is not None:
                aligned.append(self.mgda([p[0], p[1]], [cur[0], cur[1]], p[2], trace).tensor)
            else:
                aligned.append(p[2].tensor)
        return self.stfa(cur[2].tensor, aligned, training=training, rng=rng, trace=trace)
