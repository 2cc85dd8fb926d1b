"""Spatio-temporal aggregation by deformable cross-attention over K BEV maps.

Each layer derives one query map per frame from the main query, predicts
per-head sampling offsets and attention weights from it, gathers projected
values at the offset locations of that frame's input map, and updates the
main query with layer norm and a feed-forward block.

Head ``m`` owns channel block ``m`` of the value projection and row block
``m`` of the output projection, so the stacked ``[C, C]`` matrices are the
per-head projections laid side by side.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .autodiff import ops
from .autodiff.nn import add_conv, add_fc, conv, fc_params
from .autodiff.tensor import ParamStore, Tensor
from .errors import ConfigError


class StfaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_frames: int = 3
    heads: int = 4
    points: int = 4
    layers: int = 2
    channels: int = 32
    ffn_hidden: int = 64
    dropout: float = 0.1
    joint_softmax: bool = False     # normalise over all frames and points together
    ffn_residual: bool = True       # False: FFN(z) = FC2(ReLU(FC1(z))) with no residual/LN
    # "zero": every sample starts at its reference point; "grid": point j of head m
    # starts (j+1) cells out along direction 2*pi*m/M, which breaks the symmetry
    # between the J points of a head
    offset_init: Literal["zero", "grid"] = "zero"

    @model_validator(mode="after")
    def _check(self) -> "StfaConfig":
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.points < 1 or self.layers < 0 or self.num_frames < 1:
            raise ValueError("need points >= 1, layers >= 0 and frames >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        return self


def _flat(x: Tensor) -> Tensor:
    C, H, W = x.shape
    return ops.transpose(ops.reshape(x, (C, H * W)), (1, 0))


def _unflat(x: Tensor, H: int, W: int) -> Tensor:
    return ops.reshape(ops.transpose(x, (1, 0)), (x.shape[1], H, W))


def register_layer(store: ParamStore, cfg: StfaConfig, prefix: str) -> None:
    C, M, J = cfg.channels, cfg.heads, cfg.points
    add_conv(store, f"{prefix}.derive", 2 * C, C)
    add_fc(store, f"{prefix}.sample_offset", C, M * J * 2, init="zeros")
    add_fc(store, f"{prefix}.attn_weight", C, M * J, init="zeros")
    if cfg.offset_init == "grid":
        store.set(f"{prefix}.sample_offset.b", grid_offset_bias(M, J).reshape(-1))
    add_fc(store, f"{prefix}.value", C, C)
    # output and FFN-out start at zero so a fresh layer only normalizes its query
    add_fc(store, f"{prefix}.output", C, C, init="zeros")
    for ln in ("norm1", "norm2"):
        store.add(f"{prefix}.{ln}.gamma", (C,), init="ones")
        store.add(f"{prefix}.{ln}.beta", (C,), init="zeros")
    add_fc(store, f"{prefix}.ffn1", C, cfg.ffn_hidden)
    add_fc(store, f"{prefix}.ffn2", cfg.ffn_hidden, C, init="zeros")


def grid_offset_bias(heads: int, points: int) -> np.ndarray:
    """``[M, J, 2]`` start offsets: ring j+1 along one compass direction per head."""
    th = 2 * np.pi * np.arange(heads) / heads
    d = np.stack([np.cos(th), np.sin(th)], axis=1)
    d = d / np.abs(d).max(axis=1, keepdims=True)
    return d[:, None, :] * (np.arange(points) + 1.0)[None, :, None]


def derive_queries(store: ParamStore, query: Tensor, inputs: list[Tensor], prefix: str) -> list[Tensor]:
    """Slot 0 is the main query itself; slot k>0 is conv3x3 over [input_k, query]."""
    out = [query]
    for x in inputs[1:]:
        if x.shape != query.shape:
            raise ConfigError(f"input map {x.shape} does not match query {query.shape}")
        out.append(conv(store, f"{prefix}.derive", ops.concat([x, query], axis=0)))
    return out


def deformable_cross_attention(store: ParamStore, queries: list[Tensor], inputs: list[Tensor],
                               cfg: StfaConfig, prefix: str, record: dict | None = None) -> Tensor:
    """Aggregate ``inputs`` at query-driven offsets; returns ``[C, H, W]``.

    ``record``, when given, receives ``weights`` ``[K, M, J, H, W]`` and
    ``offsets`` ``[K, M, J, 2, H, W]`` arrays.
    """
    C, H, W = queries[0].shape
    K, M, J = len(queries), cfg.heads, cfg.points
    if C % M:
        raise ConfigError(f"channels {C} not divisible by heads {M}")
    if len(inputs) != K:
        raise ConfigError(f"{K} queries but {len(inputs)} input maps")
    D = C // M
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ref_x = cols.reshape(-1, 1).astype(queries[0].dtype)
    ref_y = rows.reshape(-1, 1).astype(queries[0].dtype)

    offsets, logits = [], []
    for hq in queries:
        hf = _flat(hq)
        offsets.append(ops.reshape(ops.fc(hf, *fc_params(store, f"{prefix}.sample_offset")),
                                   (H * W, M, J, 2)))
        logits.append(ops.reshape(ops.fc(hf, *fc_params(store, f"{prefix}.attn_weight")),
                                  (H * W, M, J)))
    if cfg.joint_softmax:
        joint = ops.softmax(ops.concat(logits, axis=2), axis=-1)      # [HW, M, K*J]
        weights = [ops.getitem(joint, (slice(None), slice(None), slice(k * J, (k + 1) * J)))
                   for k in range(K)]
    else:
        weights = [ops.softmax(lg, axis=-1) for lg in logits]

    heads: list[Tensor | None] = [None] * M
    for k, x in enumerate(inputs):
        v = ops.reshape(ops.transpose(ops.fc(_flat(x), *fc_params(store, f"{prefix}.value")), (1, 0)),
                        (M, D, H, W))
        for m in range(M):
            off = ops.getitem(offsets[k], (slice(None), m))              # [HW, J, 2]
            px = ops.add(ops.getitem(off, (slice(None), slice(None), 0)), ref_x)
            py = ops.add(ops.getitem(off, (slice(None), slice(None), 1)), ref_y)
            sampled = ops.bilinear_sample(ops.getitem(v, m), px, py)   # [D, HW, J]
            a = ops.getitem(weights[k], (slice(None), m))               # [HW, J]
            contrib = ops.sum(ops.mul(sampled, ops.reshape(a, (1, H * W, J))), axis=2)
            heads[m] = contrib if heads[m] is None else ops.add(heads[m], contrib)
    if record is not None:
        record["weights"] = np.stack([w.data.transpose(1, 2, 0).reshape(M, J, H, W) for w in weights])
        record["offsets"] = np.stack([o.data.transpose(1, 2, 3, 0).reshape(M, J, 2, H, W)
                                      for o in offsets])
    cat = ops.transpose(ops.concat(heads, axis=0), (1, 0))              # [HW, C]
    return _unflat(ops.fc(cat, *fc_params(store, f"{prefix}.output")), H, W)


def layer_update(store: ParamStore, y: Tensor, query: Tensor, cfg: StfaConfig, prefix: str,
                 training: bool = False, rng: np.random.Generator | None = None,
                 ln_trace: list | None = None) -> Tensor:
    C, H, W = query.shape
    yf = ops.dropout(_flat(y), cfg.dropout, training, rng)
    z = ops.layer_norm(ops.add(yf, _flat(query)), store[f"{prefix}.norm1.gamma"],
                       store[f"{prefix}.norm1.beta"], trace=ln_trace)
    h = ops.fc(ops.relu(ops.fc(z, *fc_params(store, f"{prefix}.ffn1"))),
               *fc_params(store, f"{prefix}.ffn2"))
    if cfg.ffn_residual:
        h = ops.layer_norm(ops.add(z, h), store[f"{prefix}.norm2.gamma"],
                           store[f"{prefix}.norm2.beta"], trace=ln_trace)
    return _unflat(h, H, W)


class SpatioTemporalAggregation:
    def __init__(self, store: ParamStore, cfg: StfaConfig, prefix: str = "stfa"):
        self.store, self.cfg, self.prefix = store, cfg, prefix
        for l in range(cfg.layers):
            register_layer(store, cfg, f"{prefix}.layer{l}")

    def __call__(self, current: Tensor, aligned: list[Tensor], training: bool = False,
                 rng: np.random.Generator | None = None, trace: dict | None = None) -> Tensor:
        """``aligned`` holds the K-1 past maps ordered t-1, t-2, ..."""
        query = current
        for l in range(self.cfg.layers):
            p = f"{self.prefix}.layer{l}"
            inputs = [query] + list(aligned)
            queries = derive_queries(self.store, query, inputs, p)
            rec = {} if trace is not None else None
            y = deformable_cross_attention(self.store, queries, inputs, self.cfg, p, rec)
            ln = [] if trace is not None else None
            query = layer_update(self.store, y, query, self.cfg, p, training, rng, ln)
            if trace is not None:
                trace.setdefault("attention", []).append(rec["weights"])
                trace.setdefault("sample_offsets", []).append(rec["offsets"])
                trace.setdefault("layernorm", []).extend(ln)
        return query
