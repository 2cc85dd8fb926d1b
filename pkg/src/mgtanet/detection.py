"""Center-heatmap detection head, target rendering, loss, decoding and BEV-distance AP."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import add_conv, conv
from .autodiff.tensor import ParamStore, Tensor
from .errors import DataError
from .sequence import GTBox
from .voxel import GridConfig

HEATMAP_BIAS = -2.19
REG_CHANNELS = {"offset": 2, "z": 1, "size": 3, "yaw": 2}
REG_WEIGHT = 0.25
MIN_RADIUS = 2
MIN_OVERLAP = 0.1
DISTANCE_THRESHOLDS = (0.5, 1.0)
RECALL_POINTS = 101


@dataclass
class Detection:
    cls: int
    x: float
    y: float
    z: float
    l: float  # noqa: E741
    w: float
    h: float
    yaw: float
    score: float


@dataclass
class TargetMaps:
    heatmap: np.ndarray       # [num_classes, H, W]
    regression: np.ndarray    # [8, H, W]: offset(2), z, log-size(3), sin, cos
    mask: np.ndarray          # [H, W] bool
    skipped: int = 0


class DetectionHead:
    def __init__(self, store: ParamStore, channels: int, num_classes: int, prefix: str = "head"):
        self.store, self.prefix, self.num_classes = store, prefix, num_classes
        add_conv(store, f"{prefix}.shared", channels, channels)
        add_conv(store, f"{prefix}.heatmap", channels, num_classes, k=1, init="zeros")
        store.set(f"{prefix}.heatmap.b", np.full(num_classes, HEATMAP_BIAS))
        for name, c in REG_CHANNELS.items():
            add_conv(store, f"{prefix}.{name}", channels, c, k=1, init="zeros")

    def __call__(self, features: Tensor) -> dict[str, Tensor]:
        x = ops.relu(conv(self.store, f"{self.prefix}.shared", features))
        out = {"heatmap": conv(self.store, f"{self.prefix}.heatmap", x)}
        for name in REG_CHANNELS:
            out[name] = conv(self.store, f"{self.prefix}.{name}", x)
        return out


def regression_tensor(pred: dict[str, Tensor]) -> Tensor:
    return ops.concat([pred[n] for n in REG_CHANNELS], axis=0)


# ---------------------------------------------------------------- targets

def gaussian_radius(height: float, width: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest centre shift keeping IoU >= ``min_overlap`` (CenterNet's three cases)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Max-composite a Gaussian with peak 1 at integer cell (cx, cy)."""
    sigma = (2 * radius + 1) / 6.0
    H, W = heatmap.shape
    ys = np.arange(max(cy - radius, 0), min(cy + radius + 1, H))
    xs = np.arange(max(cx - radius, 0), min(cx + radius + 1, W))
    g = np.exp(-((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) / (2 * sigma * sigma))
    region = heatmap[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
    np.maximum(region, g, out=region)


def cell_coords(x, y, cfg: GridConfig):
    """Continuous (column, row) grid coordinates of metric BEV points."""
    return ((np.asarray(x) - cfg.range_min[0]) / cfg.voxel_size[0],
            (np.asarray(y) - cfg.range_min[1]) / cfg.voxel_size[1])


def render_targets(gt: Iterable[GTBox], cfg: GridConfig, num_classes: int) -> TargetMaps:
    H, W = cfg.bev_shape
    heat = np.zeros((num_classes, H, W))
    reg = np.zeros((8, H, W))
    mask = np.zeros((H, W), dtype=bool)
    skipped = 0
    for b in gt:
        u, v = cell_coords(b.center[0], b.center[1], cfg)
        ix, iy = int(math.floor(u)), int(math.floor(v))
        if not (0 <= ix < W and 0 <= iy < H) or not 0 <= b.cls < num_classes:
            skipped += 1
            continue
        length = b.size[0] / cfg.voxel_size[0]
        width = b.size[1] / cfg.voxel_size[1]
        radius = max(MIN_RADIUS, int(gaussian_radius(length, width)))
        draw_gaussian(heat[b.cls], ix, iy, radius)
        reg[:, iy, ix] = (u - ix, v - iy, b.center[2], *np.log(b.size),
                          math.sin(b.yaw), math.cos(b.yaw))
        mask[iy, ix] = True
    return TargetMaps(heat, reg, mask, skipped)


# ---------------------------------------------------------------- loss

def detection_loss(pred: dict[str, Tensor], targets: TargetMaps) -> tuple[Tensor, dict[str, float]]:
    """Focal heatmap loss + 0.25 x masked L1 regression, both over max(1, #GT centres)."""
    num_pos = max(float(targets.mask.sum()), 1.0)
    hm = ops.gaussian_focal_loss(pred["heatmap"], targets.heatmap, normalizer=num_pos)
    reg = ops.masked_l1(regression_tensor(pred), targets.regression,
                        targets.mask[None].repeat(8, axis=0), normalizer=num_pos)
    total = ops.add(hm, ops.scale(reg, REG_WEIGHT))
    return total, {"heatmap": float(hm.data), "regression": float(reg.data), "total": float(total.data)}


# ---------------------------------------------------------------- decoding

def local_peaks(scores: np.ndarray) -> np.ndarray:
    """3x3 peak mask per channel; plateaus keep only their lowest-index cell.

    A cell is a peak when it is strictly above every neighbour that precedes
    it in row-major order and at least as high as every neighbour after it.
    """
    C, H, W = scores.shape
    pad = np.pad(scores, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    peak = np.ones(scores.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[:, 1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            before = dy < 0 or (dy == 0 and dx < 0)
            peak &= (scores > nb) if before else (scores >= nb)
    return peak


def decode(pred: dict[str, Tensor | np.ndarray], cfg: GridConfig, top_k: int = 50,
           threshold: float = 0.1) -> list[Detection]:
    arr = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in pred.items()}
    scores = 1.0 / (1.0 + np.exp(-arr["heatmap"].astype(np.float64)))
    C, H, W = scores.shape
    cand = np.flatnonzero(local_peaks(scores).reshape(-1))
    s = scores.reshape(-1)[cand]
    order = np.lexsort((cand, -s))[:top_k]
    dets = []
    for flat in cand[order]:
        score = float(scores.reshape(-1)[flat])
        if score < threshold:
            continue
        c, rem = divmod(int(flat), H * W)
        iy, ix = divmod(rem, W)
        off = arr["offset"][:, iy, ix]
        x = (ix + off[0]) * cfg.voxel_size[0] + cfg.range_min[0]
        y = (iy + off[1]) * cfg.voxel_size[1] + cfg.range_min[1]
        size = np.exp(arr["size"][:, iy, ix])
        sin, cos = arr["yaw"][:, iy, ix]
        yaw = math.atan2(sin, cos)
        if yaw >= math.pi:
            yaw -= 2 * math.pi
        dets.append(Detection(c, float(x), float(y), float(arr["z"][0, iy, ix]),
                              *(float(v) for v in size), yaw, score))
    return dets


def write_detections(path: str | Path, rows: Iterable[tuple[int | str, int, Detection]]) -> None:
    """JSON lines ``{scene, frame, class, x, y, z, l, w, h, yaw, score}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene, frame, d in rows:
            rec = {"scene": scene, "frame": frame, "class": d.cls}
            rec.update({k: v for k, v in asdict(d).items() if k != "cls"})
            fh.write(json.dumps(rec) + "\n")


def read_detections(path: str | Path) -> list[tuple[int | str, int, Detection]]:
    out = []
    try:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            out.append((r["scene"], r["frame"], Detection(r["class"], r["x"], r["y"], r["z"],
                                                          r["l"], r["w"], r["h"], r["yaw"], r["score"])))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read detections from {path}: {exc}") from exc
    return out


# ---------------------------------------------------------------- evaluation

def interpolated_ap(precision: np.ndarray, recall: np.ndarray, points: int = RECALL_POINTS) -> float:
    """Mean over recall levels 0, 1/(points-1), ..., 1 of max precision at recall >= level."""
    if len(precision) == 0:
        return 0.0
    levels = np.linspace(0.0, 1.0, points)
    # running max from the right gives max precision at any later (higher-recall) point
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, levels, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def match_scene(dets: Sequence[Detection], gts: Sequence[GTBox], cls: int, threshold: float,
                ignore: Sequence[bool] | None = None) -> tuple[list[float], list[bool], int]:
    """Greedy matching in descending score against each detection's nearest GT.

    A detection is a true positive when its nearest same-class GT lies within
    ``threshold`` and is still unmatched; it never falls back to a farther GT,
    so a duplicate detection can only add a false positive. Detections matched
    to an ignored GT are dropped. Returns (scores, is_tp, #counted GT).
    """
    g_idx = [i for i, g in enumerate(gts) if g.cls == cls]
    ign = [bool(ignore[i]) if ignore is not None else False for i in g_idx]
    centres = np.array([gts[i].center[:2] for i in g_idx]).reshape(-1, 2)
    taken = np.zeros(len(g_idx), dtype=bool)
    cd = [d for d in dets if d.cls == cls]
    order = sorted(range(len(cd)), key=lambda i: -cd[i].score)
    scores, tps = [], []
    for i in order:
        d = cd[i]
        tp = False
        if len(centres):
            dist = np.hypot(centres[:, 0] - d.x, centres[:, 1] - d.y)
            j = int(np.argmin(dist))
            if dist[j] <= threshold:
                if ign[j]:
                    continue
                tp = not taken[j]
                taken[j] = True
        scores.append(d.score)
        tps.append(tp)
    return scores, tps, int(sum(not x for x in ign))


def evaluate_ap(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GTBox]], num_classes: int,
                thresholds: Sequence[float] = DISTANCE_THRESHOLDS,
                ignore: Sequence[Sequence[bool]] | None = None) -> dict:
    """Per-class AP at each distance threshold plus their mean.

    ``dets``/``gts`` are per-scene lists. Classes with no counted GT are left
    out of the mean; if none remain the mAP is ``None``.
    """
    per_class: dict[int, dict[float, float]] = {}
    for cls in range(num_classes):
        for thr in thresholds:
            all_scores, all_tp, n_gt = [], [], 0
            for s, (d, g) in enumerate(zip(dets, gts)):
                sc, tp, n = match_scene(d, g, cls, thr, None if ignore is None else ignore[s])
                all_scores += sc
                all_tp += tp
                n_gt += n
            if n_gt == 0:
                continue
            order = np.argsort(-np.asarray(all_scores, dtype=float), kind="stable")
            tp = np.asarray(all_tp, dtype=float)[order]
            ctp = np.cumsum(tp)
            precision = ctp / np.arange(1, len(tp) + 1)
            recall = ctp / n_gt
            per_class.setdefault(cls, {})[thr] = interpolated_ap(precision, recall)
    vals = [ap for d in per_class.values() for ap in d.values()]
    return {
        "per_class": {str(c): {str(t): ap for t, ap in d.items()} for c, d in per_class.items()},
        "mAP": float(np.mean(vals)) if vals else None,
    }
