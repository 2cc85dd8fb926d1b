"""Intermediate-tensor dumps: grayscale PGM images plus raw ``.npy`` arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import MGTANet
from .sequence import Sequence

SELECTORS = ("bev", "motion", "offsets", "attention", "heatmap")


def to_gray(img: np.ndarray) -> np.ndarray:
    """Min-max scale a 2D map to uint8; a constant (or non-finite) map becomes mid gray."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = np.min(img), np.max(img)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: Path, img: np.ndarray) -> Path:
    gray = to_gray(img)
    H, W = gray.shape
    path.write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + gray.tobytes())
    return path


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM file")
    W, H = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=H * W).reshape(H, W)


def _dump(out: Path, stem: str, arr: np.ndarray, written: list[Path]) -> None:
    np.save(out / f"{stem}.npy", arr)
    written.append(out / f"{stem}.npy")


def inspect_sequence(model: MGTANet, seq: Sequence, selector: str, out: str | Path) -> list[Path]:
    """Run one forward pass and dump the tensors named by ``selector``.

    Multi-channel maps are shown as their channel mean. ``attention`` writes
    one image per (frame, head) and layer holding the largest weight over the
    sampling points.
    """
    if selector not in SELECTORS:
        raise ConfigError(f"unknown selector {selector!r}; choose from {', '.join(SELECTORS)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trace: dict = {}
    model(model.encode_inputs(seq, seed=0), training=False, trace=trace)
    written: list[Path] = []

    if selector == "bev":
        for i, arr in enumerate(trace["bev"]):
            _dump(out, f"bev_frame{i}", arr, written)
            written.append(write_pgm(out / f"bev_frame{i}.pgm", arr.mean(axis=0)))
    elif selector == "heatmap":
        hm = trace["heatmap"]
        prob = 1.0 / (1.0 + np.exp(-hm.astype(np.float64)))
        _dump(out, "heatmap", hm, written)
        for c in range(prob.shape[0]):
            written.append(write_pgm(out / f"heatmap_class{c}.pgm", prob[c]))
    elif selector in ("motion", "offsets"):
        if "motion" not in trace:
            raise ConfigError(f"selector {selector!r} needs a model with motion-guided alignment")
        for k, (mot, off, mod) in enumerate(zip(trace["motion"], trace["offsets"], trace["modulation"]),
                                            start=1):
            if selector == "motion":
                _dump(out, f"motion_lag{k}", mot, written)
                written.append(write_pgm(out / f"motion_lag{k}.pgm", mot.mean(axis=0)))
            else:
                mag = np.hypot(off[0::2], off[1::2])          # per-tap offset length
                _dump(out, f"offsets_lag{k}", off, written)
                _dump(out, f"modulation_lag{k}", mod, written)
                written.append(write_pgm(out / f"offsets_lag{k}.pgm", mag.mean(axis=0)))
                written.append(write_pgm(out / f"modulation_lag{k}.pgm", mod.mean(axis=0)))
    else:
        if "attention" not in trace:
            raise ConfigError("selector 'attention' needs a model with temporal attention")
        for l, w in enumerate(trace["attention"]):          # [K, M, J, H, W]
            _dump(out, f"attention_layer{l}", w, written)
            peak = w.max(axis=2)
            for k in range(peak.shape[0]):
                for m in range(peak.shape[1]):
                    written.append(write_pgm(out / f"attention_layer{l}_frame{k}_head{m}.pgm", peak[k, m]))
    return written
