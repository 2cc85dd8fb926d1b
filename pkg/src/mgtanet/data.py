"""Synthetic benchmark datasets: generation, on-disk layout and loading."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DataError
from .sequence import GTBox, Sequence, compensate_sequence, generate_scene, read_sequence, write_sequence

DATASET_FORMAT = "mgta-dataset"
DATASET_VERSION = 1


@dataclass
class Scene:
    name: str
    seq: Sequence               # ego-compensated
    gt: list[list[GTBox]]


def split_sizes(cfg: RunConfig, count: int | None) -> tuple[int, int]:
    """(train, test) sizes; an explicit ``count`` keeps the configured test fraction."""
    n_tr, n_te = cfg.data.num_train, cfg.data.num_test
    if count is None:
        return n_tr, n_te
    if count < 0:
        raise DataError("scene count must be non-negative")
    total = n_tr + n_te
    test = int(round(count * n_te / total)) if total else 0
    return count - test, test


def make_raw_scene(cfg: RunConfig, seed: int, index: int):
    """Scene ``index`` of the dataset drawn with ``seed``; independent of the other scenes."""
    ss = np.random.SeedSequence([seed, index])
    spec_rng, gen_seed = np.random.default_rng(ss.spawn(1)[0]), int(ss.generate_state(1)[0])
    spec = cfg.data.sampler(cfg.model.num_frames, cfg.model.num_scans).sample(spec_rng)
    return generate_scene(spec, gen_seed)


def build_scenes(cfg: RunConfig, seed: int, count: int | None = None) -> dict[str, list[Scene]]:
    n_train, n_test = split_sizes(cfg, count)
    out: dict[str, list[Scene]] = {"train": [], "test": []}
    for i in range(n_train + n_test):
        seq, gt = make_raw_scene(cfg, seed, i)
        split = "train" if i < n_train else "test"
        out[split].append(Scene(f"seq_{i:04d}", compensate_sequence(seq), gt))
    return out


def generate_dataset(cfg: RunConfig, out: str | Path, seed: int, count: int | None = None) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    n_train, n_test = split_sizes(cfg, count)
    splits: dict[str, list[str]] = {"train": [], "test": []}
    for i in range(n_train + n_test):
        seq, gt = make_raw_scene(cfg, seed, i)
        name = f"seq_{i:04d}"
        write_sequence(out / name, seq, gt, meta={"seed": seed, "index": i})
        splits["train" if i < n_train else "test"].append(name)
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "seed": seed,
                "K": cfg.model.num_frames, "N": cfg.model.num_scans, "splits": splits}
    try:
        (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise DataError(f"cannot write {out / 'dataset.json'}: {exc}") from exc
    return out


def load_dataset(path: str | Path) -> dict[str, list[Scene]]:
    path = Path(path)
    try:
        manifest = json.loads((path / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest in {path}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset format/version")
    out: dict[str, list[Scene]] = {}
    for split, names in manifest["splits"].items():
        scenes = []
        for name in names:
            seq, gt, _ = read_sequence(path / name)
            scenes.append(Scene(name, compensate_sequence(seq), gt))
        out[split] = scenes
    return out
