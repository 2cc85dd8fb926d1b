"""Two-stage training, evaluation and checkpoint bookkeeping."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, adam_step, clip_grad_norm, load_checkpoint, one_cycle_lr, save_checkpoint
from .autodiff.tensor import ParamStore
from .config import RunConfig
from .data import Scene
from .detection import decode, detection_loss, evaluate_ap, render_targets
from .errors import DataError, NumericalError, TrainingError
from .model import MGTANet, ModelConfig
from .sequence import augment_sequence, extract_donors, gt_sample_sequence

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mgta-model"
CHECKPOINT_SCHEMA = 1
LOSS_COLUMNS = ("stage", "step", "epoch", "lr", "loss", "heatmap", "regression")


@dataclass
class StageResult:
    name: str
    steps: int
    rows: list[dict] = field(default_factory=list)
    loaded: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    best_map: float | None = None
    store: ParamStore | None = None   # trained parameters of this stage's network


# ---------------------------------------------------------------- checkpoints

def save_model(path: str | Path, model: MGTANet, **meta) -> None:
    info = {"format": CHECKPOINT_FORMAT, "schema": CHECKPOINT_SCHEMA,
            "model": model.cfg.model_dump(mode="json"), "seed": model.store.rng_seed}
    info.update(meta)
    save_checkpoint(path, model.store.state_arrays(), info)


def load_model(path: str | Path, cfg: ModelConfig | None = None) -> MGTANet:
    """Rebuild a model from a checkpoint; every parameter must match by name and shape."""
    arrays, meta = load_checkpoint(path)
    if not meta or meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a model checkpoint")
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise DataError(f"{path}: checkpoint schema {meta.get('schema')} != {CHECKPOINT_SCHEMA}")
    if cfg is None:
        cfg = ModelConfig.model_validate(meta["model"])
    model = MGTANet(cfg, seed=int(meta.get("seed", 0)))
    expected = {n: t.shape for n, t in model.store.items()}
    got = {n: a.shape for n, a in arrays.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        shape = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
        raise DataError(f"checkpoint schema v{CHECKPOINT_SCHEMA} mismatch for {path}: "
                        f"missing={missing[:4]} unexpected={extra[:4]} shape={shape[:4]}")
    model.store.load_arrays(arrays, strict=True)
    return model


# ---------------------------------------------------------------- training

def _augment(scene: Scene, cfg: RunConfig, rng: np.random.Generator, donors):
    seq, gt = scene.seq, scene.gt
    aug = cfg.train.augment
    if not aug.enabled:
        return seq, gt
    if aug.gt_sampling and donors:
        xmin, ymin, xmax, ymax = cfg.data.scene_range
        seq, gt = gt_sample_sequence(seq, gt, donors, int(rng.integers(2**31)),
                                     num_samples=aug.gt_samples,
                                     scene_range=(xmin + 2, ymin + 2, xmax - 2, ymax - 2))
    return augment_sequence(seq, gt, aug.params(), int(rng.integers(2**31)))


def train_stage(model: MGTANet, scenes: list[Scene], cfg: RunConfig, name: str, epochs: int,
                lr_max: float, seed: int, eval_scenes: list[Scene] | None = None,
                best_path: Path | None = None) -> StageResult:
    """Adam + one-cycle over ``epochs``; gradients are averaged over each batch."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    n = len(scenes)
    batch = cfg.train.batch_size
    per_epoch = math.ceil(n / batch) if n else 0
    total = epochs * per_epoch
    result = StageResult(name, total)
    aug = cfg.train.augment
    donors = []
    if aug.enabled and aug.gt_sampling:
        for sc in scenes:
            donors += extract_donors(sc.seq, sc.gt)
    store = model.store
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, batch):
            store.zero_grad()
            parts_sum = {"total": 0.0, "heatmap": 0.0, "regression": 0.0}
            idx = order[b0:b0 + batch]
            for i in idx:
                seq, gt = _augment(scenes[i], cfg, rng, donors)
                inputs = model.encode_inputs(seq, seed=int(rng.integers(2**31)))
                targets = render_targets(gt[-1], model.cfg.grid, model.cfg.num_classes)
                with Tape() as tape:
                    pred = model(inputs, training=True, rng=rng)
                    loss, parts = detection_loss(pred, targets)
                tape.backward(loss)
                for k in parts_sum:
                    parts_sum[k] += parts[k]
            store.scale_grads(1.0 / len(idx))
            if cfg.train.grad_clip > 0:
                clip_grad_norm(store, cfg.train.grad_clip)
            lr = one_cycle_lr(step, total, lr_max)
            adam_step(store, lr, weight_decay=cfg.train.weight_decay)
            row = {"stage": name, "step": step, "epoch": epoch, "lr": lr,
                   "loss": parts_sum["total"] / len(idx), "heatmap": parts_sum["heatmap"] / len(idx),
                   "regression": parts_sum["regression"] / len(idx)}
            if not math.isfinite(row["loss"]):
                raise TrainingError(f"non-finite loss at {name} step {step}")
            result.rows.append(row)
            step += 1
        if cfg.train.eval_every and eval_scenes and (epoch + 1) % cfg.train.eval_every == 0:
            m = evaluate(model, eval_scenes, cfg)["mAP"]
            if m is not None and (result.best_map is None or m > result.best_map):
                result.best_map = m
                if best_path is not None:
                    save_model(best_path, model, stage=name, epoch=epoch, mAP=m)
        log.info("%s epoch %d/%d loss %.4f", name, epoch + 1, epochs,
                 np.mean([r["loss"] for r in result.rows[-per_epoch:]]) if per_epoch else float("nan"))
    return result


def stage1_config(model_cfg: ModelConfig) -> ModelConfig:
    return model_cfg.model_copy(update={"temporal": "none"})


def run_training(cfg: RunConfig, train: list[Scene], out: Path | None = None,
                 eval_scenes: list[Scene] | None = None, init_from: ParamStore | None = None,
                 stages: tuple[str, ...] = ("stage1", "stage2")) -> tuple[MGTANet, list[StageResult]]:
    """Stage 1 trains the single-frame network; stage 2 builds the configured network,
    copies every stage-1 parameter by name and fine-tunes at 1/5 of the peak LR.

    ``init_from`` skips stage 1 and starts stage 2 from the given parameters.
    On a numeric failure the last stage-boundary checkpoint is left in place.
    """
    results: list[StageResult] = []
    seed = cfg.seed
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        if init_from is None and "stage1" in stages:
            m1 = MGTANet(stage1_config(cfg.model), seed=seed)
            r1 = train_stage(m1, train, cfg, "stage1", cfg.train.stage1_epochs, cfg.train.lr, seed,
                             eval_scenes, out / "best.ckpt" if out else None)
            r1.store = m1.store
            results.append(r1)
            if out is not None:
                save_model(out / "stage1.ckpt", m1, stage="stage1")
            init_from = m1.store
        model = MGTANet(cfg.model, seed=seed)
        if init_from is not None:
            loaded, fresh = model.store.load_arrays(init_from.state_arrays())
        else:
            loaded, fresh = [], list(model.store.params)
        if "stage2" in stages:
            r2 = train_stage(model, train, cfg, "stage2", cfg.train.stage2_epochs,
                             cfg.train.lr * cfg.train.stage2_lr_ratio, seed, eval_scenes,
                             out / "best.ckpt" if out else None)
            r2.loaded, r2.fresh, r2.store = loaded, fresh, model.store
            results.append(r2)
        if out is not None:
            save_model(out / "final.ckpt", model, stage="final")
    except NumericalError as exc:
        if out is not None:
            (out / "ABORTED").write_text(f"{exc}\n")
        raise TrainingError(f"training aborted: {exc}") from exc
    finally:
        if out is not None:
            write_loss_csv(out / "loss.csv", [r for res in results for r in res.rows])
    if out is not None and results and results[-1].name == "stage2":
        (out / "stage2_init.json").write_text(json.dumps(
            {"loaded": results[-1].loaded, "fresh": results[-1].fresh}, indent=1))
    return model, results


def write_loss_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# ---------------------------------------------------------------- evaluation

def predict(model: MGTANet, scene: Scene, cfg: RunConfig, trace: dict | None = None):
    inputs = model.encode_inputs(scene.seq, seed=0)
    pred = model(inputs, training=False, trace=trace)
    return decode(pred, model.cfg.grid, cfg.eval.top_k, cfg.eval.score_threshold)


def evaluate(model: MGTANet, scenes: list[Scene], cfg: RunConfig, with_dets: bool = False) -> dict:
    """Keyframe detection metrics: overall and on the keyframe-occluded subset.

    Timing goes under ``latency_ms`` only when ``with_dets`` is set; the metric
    fields are a pure function of the inputs.
    """
    if not scenes:
        out = {"empty": True, "num_scenes": 0, "mAP": None, "per_class": {},
               "occluded": {"mAP": None, "per_class": {}, "num_gt": 0}}
        if with_dets:
            out["detections"] = []
            out["latency_ms"] = {}
        return out
    dets, gts, times = [], [], []
    for sc in scenes:
        t0 = time.perf_counter()
        dets.append(predict(model, sc, cfg))
        times.append((time.perf_counter() - t0) * 1e3)
        gts.append(sc.gt[-1])
    nc = model.cfg.num_classes
    thr = cfg.eval.distance_thresholds
    overall = evaluate_ap(dets, gts, nc, thr)
    ignore = [[not b.occluded for b in g] for g in gts]
    occl = evaluate_ap(dets, gts, nc, thr, ignore=ignore)
    out = {"empty": False, "num_scenes": len(scenes), "mAP": overall["mAP"],
           "per_class": overall["per_class"],
           "occluded": {"mAP": occl["mAP"], "per_class": occl["per_class"],
                        "num_gt": int(sum(b.occluded for g in gts for b in g))}}
    if with_dets:
        out["detections"] = [(sc.name, sc.seq.t, d) for sc, ds in zip(scenes, dets) for d in ds]
        out["latency_ms"] = {"mean": float(np.mean(times)), "p50": float(np.median(times)),
                             "max": float(np.max(times))}
    return out
