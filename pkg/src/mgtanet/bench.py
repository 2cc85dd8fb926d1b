"""Ablation ladder on the synthetic benchmark, with CSV/JSON output and figures.

Variants:

    A  single-frame baseline (plain pillar features)
    B  A + motion-aware voxel encoding
    C  B + deformable temporal attention over K frames, no alignment
    D  C + motion-guided alignment (full model)
    E  B + plain concat fusion of the K maps (alignment ablation)

Every variant gets the same two-stage budget. Variants whose stage-1
network is identical (B..E) share one stage-1 run; since training is
deterministic this equals running stage 1 separately for each.
"""

from __future__ import annotations

import csv
import json
import logging
import textwrap
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Scene, build_scenes, load_dataset
from .train import evaluate, run_training, save_model, stage1_config, write_loss_csv

log = logging.getLogger(__name__)

VARIANTS: dict[str, tuple[str, dict]] = {
    "A": ("single-frame baseline", {"temporal": "none", "use_smvfe": False}),
    "B": ("+ motion voxel encoding", {"temporal": "none", "use_smvfe": True}),
    "C": ("+ temporal attention", {"temporal": "stfa", "use_smvfe": True, "use_mgda": False}),
    "D": ("+ motion-guided alignment", {"temporal": "stfa", "use_smvfe": True, "use_mgda": True}),
    "E": ("concat fusion, no alignment", {"temporal": "concat", "use_smvfe": True}),
}
LADDER = ("A", "B", "C", "D")
MIN_GAIN = 0.03
CSV_COLUMNS = ("variant", "label", "mAP", "occluded_mAP", "occluded_gt", "train_mAP")


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    _, update = VARIANTS[name]
    return cfg.model_copy(update={"model": cfg.model.model_copy(update=update)}, deep=True)


def load_scenes(cfg: RunConfig) -> dict[str, list[Scene]]:
    return load_dataset(cfg.dataset) if cfg.dataset else build_scenes(cfg, cfg.seed)


def ladder_checks(metrics: dict[str, dict]) -> dict:
    """Pass/fail flags for the ladder ordering, the total gain and the concat ablation."""
    out: dict = {}
    have = [v for v in LADDER if v in metrics]
    if len(have) == len(LADDER):
        m = [metrics[v]["mAP"] for v in LADDER]
        out["monotone"] = all(a <= b for a, b in zip(m, m[1:]))
        out["gain"] = m[-1] - m[0]
        out["gain_ok"] = out["gain"] >= MIN_GAIN
    if "D" in metrics and "E" in metrics:
        d, e = metrics["D"]["occluded"]["mAP"], metrics["E"]["occluded"]["mAP"]
        out["concat_not_better_occluded"] = (d is not None and e is not None and e <= d)
    return out


def run_bench(cfg: RunConfig, out: str | Path | None = None,
              variants: tuple[str, ...] = ("A", "B", "C", "D", "E"),
              scenes: dict[str, list[Scene]] | None = None) -> dict:
    """Train and evaluate each variant; returns ``{"metrics", "checks", "timing"}``.

    ``metrics`` and ``checks`` are a pure function of the config and seed;
    wall-clock numbers live under ``timing`` only.
    """
    t_start = time.perf_counter()
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if scenes is None:
        scenes = load_scenes(cfg)
    train, test = scenes["train"], scenes["test"]
    stage1_cache: dict[str, tuple] = {}
    metrics: dict[str, dict] = {}
    timing: dict[str, float] = {}
    for name in variants:
        t0 = time.perf_counter()
        vcfg = variant_config(cfg, name)
        key = stage1_config(vcfg.model).model_dump_json()
        if key not in stage1_cache:
            _, (r1,) = run_training(vcfg, train, stages=("stage1",))
            stage1_cache[key] = (r1.store, r1.rows)
        store, rows1 = stage1_cache[key]
        model, (r2,) = run_training(vcfg, train, init_from=store, stages=("stage2",))
        ev = evaluate(model, test, vcfg)
        ev_train = evaluate(model, train, vcfg)
        metrics[name] = {"label": VARIANTS[name][0], "mAP": ev["mAP"], "per_class": ev["per_class"],
                         "occluded": ev["occluded"], "train_mAP": ev_train["mAP"],
                         "num_test": len(test), "num_train": len(train)}
        timing[name] = time.perf_counter() - t0
        log.info("variant %s: mAP %s occluded %s (%.0fs)", name, ev["mAP"], ev["occluded"]["mAP"],
                 timing[name])
        if out is not None:
            write_loss_csv(out / f"loss_{name}.csv", rows1 + r2.rows)
            save_model(out / f"model_{name}.ckpt", model, variant=name)
    timing["total"] = time.perf_counter() - t_start
    result = {"metrics": metrics, "checks": ladder_checks(metrics), "timing": timing,
              "config": json.loads(cfg.to_json())}
    if out is not None:
        write_results(out, result)
        render_figures(out)
    return result


def write_results(out: Path, result: dict) -> None:
    (out / "bench.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    with open(out / "ladder.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for name, m in result["metrics"].items():
            w.writerow([name, m["label"], repr(m["mAP"]), repr(m["occluded"]["mAP"]),
                        m["occluded"]["num_gt"], repr(m["train_mAP"])])


def table_lines(result: dict) -> list[str]:
    """Tab-delimited summary for the terminal."""
    def fmt(v):
        return "nan" if v is None else f"{v:.4f}"

    lines = ["\t".join(CSV_COLUMNS[:4])]
    for name, m in result["metrics"].items():
        lines.append(f"{name}\t{m['label']}\t{fmt(m['mAP'])}\t{fmt(m['occluded']['mAP'])}")
    for k, v in result["checks"].items():
        lines.append(f"check\t{k}\t{v}")
    return lines


# ---------------------------------------------------------------- figures

def _read_losses(path: Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    loss = np.array([float(r["loss"]) for r in rows])
    return np.arange(len(rows)), loss, [r["stage"] for r in rows]


def render_figures(out: str | Path) -> list[Path]:
    """Redraw every figure from ``bench.json`` and the per-variant loss CSVs in ``out``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    result = json.loads((out / "bench.json").read_text())
    metrics = result["metrics"]
    names = list(metrics)
    written = []

    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    x = np.arange(len(names))
    overall = [metrics[n]["mAP"] or 0.0 for n in names]
    occl = [metrics[n]["occluded"]["mAP"] or 0.0 for n in names]
    ax.bar(x - 0.2, overall, 0.4, label="all objects", color="#4477aa")
    ax.bar(x + 0.2, occl, 0.4, label="occluded at keyframe", color="#cc6677")
    ax.set_xticks(x, [f"{n}\n" + textwrap.fill(metrics[n]["label"], 14) for n in names], fontsize=7)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(out / "ladder.png", dpi=120)
    plt.close(fig)
    written.append(out / "ladder.png")

    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    boundary = None
    for n in names:
        path = out / f"loss_{n}.csv"
        if not path.exists():
            continue
        steps, loss, stages = _read_losses(path)
        if boundary is None and "stage2" in stages:
            boundary = stages.index("stage2")
        k = max(1, len(loss) // 50)
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, label=n, lw=1.2)
    if boundary:
        ax.axvline(boundary, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("optimizer step (dashed: start of stage 2)")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)
    written.append(out / "loss_curves.png")
    return written
