"""Command-line entry point: ``mgta gen|train|eval|inspect|bench|report``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config, save_config
from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mgtanet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", type=Path, help=out_help)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    common(g, "dataset directory")
    g.add_argument("--count", type=int, help="number of sequences (default: configured train + test)")

    t = sub.add_parser("train", help="two-stage training")
    common(t, "run directory for checkpoints and loss log")
    t.add_argument("--dataset", type=Path, help="dataset directory (default: generate from the seed)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, "directory for metrics.json and detections.jsonl")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--split", default="test")

    i = sub.add_parser("inspect", help="dump intermediate tensors as PGM images and .npy arrays")
    common(i, "dump directory")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--sequence", type=Path, required=True, help="sequence directory")
    i.add_argument("--select", required=True, help="bev | motion | offsets | attention | heatmap")

    b = sub.add_parser("bench", help="train and evaluate the ablation ladder, write tables and figures")
    common(b, "bench directory")
    b.add_argument("--dataset", type=Path)
    b.add_argument("--variants", default="A,B,C,D,E", help="comma-separated subset of A..E")

    r = sub.add_parser("report", help="redraw figures and print the table of an existing bench directory")
    r.add_argument("--out", type=Path, required=True, help="bench directory")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    upd = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "dataset", None) is not None:
        upd["dataset"] = str(args.dataset)
    return cfg.model_copy(update=upd) if upd else cfg


def _out(args, cfg: RunConfig, default: str) -> Path:
    if args.out is not None:
        return args.out
    return Path(cfg.out or "runs") / default


def _emit(**fields) -> None:
    """One ``key=value`` line per field on stdout."""
    for k, v in fields.items():
        print(f"{k}={v}")


def cmd_gen(args) -> int:
    from .data import generate_dataset

    cfg = _config(args)
    out = generate_dataset(cfg, _out(args, cfg, "dataset"), cfg.seed, args.count)
    manifest = json.loads((out / "dataset.json").read_text())
    _emit(dataset=out, train=len(manifest["splits"]["train"]), test=len(manifest["splits"]["test"]))
    return EXIT_OK


def cmd_train(args) -> int:
    from .bench import load_scenes
    from .train import evaluate, run_training

    cfg = _config(args)
    out = _out(args, cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    scenes = load_scenes(cfg)
    model, results = run_training(cfg, scenes["train"], out=out, eval_scenes=scenes["test"] or None)
    metrics = evaluate(model, scenes["test"], cfg)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    _emit(run=out, steps=sum(r.steps for r in results),
          final_loss=results[-1].rows[-1]["loss"] if results and results[-1].rows else "nan",
          mAP=metrics["mAP"])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import load_scenes
    from .detection import write_detections
    from .train import evaluate, load_model

    cfg = _config(args)
    model = load_model(args.checkpoint)
    cfg = cfg.model_copy(update={"model": model.cfg})
    scenes = load_scenes(cfg)
    if args.split not in scenes:
        raise UsageError(f"split {args.split!r} not in dataset (have {sorted(scenes)})")
    res = evaluate(model, scenes[args.split], cfg, with_dets=True)
    out = _out(args, cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.jsonl", res.pop("detections"))
    latency = res.pop("latency_ms")
    (out / "metrics.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    (out / "latency.json").write_text(json.dumps(latency, indent=1, sort_keys=True) + "\n")
    _emit(metrics=out / "metrics.json", mAP=res["mAP"], occluded_mAP=res["occluded"]["mAP"],
          empty=res["empty"])
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .dumps import SELECTORS, inspect_sequence
    from .sequence import compensate_sequence, read_sequence
    from .train import load_model

    if args.select not in SELECTORS:
        raise UsageError(f"unknown selector {args.select!r}; choose from {', '.join(SELECTORS)}")
    cfg = _config(args)
    model = load_model(args.checkpoint)
    seq, _, _ = read_sequence(args.sequence)
    written = inspect_sequence(model, compensate_sequence(seq), args.select, _out(args, cfg, "inspect"))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import VARIANTS, run_bench, table_lines

    cfg = _config(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UsageError(f"unknown variants {bad}; choose from {','.join(VARIANTS)}")
    out = _out(args, cfg, "bench")
    result = run_bench(cfg, out, variants)
    for line in table_lines(result):
        print(line)
    print(f"time\ttotal_s\t{result['timing']['total']:.1f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .bench import render_figures, table_lines

    path = args.out / "bench.json"
    try:
        result = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for p in render_figures(args.out):
        print(f"figure\t{p}")
    for line in table_lines(result):
        print(line)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect,
            "bench": cmd_bench, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError) as exc:
        print(f"mgta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mgta: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"mgta: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
