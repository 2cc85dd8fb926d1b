"""The ``mgta`` command line: subcommands, outputs and exit codes."""

import json

import numpy as np
import pytest

from helpers import tiny_config
from mgtanet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from mgtanet.config import save_config
from mgtanet.dumps import read_pgm, to_gray
from mgtanet.model import MGTANet
from mgtanet.sequence import compensate_sequence, read_sequence
from mgtanet.train import load_model, save_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A config file, a generated dataset and a trained run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    save_config(tiny_config(), root / "cfg.json")
    assert main(["gen", "--config", str(root / "cfg.json"), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(root / "cfg.json"), "--dataset", str(root / "data"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_gen_outputs(workspace, capsys):
    manifest = json.loads((workspace / "data" / "dataset.json").read_text())
    assert len(manifest["splits"]["train"]) == 2 and len(manifest["splits"]["test"]) == 1
    assert main(["gen", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "empty"),
                 "--count", "0", "--seed", "3"]) == EXIT_OK
    assert "train=0" in capsys.readouterr().out


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("config.json", "stage1.ckpt", "final.ckpt", "loss.csv", "metrics.json", "stage2_init.json"):
        assert (run / name).exists(), name


def test_eval_twice_identical(workspace):
    args = ["eval", "--config", str(workspace / "cfg.json"), "--checkpoint", str(workspace / "run" / "final.ckpt"),
            "--dataset", str(workspace / "data")]
    assert main(args + ["--out", str(workspace / "e1")]) == EXIT_OK
    assert main(args + ["--out", str(workspace / "e2")]) == EXIT_OK
    a = (workspace / "e1" / "metrics.json").read_bytes()
    assert a == (workspace / "e2" / "metrics.json").read_bytes()
    assert (workspace / "e1" / "detections.jsonl").read_bytes() == (workspace / "e2" / "detections.jsonl").read_bytes()
    assert set(json.loads((workspace / "e1" / "latency.json").read_text())) == {"mean", "p50", "max"}


def test_eval_empty_dataset(workspace):
    assert main(["eval", "--checkpoint", str(workspace / "run" / "final.ckpt"), "--dataset",
                 str(workspace / "empty"), "--out", str(workspace / "e0")]) == EXIT_OK
    m = json.loads((workspace / "e0" / "metrics.json").read_text())
    assert m["mAP"] is None and m["empty"] is True


def test_inspect_attention_counts(workspace):
    seq_dir = workspace / "data" / "seq_0000"
    out = workspace / "att"
    assert main(["inspect", "--checkpoint", str(workspace / "run" / "final.ckpt"), "--sequence", str(seq_dir),
                 "--select", "attention", "--out", str(out)]) == EXIT_OK
    cfg = tiny_config().model
    images = sorted(out.glob("attention_layer0_*.pgm"))
    assert len(images) == cfg.num_frames * cfg.stfa.heads
    assert read_pgm(images[0]).shape == cfg.grid.bev_shape


def test_inspect_dump_round_trip(workspace):
    seq_dir = workspace / "data" / "seq_0001"
    out = workspace / "hm"
    ckpt = workspace / "run" / "final.ckpt"
    assert main(["inspect", "--checkpoint", str(ckpt), "--sequence", str(seq_dir), "--select", "heatmap",
                 "--out", str(out)]) == EXIT_OK
    model = load_model(ckpt)
    seq, _, _ = read_sequence(seq_dir)
    trace = {}
    model(model.encode_inputs(compensate_sequence(seq)), trace=trace)
    assert np.load(out / "heatmap.npy").tobytes() == trace["heatmap"].tobytes()


@pytest.mark.parametrize("sel", ["motion", "offsets", "bev"])
def test_inspect_other_selectors(workspace, sel):
    out = workspace / f"sel_{sel}"
    assert main(["inspect", "--checkpoint", str(workspace / "run" / "final.ckpt"), "--sequence",
                 str(workspace / "data" / "seq_0000"), "--select", sel, "--out", str(out)]) == EXIT_OK
    assert list(out.glob("*.pgm")) and list(out.glob("*.npy"))


def test_inspect_bev_zero_model_is_gray(workspace):
    model = MGTANet(tiny_config().model)
    for name, t in model.store.items():
        model.store.set(name, np.zeros(t.shape))
    save_model(workspace / "zero.ckpt", model)
    out = workspace / "zero_bev"
    assert main(["inspect", "--checkpoint", str(workspace / "zero.ckpt"), "--sequence",
                 str(workspace / "data" / "seq_0000"), "--select", "bev", "--out", str(out)]) == EXIT_OK
    for p in out.glob("bev_frame*.pgm"):
        assert np.all(read_pgm(p) == 128)


def test_to_gray_range():
    g = to_gray(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert g.tolist() == [[0, 64], [128, 255]]


def test_usage_errors(workspace, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["gen", "--seed", "x"]) == EXIT_USAGE
    assert main(["inspect", "--checkpoint", str(workspace / "run" / "final.ckpt"), "--sequence",
                 str(workspace / "data" / "seq_0000"), "--select", "nope"]) == EXIT_USAGE
    assert main(["bench", "--variants", "Z"]) == EXIT_USAGE
    (workspace / "bad.json").write_text('{"model": {"unknown_key": 1}}')
    assert main(["gen", "--config", str(workspace / "bad.json"), "--out", str(workspace / "x")]) == EXIT_USAGE


def test_data_errors(workspace):
    assert main(["gen", "--config", str(workspace / "missing.json")]) == EXIT_DATA
    (workspace / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(workspace / "junk.ckpt"), "--dataset",
                 str(workspace / "data")]) == EXIT_DATA
    assert main(["eval", "--checkpoint", str(workspace / "run" / "final.ckpt"), "--dataset",
                 str(workspace / "nowhere")]) == EXIT_DATA
    assert main(["report", "--out", str(workspace / "nowhere")]) == EXIT_DATA


def test_numeric_failure(workspace):
    model = load_model(workspace / "run" / "final.ckpt")
    w = model.store["head.shared.w"].data.copy()
    w[...] = np.inf
    model.store.set("head.shared.w", w)
    save_model(workspace / "inf.ckpt", model)
    assert main(["eval", "--checkpoint", str(workspace / "inf.ckpt"), "--dataset", str(workspace / "data"),
                 "--out", str(workspace / "einf")]) == EXIT_NUMERIC


def test_bench_and_report(workspace, capsys):
    out = workspace / "bench"
    assert main(["bench", "--config", str(workspace / "cfg.json"), "--variants", "B,E", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "variant\tlabel\tmAP\toccluded_mAP"
    for name in ("bench.json", "ladder.csv", "ladder.png", "loss_curves.png", "loss_B.csv", "model_E.ckpt"):
        assert (out / name).exists(), name
    (out / "ladder.png").unlink()
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert (out / "ladder.png").exists()
    res = json.loads((out / "bench.json").read_text())
    assert set(res["metrics"]) == {"B", "E"} and "concat_not_better_occluded" not in res["checks"]
