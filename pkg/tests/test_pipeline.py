"""Run configuration, dataset generation, two-stage training, checkpoints and evaluation."""

import filecmp
import json

import numpy as np
import pytest

from helpers import tiny_config
from mgtanet.config import RunConfig, load_config, parse_config, save_config
from mgtanet.data import build_scenes, generate_dataset, load_dataset, split_sizes
from mgtanet.errors import ConfigError, DataError, NumericalError, TrainingError
from mgtanet.model import MGTANet
from mgtanet.sequence import read_sequence
from mgtanet import train as train_mod
from mgtanet.train import evaluate, load_model, run_training, save_model


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(temporal="concat")
        save_config(cfg, tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert back == cfg and back.to_json() == cfg.to_json()

    def test_reference_constants_are_defaults(self):
        cfg = RunConfig()
        assert cfg.model.num_scans == 10 and cfg.model.num_frames == 3
        assert cfg.train.stage2_lr_ratio == 0.2

    @pytest.mark.parametrize("data", [
        {"bogus": 1},
        {"model": {"stfa": {"heads": 3}}},
        {"model": {"channels": 16}},                  # stfa width no longer matches
        {"model": {"temporal": "stfa", "num_frames": 1}},
        {"train": {"batch_size": 0}},
        {"model": {"grid": {"voxel_size": [0.8, 0.8, 0.0]}}},
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_config(tmp_path / "nope.json")

    def test_single_frame_switch(self):
        assert tiny_config(temporal="none").model.frames_used == 1
        assert tiny_config().model.frames_used == 3


class TestDataset:
    def test_zero_count(self, tmp_path):
        generate_dataset(tiny_config(), tmp_path / "d", seed=0, count=0)
        manifest = json.loads((tmp_path / "d" / "dataset.json").read_text())
        assert manifest["splits"] == {"train": [], "test": []}
        assert load_dataset(tmp_path / "d") == {"train": [], "test": []}

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = tiny_config()
        generate_dataset(cfg, tmp_path / "a", seed=4)
        generate_dataset(cfg, tmp_path / "b", seed=4)
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        files = [p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()]
        assert len(files) > 3
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert not cmp.left_only and not cmp.right_only

    def test_default_format_twenty_sequences(self, tmp_path):
        generate_dataset(RunConfig(), tmp_path / "d", seed=0, count=20)
        manifest = json.loads((tmp_path / "d" / "dataset.json").read_text())
        names = manifest["splits"]["train"] + manifest["splits"]["test"]
        assert len(names) == 20 and (manifest["K"], manifest["N"]) == (3, 10)
        for name in names:
            m = json.loads((tmp_path / "d" / name / "manifest.json").read_text())
            assert (m["K"], m["N"]) == (3, 10)
        seq, gt, _ = read_sequence(tmp_path / "d" / names[0])
        assert seq.num_frames == 3 and all(f.num_scans == 10 for f in seq.frames)

    def test_split_sizes(self):
        cfg = RunConfig()
        assert split_sizes(cfg, None) == (60, 20)
        assert split_sizes(cfg, 20) == (15, 5)
        with pytest.raises(DataError):
            split_sizes(cfg, -1)

    def test_loaded_equals_built(self, tmp_path):
        cfg = tiny_config()
        generate_dataset(cfg, tmp_path / "d", seed=2)
        loaded = load_dataset(tmp_path / "d")
        built = build_scenes(cfg, 2)
        for split in ("train", "test"):
            for a, b in zip(loaded[split], built[split]):
                for fa, fb in zip(a.seq.frames, b.seq.frames):
                    for sa, sb in zip(fa.scans, fb.scans):
                        np.testing.assert_array_equal(sa.points.astype(np.float32), sb.points.astype(np.float32))

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "dataset.json").write_text('{"format": "other"}')
        with pytest.raises(DataError):
            load_dataset(tmp_path)


@pytest.fixture(scope="module")
def scenes():
    return build_scenes(tiny_config(), 0)


class TestTraining:
    def test_single_scene_loss_decreases(self, scenes):
        cfg = tiny_config(temporal="none").model_copy(deep=True)
        cfg.train.stage1_epochs, cfg.train.batch_size = 50, 1
        cfg.train.augment.enabled = False
        _, res = run_training(cfg, scenes["train"][:1], stages=("stage1",))
        losses = [r["loss"] for r in res[0].rows]
        assert len(losses) == 50 and losses[-1] < losses[0]

    def test_stage2_init_bookkeeping(self, scenes, tmp_path):
        cfg = tiny_config()
        model, res = run_training(cfg, scenes["train"], out=tmp_path)
        s1 = MGTANet(train_mod.stage1_config(cfg.model)).store
        info = json.loads((tmp_path / "stage2_init.json").read_text())
        assert sorted(info["loaded"]) == sorted(s1.params)
        assert info["fresh"] and all(n.startswith(("mgda.", "stfa.")) for n in info["fresh"])
        for name in ("stage1.ckpt", "final.ckpt", "loss.csv"):
            assert (tmp_path / name).exists()
        header = (tmp_path / "loss.csv").read_text().splitlines()[0]
        assert header == "stage,step,epoch,lr,loss,heatmap,regression"

    def test_stage2_uses_one_fifth_lr(self, scenes):
        cfg = tiny_config()
        _, res = run_training(cfg, scenes["train"])
        peak1 = max(r["lr"] for r in res[0].rows)
        peak2 = max(r["lr"] for r in res[1].rows)
        assert peak1 <= cfg.train.lr and peak2 <= cfg.train.lr * 0.2 + 1e-15

    def test_equal_seeds_identical_loss_csv(self, scenes, tmp_path):
        cfg = tiny_config()
        run_training(cfg, scenes["train"], out=tmp_path / "a")
        run_training(cfg, scenes["train"], out=tmp_path / "b")
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()

    def test_numeric_failure_keeps_stage_checkpoint(self, scenes, tmp_path, monkeypatch):
        real = train_mod.train_stage

        def failing(model, sc, cfg, name, *a, **kw):
            if name == "stage2":
                raise NumericalError("non-finite value in conv2d")
            return real(model, sc, cfg, name, *a, **kw)

        monkeypatch.setattr(train_mod, "train_stage", failing)
        with pytest.raises(TrainingError):
            run_training(tiny_config(), scenes["train"], out=tmp_path)
        assert (tmp_path / "ABORTED").exists() and not (tmp_path / "final.ckpt").exists()
        load_model(tmp_path / "stage1.ckpt")

    def test_nan_parameter_aborts(self, scenes):
        cfg = tiny_config(temporal="none")
        m = MGTANet(cfg.model)
        w = m.store["head.shared.w"].data.copy()
        w[0, 0, 0, 0] = np.nan
        m.store.set("head.shared.w", w)
        with pytest.raises(TrainingError):
            run_training(cfg, scenes["train"], init_from=m.store, stages=("stage2",))


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path):
        m = MGTANet(tiny_config().model, seed=3)
        save_model(tmp_path / "m.ckpt", m)
        back = load_model(tmp_path / "m.ckpt")
        assert back.cfg == m.cfg
        for name, t in m.store.items():
            assert back.store[name].data.tobytes() == t.data.tobytes()
            assert back.store[name].data.dtype == t.data.dtype

    def test_shape_mismatch_is_versioned(self, tmp_path):
        save_model(tmp_path / "m.ckpt", MGTANet(tiny_config().model))
        other = tiny_config(temporal="none").model
        with pytest.raises(DataError, match="schema v1"):
            load_model(tmp_path / "m.ckpt", other)

    def test_not_a_model(self, tmp_path):
        from mgtanet.autodiff import save_checkpoint
        save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {"format": "other"})
        with pytest.raises(DataError):
            load_model(tmp_path / "x.ckpt")


class TestEvaluate:
    def test_repeatable(self, scenes):
        cfg = tiny_config()
        m = MGTANet(cfg.model, seed=1)
        a = evaluate(m, scenes["test"] + scenes["train"], cfg)
        b = evaluate(m, scenes["test"] + scenes["train"], cfg)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert "latency_ms" not in a

    def test_empty(self):
        cfg = tiny_config()
        res = evaluate(MGTANet(cfg.model), [], cfg)
        assert res["empty"] is True and res["mAP"] is None

    @pytest.mark.parametrize("temporal", ["none", "stfa", "concat"])
    def test_modes_from_one_switch(self, scenes, temporal):
        cfg = tiny_config(temporal=temporal)
        res = evaluate(MGTANet(cfg.model), scenes["test"], cfg, with_dets=True)
        assert res["num_scenes"] == 1 and set(res["latency_ms"]) == {"mean", "p50", "max"}


class TestStageTwoStart:
    def test_concat_starts_as_single_frame_model(self, scenes):
        cfg = tiny_config(temporal="concat")
        single = MGTANet(tiny_config(temporal="none").model, seed=2)
        rng = np.random.default_rng(2)
        for name, t in single.store.items():
            single.store.set(name, rng.normal(0, 0.3, t.shape))
        fused = MGTANet(cfg.model, seed=2)
        fused.store.load_arrays(single.store.state_arrays())
        seq = scenes["train"][0].seq
        a = single(single.encode_inputs(seq))["heatmap"].data
        b = fused(fused.encode_inputs(seq))["heatmap"].data
        assert a.tobytes() == b.tobytes()

    def test_keyframe_voxels_independent_of_frame_count(self, scenes):
        seq = scenes["train"][0].seq
        one = MGTANet(tiny_config(temporal="none").model).encode_inputs(seq, seed=5).voxels[-1]
        three = MGTANet(tiny_config().model).encode_inputs(seq, seed=5).voxels[-1]
        assert one.coords.tobytes() == three.coords.tobytes()
        assert all(a.tobytes() == b.tobytes() for v in range(len(one))
                   for a, b in zip(one[v].buckets, three[v].buckets))
