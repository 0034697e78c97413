import csv
import json
import math

import numpy as np
import pytest

from scfusion import cli, fusion
from scfusion.errors import ConfigError, NumericError, ParameterError
from scfusion.harness import checkpoint as ck
from scfusion.harness.ablation import max_workers, run_ablation
from scfusion.harness.config import ExperimentConfig, from_dict, load_config, save_config
from scfusion.harness.data import Domain, gen_dataset
from scfusion.harness.training import (
    build_classifier,
    classifier_forward,
    init_checkpoints,
    pretrain,
    run_step1,
    run_step2,
)

TINY = ExperimentConfig(
    pretrain_size=16, train_size=16, val_size=16, batch_size=8, step1_steps=2, step2_epochs=2
)


class TestData:
    @pytest.mark.parametrize("domain", list(Domain))
    def test_deterministic_and_shaped(self, domain):
        a, b = gen_dataset(domain, 20, 3), gen_dataset(domain, 20, 3)
        assert a.images.shape == (20, 1, 16, 16) and len(a) == 20
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, gen_dataset(domain, 20, 4).images)

    def test_balanced(self):
        labels = gen_dataset(Domain.TASK_A, 101, 0).labels
        assert set(labels) == {0, 1} and abs(int(labels.sum()) - 50) <= 1

    def test_domains_differ(self):
        a = gen_dataset(Domain.TASK_A, 8, 0).images
        b = gen_dataset(Domain.TASK_B, 8, 0).images
        assert not np.array_equal(a, b)

    def test_too_small(self):
        with pytest.raises(ParameterError):
            gen_dataset(Domain.TASK_A, 3, 0)

    def test_raw_pixel_linear_probe_is_weak(self):
        cfg = ExperimentConfig()
        train = gen_dataset(Domain.TASK_A, cfg.train_size, cfg.component_seed("train_data"))
        val = gen_dataset(Domain.TASK_A, cfg.val_size, cfg.component_seed("val_data"))
        best = 0.0
        for lam in (1e-2, 1.0, 1e2, 1e4):
            x = np.hstack([train.images.reshape(len(train), -1), np.ones((len(train), 1))])
            y = 2.0 * train.labels - 1.0
            w = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ y)
            xv = np.hstack([val.images.reshape(len(val), -1), np.ones((len(val), 1))])
            best = max(best, float(((xv @ w > 0) == val.labels).mean()))
        assert best < 0.9


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(seed=7, fusion_on=False, prefinetune_domain="none")
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_partial_file_uses_defaults(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 3}))
        assert load_config(tmp_path / "c.json") == ExperimentConfig(seed=3)

    @pytest.mark.parametrize("bad", [
        {"channels": 0}, {"mask_ratio": 1.0}, {"tau": 0.0}, {"prefinetune_domain": "other"},
        {"window": 3}, {"patch": 5}, {"nonsense": 1}, {"batch_size": 1}, {"lr_step1": -1.0},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            from_dict(bad)

    def test_unreadable(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_component_seeds(self):
        cfg = ExperimentConfig()
        seeds = {cfg.component_seed(k) for k in ("train_data", "val_data", "global_init", "fusion_init")}
        assert len(seeds) == 4
        assert cfg.component_seed("train_data") == int(
            np.random.SeedSequence([0, 0]).generate_state(1, dtype=np.uint32)[0])
        assert cfg.component_seed("train_data", seed=1) != cfg.component_seed("train_data")

    def test_digest_ignores_output_dir(self):
        cfg = ExperimentConfig()
        assert cfg.digest() == cfg.replace(out_dir="elsewhere").digest()
        assert cfg.digest() != cfg.replace(seed=1).digest()


class TestCheckpoint:
    def test_bytes_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        c = ck.Checkpoint({"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "s": np.array(2.5)}, "abc")
        ck.save(c, tmp_path / "x.ckpt")
        back = ck.load(tmp_path / "x.ckpt")
        assert back.config_hash == "abc" and back.version == ck.VERSION
        assert set(back.tensors) == set(c.tensors)
        for k in c.tensors:
            assert back.tensors[k].shape == c.tensors[k].shape
            assert back.tensors[k].tobytes() == c.tensors[k].tobytes()
        assert ck.to_bytes(back) == (tmp_path / "x.ckpt").read_bytes()

    def test_header_layout(self):
        raw = ck.to_bytes(ck.Checkpoint({"w": np.array([[1.0, 2.0]])}, "h"))
        assert raw[:4] == b"MSCF"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0",
        lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    ])
    def test_corrupt(self, mutate):
        raw = ck.to_bytes(ck.Checkpoint({"w": np.ones(3)}))
        with pytest.raises(ck.CheckpointError):
            ck.from_bytes(mutate(raw))

    def test_forward_identical_after_reload(self, tmp_path):
        cfg = TINY
        g, w = init_checkpoints(cfg)
        ck.save(g, tmp_path / "g.ckpt")
        ck.save(w, tmp_path / "w.ckpt")
        imgs = gen_dataset(Domain.TASK_A, 4, 0).images
        before = classifier_forward(build_classifier(cfg, g, w), imgs)[0]
        after = classifier_forward(build_classifier(cfg, ck.load(tmp_path / "g.ckpt"), ck.load(tmp_path / "w.ckpt")), imgs)[0]
        assert before.tobytes() == after.tobytes()


class TestStep1:
    @pytest.mark.slow
    def test_reconstruction_loss_decreases(self, pretrained):
        history = pretrained[2]
        assert history[199][1] < history[0][1]

    @pytest.mark.slow
    def test_initial_contrastive_loss_near_ln_batch(self, pretrained):
        cfg = ExperimentConfig()
        initial = pretrained[2][0][2]
        assert abs(initial - math.log(cfg.batch_size)) <= 0.2 * math.log(cfg.batch_size), initial

    def test_no_prefinetune_returns_fresh_init(self):
        cfg = TINY.replace(prefinetune_domain="none")
        g, w, history = pretrain(cfg)
        g0, w0 = init_checkpoints(cfg)
        assert history == []
        assert ck.to_bytes(g) == ck.to_bytes(g0) and ck.to_bytes(w) == ck.to_bytes(w0)

    def test_outputs(self, tmp_path):
        g, w = run_step1(TINY, tmp_path)
        rows = list(csv.reader(open(tmp_path / "step1_losses.csv")))
        assert rows[0] == ["step", "reconstruction_loss", "contrastive_loss"] and len(rows) == 3
        assert ck.to_bytes(ck.load(tmp_path / "global_encoder.ckpt")) == ck.to_bytes(g)
        assert all(k.startswith(("encoder.", "decoder.")) for k in g.tensors)
        assert "encoder.mask_token" not in w.tensors

    def test_deterministic(self):
        a, b = pretrain(TINY), pretrain(TINY)
        assert a[2] == b[2] and ck.to_bytes(a[1]) == ck.to_bytes(b[1])

    def test_divergence_is_numeric_error(self):
        with pytest.raises(NumericError):
            pretrain(TINY.replace(lr_step1=1e200))


class TestStep2:
    def test_one_row_per_epoch_and_files(self, tmp_path):
        report = run_step2(TINY, init_checkpoints(TINY), tmp_path)
        assert [r[0] for r in report.rows] == [1, 2]
        assert report.confusion.sum() == TINY.val_size
        rows = list(csv.reader(open(tmp_path / "step2_metrics.csv")))
        assert rows[0] == ["epoch", "train_loss", "train_acc", "val_acc"] and len(rows) == 3
        assert (tmp_path / "confusion.csv").exists()
        assert ck.load(tmp_path / "classifier.ckpt").config_hash == TINY.digest()

    def test_fusion_off_never_touches_fusion(self):
        cfg = TINY.replace(fusion_on=False)
        fusion.calls.clear()
        run_step2(cfg, init_checkpoints(cfg))
        assert sum(fusion.calls.values()) == 0
        run_step2(TINY, init_checkpoints(TINY))
        assert fusion.calls["fusion_block"] > 0

    def test_fusion_off_model_has_no_fusion_weights(self):
        m = build_classifier(TINY.replace(fusion_on=False), *init_checkpoints(TINY))
        assert not any(k.startswith(("fusion.", "global.")) for k in m.tensors)

    def test_zero_learning_rate_freezes_parameters(self, tmp_path):
        cfg = TINY.replace(lr_step2=0.0)
        run_step2(cfg, init_checkpoints(cfg), tmp_path)
        trained = ck.load(tmp_path / "classifier.ckpt").tensors
        fresh = build_classifier(cfg, *init_checkpoints(cfg)).tensors
        assert set(trained) == set(fresh)
        assert all(trained[k].tobytes() == fresh[k].tobytes() for k in fresh)

    def test_zero_learning_rate_step1(self):
        cfg = TINY.replace(lr_step1=0.0)
        g, w, _ = pretrain(cfg)
        g0, w0 = init_checkpoints(cfg)
        assert ck.to_bytes(g) == ck.to_bytes(g0) and ck.to_bytes(w) == ck.to_bytes(w0)

    def test_rerun_is_bit_identical(self, tmp_path):
        run_step2(TINY, init_checkpoints(TINY), tmp_path / "a")
        run_step2(TINY, init_checkpoints(TINY), tmp_path / "b")
        for name in ("step2_metrics.csv", "confusion.csv", "classifier.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestAblation:
    def test_grid(self, tmp_path):
        cfg = TINY.replace(step1_steps=1, step2_epochs=1)
        result = run_ablation(cfg, tmp_path, workers=1)
        assert len(result.reports) == 30
        rows = list(csv.DictReader(open(tmp_path / "ablation_summary.csv")))
        keys = {(r["fusion"], r["prefinetune_domain"], int(r["seed"])) for r in rows}
        assert len(rows) == 30 and len(keys) == 30
        assert {k[0] for k in keys} == {"on", "off"}
        assert {k[1] for k in keys} == {"none", "matched", "mismatched"}
        assert len(list(csv.DictReader(open(tmp_path / "ablation_medians.csv")))) == 6

    def test_parallel_matches_serial(self, tmp_path):
        cfg = TINY.replace(step1_steps=1, step2_epochs=1, ablation_seeds=(0, 1))
        run_ablation(cfg, tmp_path / "serial", workers=1)
        run_ablation(cfg, tmp_path / "parallel", workers=2)
        assert (tmp_path / "serial" / "ablation_summary.csv").read_bytes() == \
            (tmp_path / "parallel" / "ablation_summary.csv").read_bytes()

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("MSCFF_THREADS", "3")
        assert max_workers() == 3
        monkeypatch.setenv("MSCFF_THREADS", "junk")
        assert max_workers() == 1


class TestCli:
    def test_bad_arguments(self):
        assert cli.main(["nope"]) == 2
        assert cli.main(["step2", "--fusion", "maybe"]) == 2

    def test_bad_config(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"channels": -1}))
        assert cli.main(["step1", "--config", str(tmp_path / "c.json")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_numeric_failure(self, tmp_path):
        save_config(TINY.replace(lr_step1=1e200), tmp_path / "c.json")
        assert cli.main(["step1", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 3

    def test_gen_data(self, tmp_path):
        save_config(TINY, tmp_path / "c.json")
        assert cli.main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 0
        with np.load(tmp_path / "task_a_train.npz") as z:
            assert z["images"].shape == (16, 1, 16, 16)

    def test_step1_then_step2(self, tmp_path, capsys):
        save_config(TINY, tmp_path / "c.json")
        args = ["--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "run")]
        assert cli.main(["step1", *args]) == 0
        assert cli.main(["step2", *args, "--fusion", "off"]) == 0
        out = capsys.readouterr().out
        assert "loaded step-1 checkpoints" in out and "epoch   2" in out
        assert (tmp_path / "run" / "step2" / "step2_metrics.csv").exists()

    def test_gradcheck_and_selftest(self, capsys):
        assert cli.main(["gradcheck", "--seed", "1"]) == 0
        assert "gradient checks passed" in capsys.readouterr().out
        assert cli.main(["selftest"]) == 0
        assert "FAIL" not in capsys.readouterr().out
