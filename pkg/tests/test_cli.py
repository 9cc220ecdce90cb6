"""Configuration parsing and the command-line surface."""

import numpy as np
import pytest
from PIL import Image

from gazemap.cli import main
from gazemap.config import RunConfig, load_config, parse_config

TINY_CFG = """
# desk-scale settings
base_size = 64
width_factor = 0.03125
fuse_channels = 8
mode = full
batch_size = 4
max_epochs = 2
seed = 3
emd_grid = 4
auc_splits = 5
"""


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.base_size == 224
        assert cfg.learning_rate == 1e-4
        assert cfg.momentum == 0.9
        assert cfg.weight_decay == 0.0005
        assert cfg.mode == "full"
        assert cfg.emd_grid == 32

    def test_parse_and_comments(self):
        cfg = parse_config(TINY_CFG)
        assert cfg.base_size == 64 and cfg.seed == 3
        assert cfg.width_factor == pytest.approx(0.03125)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="wibble"):
            parse_config("wibble = 3\n")

    def test_bad_line_rejected(self):
        with pytest.raises(ValueError, match="key=value"):
            parse_config("just some words\n")

    def test_round_trip_through_text(self):
        cfg = parse_config(TINY_CFG)
        again = parse_config(cfg.to_text())
        assert again == cfg

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="absent.cfg"):
            load_config(tmp_path / "absent.cfg")

    def test_density_sigma_scales_with_base(self):
        assert RunConfig(base_size=224).resolved_density_sigma() == pytest.approx(8.0)
        assert RunConfig(base_size=64).resolved_density_sigma() == pytest.approx(8 * 64 / 224)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset + a short training run, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY_CFG)
    assert main(["synth", "--config", str(cfg_path), "--count", "6",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg_path),
                 "--data", str(root / "data" / "manifest.tsv"),
                 "--out", str(root / "run")]) == 0
    return root


class TestTrainCommand:
    def test_outputs_exist(self, workspace):
        run = workspace / "run"
        for name in ("model.ckpt", "history.csv", "run_config.cfg",
                     "run_summary.txt", "summary_metrics.csv"):
            assert (run / name).exists(), name

    def test_history_columns(self, workspace):
        header = (workspace / "run" / "history.csv").read_text().splitlines()[0]
        assert header == "step,train_loss,val_loss"

    def test_missing_manifest_nonzero_exit(self, workspace, capsys):
        code = main(["train", "--config", str(workspace / "tiny.cfg"),
                     "--data", str(workspace / "no_such_manifest.tsv"),
                     "--out", str(workspace / "x")])
        assert code != 0
        assert "no_such_manifest.tsv" in capsys.readouterr().err

    def test_invalid_config_nonzero_exit(self, workspace, capsys):
        bad = workspace / "bad.cfg"
        bad.write_text("nonsense_key = 1\n")
        code = main(["train", "--config", str(bad), "--data", "synth:2",
                     "--out", str(workspace / "y")])
        assert code != 0
        assert "nonsense_key" in capsys.readouterr().err

    def test_synth_keyword_data(self, tmp_path, workspace):
        code = main(["train", "--config", str(workspace / "tiny.cfg"),
                     "--data", "synth:4", "--out", str(tmp_path / "srun")])
        assert code == 0

    def test_mode_flag_sf(self, tmp_path, workspace):
        code = main(["train", "--config", str(workspace / "tiny.cfg"), "--mode", "SF",
                     "--data", "synth:4", "--out", str(tmp_path / "sf")])
        assert code == 0
        assert (tmp_path / "sf" / "model.ckpt").exists()


class TestPredictCommand:
    def test_png_matches_input_dims(self, workspace, tmp_path):
        out = tmp_path / "pred.png"
        code = main(["predict", "--config", str(workspace / "tiny.cfg"),
                     "--checkpoint", str(workspace / "run" / "model.ckpt"),
                     "--image", str(workspace / "data" / "synth0000.png"),
                     "--out", str(out)])
        assert code == 0
        with Image.open(out) as im:
            assert im.size == (64, 64) and im.mode == "L"

    def test_resizes_to_original_image_size(self, workspace, tmp_path):
        big = tmp_path / "big.png"
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 255, size=(100, 80, 3), dtype=np.uint8)).save(big)
        out = tmp_path / "pred_big.png"
        code = main(["predict", "--config", str(workspace / "tiny.cfg"),
                     "--checkpoint", str(workspace / "run" / "model.ckpt"),
                     "--image", str(big), "--out", str(out)])
        assert code == 0
        with Image.open(out) as im:
            assert im.size == (80, 100)

    def test_byte_identical_across_runs(self, workspace, tmp_path):
        args = ["predict", "--config", str(workspace / "tiny.cfg"),
                "--checkpoint", str(workspace / "run" / "model.ckpt"),
                "--image", str(workspace / "data" / "synth0001.png")]
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        assert main(args + ["--out", str(p1)]) == 0
        assert main(args + ["--out", str(p2)]) == 0
        assert p1.read_bytes() == p2.read_bytes()


class TestEvalCommand:
    def test_eval_checkpoint_writes_table(self, workspace, tmp_path):
        out = tmp_path / "eval.csv"
        code = main(["eval", "--config", str(workspace / "tiny.cfg"),
                     "--data", str(workspace / "data" / "manifest.tsv"),
                     "--checkpoint", str(workspace / "run" / "model.ckpt"),
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "image_id,cc,nss,auc_judd,auc_borji,s_auc,emd"
        assert lines[-1].startswith("aggregate,")
        assert len(lines) == 2 + 6  # header + per image + aggregate

    def test_aggregate_is_mean_of_rows(self, workspace, tmp_path):
        out = tmp_path / "eval2.csv"
        main(["eval", "--config", str(workspace / "tiny.cfg"),
              "--data", str(workspace / "data" / "manifest.tsv"),
              "--checkpoint", str(workspace / "run" / "model.ckpt"),
              "--out", str(out)])
        rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
        per_image = np.array([[float(v) for v in r[1:]] for r in rows[:-1]])
        aggregate = np.array([float(v) for v in rows[-1][1:]])
        np.testing.assert_allclose(aggregate, per_image.mean(axis=0), atol=1e-12)

    def test_groundtruth_as_prediction_maximizes_cc(self, workspace, tmp_path):
        """Feeding the groundtruth densities through --maps gives cc = 1."""
        from gazemap import dataio

        maps_dir = tmp_path / "maps"
        maps_dir.mkdir()
        cfg = load_config(workspace / "tiny.cfg")
        samples = dataio.load_manifest_samples(workspace / "data" / "manifest.tsv",
                                               cfg.base_size,
                                               sigma=cfg.resolved_density_sigma())
        for rec in samples:
            dataio.save_gray_png(maps_dir / f"{rec.image_id}.png", rec.density.array())
        out = tmp_path / "gt_eval.csv"
        code = main(["eval", "--config", str(workspace / "tiny.cfg"),
                     "--data", str(workspace / "data" / "manifest.tsv"),
                     "--maps", str(maps_dir), "--out", str(out)])
        assert code == 0
        rows = out.read_text().splitlines()
        agg = dict(zip(rows[0].split(","), rows[-1].split(",")))
        # 8-bit quantization of the stored map keeps cc just below 1
        assert float(agg["cc"]) >= 0.999
        assert float(agg["nss"]) >= 1.0

    def test_missing_map_reported_run_continues(self, workspace, tmp_path, capsys):
        maps_dir = tmp_path / "sparse_maps"
        maps_dir.mkdir()
        from gazemap import dataio
        cfg = load_config(workspace / "tiny.cfg")
        samples = dataio.load_manifest_samples(workspace / "data" / "manifest.tsv",
                                               cfg.base_size)
        for rec in samples[:3]:  # half the maps missing
            dataio.save_gray_png(maps_dir / f"{rec.image_id}.png", rec.density.array())
        out = tmp_path / "sparse.csv"
        code = main(["eval", "--config", str(workspace / "tiny.cfg"),
                     "--data", str(workspace / "data" / "manifest.tsv"),
                     "--maps", str(maps_dir), "--out", str(out)])
        assert code != 0  # errors occurred
        assert "synth0003" in capsys.readouterr().err
        lines = out.read_text().splitlines()
        assert len(lines) == 2 + 3  # the three available rows still evaluated


class TestGradcheckCommand:
    def test_fresh_build_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "conv2d/input" in out and "dense_combine" in out

    def test_corrupted_sigmoid_detected(self, capsys, monkeypatch):
        """Negative control: a wrong derivative must fail the suite."""
        import gazemap.autodiff as ad
        import gazemap.gradcheck  # noqa: F401  (suite reads ad.sigmoid dynamically)

        true_sigmoid = ad.sigmoid

        def corrupted(x):
            out = true_sigmoid(x)
            original = out._backward_fn

            def broken(grad):
                original(grad * 1.05)  # 5% derivative error

            out._backward_fn = broken
            return out

        monkeypatch.setattr(ad, "sigmoid", corrupted)
        assert main(["gradcheck"]) == 1
        err = capsys.readouterr()
        assert "FAIL" in err.out


def test_synth_command_writes_manifest(tmp_path):
    code = main(["synth", "--count", "3", "--seed", "5", "--out", str(tmp_path / "d")])
    assert code == 0
    manifest = tmp_path / "d" / "manifest.tsv"
    assert manifest.exists()
    assert len(manifest.read_text().splitlines()) == 3
