"""End-to-end command-line behavior and exit codes."""

import json
import os
import shutil

import pytest

from depthforge import cli, fileio
from depthforge.cli import main

TINY_CONFIG = """
# benchmark-scale tiny setup
seed = 0
max_epochs = 2
lr = 0.005
beta = 0.05
gamma = 2.0
batch_size = 4
early_stop_patience = 5
base_width = 64
blocks_per_stage = 1,1
width_multiplier = 0.125
dropout_p = 0.0
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    train_dir = root / "train"
    val_dir = root / "val"
    assert main(["gen", "--out", str(train_dir), "--scenes", "6",
                 "--size", "64x32", "--seed", "0"]) == 0
    assert main(["gen", "--out", str(val_dir), "--scenes", "2",
                 "--size", "64x32", "--seed", "50"]) == 0
    return train_dir, val_dir


class TestGen:
    def test_writes_numbered_folders_and_manifest(self, tmp_path):
        out = tmp_path / "scenes"
        assert main(["gen", "--out", str(out), "--scenes", "4",
                     "--seed", "3"]) == 0
        folders = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert folders == ["0000", "0001", "0002", "0003"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 3
        for name in ("image_left.png", "image_right.png", "depth_left.png",
                     "depth_right.png", "calib.txt", "true_rho.pfm"):
            assert (out / "0000" / name).exists()

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen", "--out", str(out), "--scenes", "2",
                         "--seed", "7"]) == 0
        for name in ("depth_left.png", "true_rho.pfm", "image_right.png"):
            assert (a / "0001" / name).read_bytes() == \
                (b / "0001" / name).read_bytes()
        # manifests agree up to the timestamp and output paths
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        for key in ("command", "config", "seed", "inputs_hash"):
            assert ma[key] == mb[key]

    def test_zero_density_usage_error(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "x"), "--scenes", "1",
                     "--gt-density", "0"]) == 2

    def test_bad_size_usage_error(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "x"), "--scenes", "1",
                     "--size", "banana"]) == 2


class TestConfigParsing:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(TINY_CONFIG)
        train_kwargs, net_kwargs = cli.parse_config_file(path)
        assert train_kwargs["seed"] == 0
        assert net_kwargs["blocks_per_stage"] == (1, 1)
        assert net_kwargs["width_multiplier"] == 0.125

    def test_missing_required_key_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\n")
        with pytest.raises(cli.UsageError, match="max_epochs"):
            cli.parse_config_file(path)

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nmax_epochs = 2\nlearning_rate = 0.1\n")
        with pytest.raises(cli.UsageError, match="learning_rate"):
            cli.parse_config_file(path)


class TestTrainPredictEval:
    @pytest.fixture(scope="class")
    def trained(self, dataset, tmp_path_factory):
        train_dir, val_dir = dataset
        out = tmp_path_factory.mktemp("run")
        cfg = out / "tiny.cfg"
        cfg.write_text(TINY_CONFIG)
        code = main(["train", "--data", str(train_dir), "--val", str(val_dir),
                     "--config", str(cfg), "--out", str(out)])
        assert code == 0
        return out

    def test_train_outputs(self, trained):
        assert (trained / "best.ckpt").exists()
        assert (trained / "log.csv").exists()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train"
        lines = (trained / "log.csv").read_text().splitlines()
        assert lines[1].startswith("epoch,")

    def test_missing_config_key_exit_2(self, dataset, tmp_path):
        train_dir, val_dir = dataset
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 0\n")
        assert main(["train", "--data", str(train_dir), "--val", str(val_dir),
                     "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_divergence_exit_3(self, dataset, tmp_path):
        train_dir, val_dir = dataset
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(TINY_CONFIG.replace("lr = 0.005", "lr = 1e9")
                       .replace("beta = 0.05", "beta = 10.0"))
        assert main(["train", "--data", str(train_dir), "--val", str(val_dir),
                     "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_resume_continues_iteration(self, dataset, trained, tmp_path):
        from depthforge import net
        train_dir, val_dir = dataset
        _, t0, _ = net.load_checkpoint(trained / "best.ckpt")
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY_CONFIG)
        out = tmp_path / "resumed"
        assert main(["train", "--data", str(train_dir), "--val", str(val_dir),
                     "--config", str(cfg), "--out", str(out),
                     "--resume", str(trained / "best.ckpt")]) == 0
        _, t1, _ = net.load_checkpoint(out / "best.ckpt")
        assert t1 > t0

    def test_predict_then_eval(self, dataset, trained, tmp_path):
        train_dir, _ = dataset
        pred = tmp_path / "pred"
        assert main(["predict", "--checkpoint", str(trained / "best.ckpt"),
                     "--images", str(train_dir), "--out", str(pred)]) == 0
        sub = pred / "0000"
        assert (sub / "rho.pfm").exists() and (sub / "depth.png").exists()
        rho = fileio.read_pfm(sub / "rho.pfm")
        assert rho.shape == (16, 32)  # half resolution
        depth, _ = fileio.read_depth(sub / "depth.png")
        assert depth.shape == (32, 64)  # upsampled to ground-truth size
        assert main(["eval", "--pred", str(pred), "--gt", str(train_dir),
                     "--protocol", "ablation"]) == 0

    def test_eval_gt_as_prediction_is_perfect(self, dataset, tmp_path,
                                              capsys):
        train_dir, _ = dataset
        pred = tmp_path / "perfect"
        for folder in sorted(os.listdir(train_dir)):
            src = train_dir / folder
            if not src.is_dir():
                continue
            dst = pred / folder
            dst.mkdir(parents=True)
            shutil.copy(src / "depth_left.png", dst / "depth.png")
        assert main(["eval", "--pred", str(pred), "--gt", str(train_dir),
                     "--protocol", "ablation"]) == 0
        row = capsys.readouterr().out.splitlines()[-1]
        values = [float(v) for v in row.split(",")]
        assert values[:4] == [0.0, 0.0, 0.0, 0.0]
        assert values[4:] == [1.0, 1.0, 1.0]

    def test_eval_unknown_protocol_exit_2(self, dataset, capsys):
        train_dir, _ = dataset
        assert main(["eval", "--pred", str(train_dir), "--gt", str(train_dir),
                     "--protocol", "nope"]) == 2
        assert "eigen80" in capsys.readouterr().err

    def test_eval_mismatched_counts_exit_2(self, dataset, trained, tmp_path):
        train_dir, _ = dataset
        pred = tmp_path / "partial"
        assert main(["predict", "--checkpoint", str(trained / "best.ckpt"),
                     "--images", str(train_dir), "--out", str(pred)]) == 0
        shutil.rmtree(pred / "0001")
        assert main(["eval", "--pred", str(pred), "--gt", str(train_dir),
                     "--protocol", "ablation"]) == 2


class TestVerifyCommand:
    def test_quick_passes(self):
        assert main(["verify", "--level", "quick"]) == 0

    def test_unknown_fault_is_usage_error(self, capsys):
        code = main(["verify", "--level", "quick", "--inject", "nonsense"])
        assert code in (1, 2)
