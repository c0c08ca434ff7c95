import json

import pytest

from noduleforge.pipeline import cli
from noduleforge.pipeline.config import ExperimentConfig, save_config
from noduleforge.pipeline.train import read_epoch_logs
from noduleforge.detection import read_detections_csv


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_rf_examples(capsys):
    assert run(capsys, "rf", "--layers", "3x3:1,3x3:2,3x3:4")[1].strip() == "15"
    assert run(capsys, "rf", "--layers", "3x3:1,3x3:2,3x3:4", "--cumulative")[1].strip() == "3 7 15"
    assert run(capsys, "rf", "--layers", "3x3:3")[1].strip() == "7"


def test_rf_table_from_config(capsys, tmp_path):
    cfg = ExperimentConfig()
    cfg.backbone.variant = "pro_hrnet"
    save_config(cfg, tmp_path / "c.toml")
    code, out, _ = run(capsys, "rf", "--config", tmp_path / "c.toml")
    assert code == cli.EXIT_OK
    lines = out.splitlines()
    assert lines[0].split() == ["stage", "stream", "dilation", "rf"]
    assert len(lines) > 4


def test_bad_layer_spec_is_usage_error(capsys):
    code, _, err = run(capsys, "rf", "--layers", "3y3:one")
    assert code == cli.EXIT_USAGE and "nforge rf" in err


def test_gradcheck_prints_table_and_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--repeats", "1")
    assert code == cli.EXIT_OK
    assert "conv3d" in out


@pytest.mark.parametrize("argv", [["train", "--data", "x", "--config", "/nonexistent/c.toml"],
                                  ["teleport"], ["rf", "--bogus"]])
def test_usage_errors_exit_two(capsys, argv):
    assert run(capsys, *argv)[0] == cli.EXIT_USAGE


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == cli.EXIT_OK


def test_invalid_config_values_exit_one(capsys, tmp_path):
    (tmp_path / "c.toml").write_text("[train]\nlearning_rate = 1\n")
    assert run(capsys, "rf", "--config", tmp_path / "c.toml")[0] == cli.EXIT_INVALID


def test_thread_override(monkeypatch, capsys):
    class Args:
        threads = 3

    assert cli._threads(Args) == 3
    monkeypatch.setenv("NFORGE_THREADS", "2")
    assert cli._threads(Args) == 2
    monkeypatch.setenv("NFORGE_THREADS", "many")
    assert run(capsys, "rf", "--layers", "3x3:1")[0] == cli.EXIT_USAGE


def test_missing_dataset_exits_one(capsys, tmp_path):
    assert run(capsys, "split", "--data", tmp_path / "nothing", "--out", tmp_path)[0] == cli.EXIT_INVALID


def test_impossible_synthesis_exits_one(capsys, tmp_path):
    assert run(capsys, "synth", "--n-volumes", 3, "--dims", 8, "--out", tmp_path)[0] == cli.EXIT_INVALID


def _tiny_config(path):
    cfg = ExperimentConfig()
    cfg.data.patch, cfg.data.crop, cfg.data.crop_jitter = 16, 8, 2.0
    cfg.backbone.base_width, cfg.backbone.blocks, cfg.backbone.levels = 2, 1, 3
    cfg.detection.head_width, cfg.detection.head_hidden, cfg.detection.refine_hidden = 4, 8, 8
    cfg.detection.roi_size = 2
    cfg.detection.anchor_scales = {1: (4.0, 6.0)}
    cfg.train.epochs, cfg.train.batch_size = 2, 2
    save_config(cfg.validate(), path)


def test_end_to_end_flow(capsys, tmp_path):
    data, runs = tmp_path / "data", tmp_path / "run"
    _tiny_config(tmp_path / "c.toml")
    assert run(capsys, "synth", "--n-volumes", 6, "--dims", 24, "--seed", 3, "--out", data)[0] == 0
    code, out, _ = run(capsys, "split", "--data", data, "--kind", "holdout", "--train-fraction", 0.5,
                       "--out", tmp_path)
    assert code == 0 and "train: 3" in out and "test: 3" in out
    split = tmp_path / "split.json"
    assert run(capsys, "train", "--config", tmp_path / "c.toml", "--data", data, "--split", split,
               "--out", runs)[0] == 0
    assert [e.epoch for e in read_epoch_logs(runs / "epochs.csv")] == [1, 2]
    assert (runs / "training.png").stat().st_size > 0

    # resuming a finished run with a longer horizon continues from the last checkpoint
    assert run(capsys, "train", "--config", tmp_path / "c.toml", "--data", data, "--split", split,
               "--out", runs, "--epochs", 3, "--resume")[0] == 0
    assert [e.epoch for e in read_epoch_logs(runs / "epochs.csv")] == [1, 2, 3]

    ev = tmp_path / "eval"
    assert run(capsys, "eval", "--data", data, "--split", split, "--checkpoint", runs, "--out", ev)[0] == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["n_volumes"] == 3 and 0.0 <= report["all"]["ap50"] <= 1.0
    assert (ev / "pr.csv").read_text().startswith("threshold,precision,recall")
    assert (ev / "pr.png").stat().st_size > 0

    vol = sorted((data / "volumes").glob("*.json"))[0]
    code, out, _ = run(capsys, "infer", "--checkpoint", runs, "--volume", vol, "--out", tmp_path / "d.csv")
    assert code == 0
    read_detections_csv(tmp_path / "d.csv")

    assert run(capsys, "eval", "--data", data, "--checkpoint", tmp_path / "nope", "--out", ev)[0] == 2
