import importlib
import math

import numpy as np
import pytest

from noduleforge.backbone import ConfigError
from noduleforge.data import SynthConfig, synth_generate
from noduleforge.detection import Box3, Detection, read_detections_csv
from noduleforge.pipeline.config import ConfigFileError, ExperimentConfig, load_config, save_config
from noduleforge.pipeline.train import (EPOCH_FIELDS, EpochLog, Trainer, TrainStateError, build_model,
                                        clip_gradients, latest_checkpoint, load_model, prepare_samples,
                                        read_epoch_logs, sgd_step, train, write_epoch_logs)
from noduleforge.tensor import Tensor

ev = importlib.import_module("noduleforge.pipeline.evaluate")


# -- optimiser -------------------------------------------------------------------

def _param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_plain_sgd_step():
    p = _param(1.0, 0.5)
    sgd_step([p], lr=0.1, momentum=0.0, velocity={})
    assert p.data[0] == pytest.approx(0.95)


def test_zero_gradient_decays_velocity_only():
    p = _param(2.0, 0.0)
    vel = {id(p): np.array([1.0])}
    sgd_step([p], lr=0.1, momentum=0.9, velocity=vel)
    assert vel[id(p)][0] == pytest.approx(0.9)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.9)


def test_two_momentum_steps_match_hand_recurrence():
    p = _param(1.0, 0.5)
    vel = {}
    sgd_step([p], 0.1, 0.9, vel)
    p.grad = np.array([-0.25])
    sgd_step([p], 0.1, 0.9, vel)
    v1 = 0.5
    v2 = 0.9 * v1 - 0.25
    assert p.data[0] == pytest.approx(1.0 - 0.1 * v1 - 0.1 * v2, abs=1e-15)


def test_missing_gradient_is_a_state_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(TrainStateError):
        sgd_step([p], 0.1, 0.9, {})


def test_clip_gradients_scales_to_max_norm():
    p = _param(0.0, 3.0)
    q = _param(0.0, 4.0)
    assert clip_gradients([p, q], 1.0) == pytest.approx(5.0)
    assert math.hypot(p.grad[0], q.grad[0]) == pytest.approx(1.0)


# -- configuration -----------------------------------------------------------------

def test_config_toml_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.train.epochs = 7
    cfg.backbone.variant = "serial"
    cfg.detection.anchor_scales = {1: (3.0, 5.0), 2: (9.0, 11.0)}
    save_config(cfg, tmp_path / "c.toml")
    back = load_config(tmp_path / "c.toml")
    assert back.to_dict() == cfg.to_dict()
    assert back.hash() == cfg.hash()
    longer = load_config(tmp_path / "c.toml")
    longer.train.epochs = 9
    assert longer.hash() != cfg.hash() and longer.recipe_hash() == cfg.recipe_hash()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigFileError):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("[train]\nlr = \n")
    with pytest.raises(ConfigFileError):
        load_config(tmp_path / "bad.toml")
    (tmp_path / "unknown.toml").write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "unknown.toml")
    for section, key, value in (("train", "lr", 0.0), ("train", "epochs", 0), ("train", "batch_size", 0)):
        cfg = ExperimentConfig()
        setattr(getattr(cfg, section), key, value)
        with pytest.raises(ConfigError):
            cfg.validate()


def test_learning_rate_schedule():
    cfg = ExperimentConfig().train
    assert [cfg.lr_at(e) for e in (1, 20, 21, 30)] == [0.01, 0.01, pytest.approx(0.001), pytest.approx(0.001)]


def test_epoch_log_csv_columns(tmp_path):
    logs = [EpochLog(1, 2.5, 2.0, 0.1, 0.3, 0.05, 1.5), EpochLog(2, 1.25)]
    write_epoch_logs(tmp_path / "e.csv", logs)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == ",".join(EPOCH_FIELDS) == "epoch,train_loss,val_loss,ap,ap50,ap75,seconds"
    back = read_epoch_logs(tmp_path / "e.csv")
    assert back[0] == logs[0] and back[1].epoch == 2 and math.isnan(back[1].ap)


# -- training loop ---------------------------------------------------------------

def tiny_config(epochs=2, seed=0) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.patch, cfg.data.crop, cfg.data.crop_jitter = 16, 8, 2.0
    cfg.backbone.base_width, cfg.backbone.blocks, cfg.backbone.levels = 2, 1, 3
    cfg.detection.head_width, cfg.detection.head_hidden, cfg.detection.refine_hidden = 4, 8, 8
    cfg.detection.roi_size = 2
    cfg.detection.anchor_scales = {1: (4.0, 6.0)}
    cfg.train.epochs, cfg.train.batch_size, cfg.train.seed = epochs, 2, seed
    cfg.train.log_seconds = False
    return cfg.validate()


@pytest.fixture(scope="module")
def tiny_data():
    items = synth_generate(SynthConfig(n_volumes=7, dims=(16, 16, 16), nodules_per_volume=(1, 1),
                                       diameter_mm=(4, 6), margin_mm=1.0), seed=5)
    return items[:5], items[5:]


def test_one_epoch_takes_ceil_n_over_batch_steps(tiny_data):
    train_items, _ = tiny_data
    cfg = tiny_config(epochs=1)
    trainer = Trainer(cfg, prepare_samples(train_items, cfg.data.window))
    trainer.run()
    assert trainer.steps == math.ceil(5 / 2)
    assert [e.epoch for e in trainer.logs] == [1]


def test_training_is_deterministic(tiny_data, tmp_path):
    train_items, val = tiny_data
    for run in ("a", "b"):
        train(tiny_config(), train_items, val, tmp_path / run)
    a = (tmp_path / "a" / "epochs.csv").read_bytes()
    assert a == (tmp_path / "b" / "epochs.csv").read_bytes()
    logs = read_epoch_logs(tmp_path / "a" / "epochs.csv")
    assert [e.epoch for e in logs] == [1, 2] and all(np.isfinite(e.ap) for e in logs)


def test_resume_reproduces_uninterrupted_run(tiny_data, tmp_path):
    train_items, val = tiny_data
    cfg = tiny_config(epochs=3)
    full_model, full_logs = train(cfg, train_items, val, tmp_path / "full")
    train(tiny_config(epochs=2), train_items, val, tmp_path / "part")
    # same recipe with a longer horizon: reuse the epoch-2 state under the 3-epoch config
    trainer = Trainer(cfg, prepare_samples(train_items, cfg.data.window, cfg.train.dtype), val, tmp_path / "resumed")
    meta = latest_checkpoint(tmp_path / "full")
    assert meta.name == "epoch003.json"
    trainer.load_checkpoint(meta.with_name("epoch002.json"))
    model, logs = trainer.run()
    assert (tmp_path / "resumed" / "epochs.csv").read_bytes() == (tmp_path / "full" / "epochs.csv").read_bytes()
    for (n, a), (_, b) in zip(full_model.state_dict().items(), model.state_dict().items()):
        assert a.tobytes() == b.tobytes(), n


def test_checkpoint_from_other_config_is_refused(tiny_data, tmp_path):
    train_items, _ = tiny_data
    train(tiny_config(epochs=1), train_items, (), tmp_path)
    trainer = Trainer(tiny_config(epochs=1, seed=9), prepare_samples(train_items, (-1000, 400)))
    with pytest.raises(TrainStateError):
        trainer.load_checkpoint(latest_checkpoint(tmp_path))


def test_load_model_restores_parameters(tiny_data, tmp_path):
    train_items, _ = tiny_data
    model, _ = train(tiny_config(epochs=1), train_items, (), tmp_path)
    loaded, cfg = load_model(latest_checkpoint(tmp_path))
    for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert np.array_equal(a, b), n
    assert cfg.hash() == tiny_config(epochs=1).hash()


def test_non_finite_loss_names_batch_and_seed(tiny_data):
    train_items, _ = tiny_data
    cfg = tiny_config(epochs=1, seed=4)
    cfg.train.lr = 1e30
    cfg.train.grad_clip = None
    trainer = Trainer(cfg, prepare_samples(train_items, cfg.data.window))
    with pytest.raises(FloatingPointError, match=r"epoch \d+, batch \d+ \(seed 4\)"):
        with np.errstate(all="ignore"):
            for _ in range(5):
                trainer.train_epoch()


# -- evaluation ------------------------------------------------------------------

def test_ground_truth_as_detections_scores_one(tiny_data):
    _, val = tiny_data
    anns = [a for _, aa in val for a in aa]
    dets = [Detection(a.box, 1.0, 0, a.volume_id) for a in anns]
    rep = ev.evaluate_detections(dets, anns)["all"]
    assert rep.ap == rep.ap50 == rep.ap75 == 1.0


def test_empty_output_scores_zero(tiny_data):
    _, val = tiny_data
    anns = [a for _, aa in val for a in aa]
    rep = ev.evaluate_detections([], anns)["all"]
    assert rep.ap == rep.ap50 == 0.0


def _blob_detector(x):
    """Stand-in for the network: one cube per tile that fully contains a bright blob."""
    out = []
    for vox in np.asarray(x.data)[:, 0]:
        mask = vox > 0.5
        rim = np.ones_like(mask)
        rim[1:-1, 1:-1, 1:-1] = False
        if mask.sum() < 4 or (mask & rim).any():
            out.append((np.zeros((0, 4)), np.zeros(0), 2))
            continue
        g = np.indices(vox.shape) + 0.5
        c = [(g[i] * mask).sum() / mask.sum() for i in range(3)]
        d = (6 * mask.sum() / math.pi) ** (1 / 3)
        out.append((np.array([[*c, d]]), np.array([0.9]), 2))
    return out


def test_overlapping_tiles_collapse_to_one_detection(monkeypatch):
    vol, anns = synth_generate(SynthConfig(n_volumes=1, dims=(32, 32, 32), nodules_per_volume=(1, 1),
                                           diameter_mm=(6, 6)), seed=2)[0]
    cfg = tiny_config()
    model = build_model(cfg)
    monkeypatch.setattr(ev, "cascade_detect", lambda m, x: _blob_detector(x))
    dets = ev.detect_volume(model, vol, cfg.data)
    assert len(dets) == 1
    a = anns[0]
    assert np.linalg.norm([dets[0].box.cx - a.x, dets[0].box.cy - a.y, dets[0].box.cz - a.z]) < 1.0


def test_evaluation_is_repeatable(tiny_data):
    _, val = tiny_data
    cfg = tiny_config()
    model = build_model(cfg)
    vols, anns = [v for v, _ in val], [a for _, aa in val for a in aa]
    assert ev.evaluate(model, vols, anns, cfg.data) == ev.evaluate(model, vols, anns, cfg.data)


def test_untrained_model_with_high_threshold_is_near_empty(tmp_path):
    from noduleforge.data import write_volume

    vol, _ = synth_generate(SynthConfig(n_volumes=1, dims=(16, 16, 16), nodules_per_volume=(0, 0)), 1)[0]
    path = write_volume(vol, tmp_path)
    cfg = tiny_config()
    dets = ev.infer(build_model(cfg), path, tmp_path / "d.csv", cfg.data, score_thresh=0.99)
    assert len(dets) <= 1
    assert read_detections_csv(tmp_path / "d.csv") == dets


def test_unreadable_volume_is_a_format_error(tmp_path):
    from noduleforge.data import VolumeFormatError

    (tmp_path / "v.json").write_text("{}")
    with pytest.raises(VolumeFormatError):
        ev.infer(build_model(tiny_config()), tmp_path / "v.json", tmp_path / "d.csv")


# -- end-to-end smoke ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    synth = SynthConfig(n_volumes=120, dims=(32, 32, 32), nodules_per_volume=(1, 2))
    items = synth_generate(synth, seed=31)
    cfg = ExperimentConfig()
    cfg.data.patch, cfg.data.crop, cfg.data.crop_jitter = 32, 16, 3.0
    cfg.backbone.variant, cfg.backbone.base_width, cfg.backbone.blocks = "serial", 4, 1
    cfg.detection.head_width, cfg.detection.head_hidden = 8, 16
    cfg.train.epochs, cfg.train.decay_epochs = 10, (7,)
    cfg.train.val_loss = False
    cfg.validate()
    model, logs = train(cfg, items, ())
    return model, logs, cfg


def test_smoke_training_reduces_loss(trained):
    _, logs, _ = trained
    assert logs[-1].train_loss < logs[0].train_loss


def test_smoke_top_detection_near_planted_centre(trained, tmp_path):
    from noduleforge.data import write_volume

    model, _, cfg = trained
    vol, anns = synth_generate(SynthConfig(n_volumes=1, dims=(32, 32, 32), nodules_per_volume=(1, 1),
                                           diameter_mm=(7, 9)), seed=99)[0]
    dets = ev.infer(model, write_volume(vol, tmp_path), tmp_path / "d.csv", cfg.data)
    assert dets, "no detections"
    top, a = dets[0], anns[0]
    dist = np.linalg.norm([top.box.cx - a.x, top.box.cy - a.y, top.box.cz - a.z])
    assert dist < a.diameter / 2
