"""Acceptance suite: one test per headline criterion, at the stated tolerances.

The desk-run tests share a single module-scoped training sweep (about half an
hour on one core); select ``-m "not slow"`` to skip them.
"""
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from noduleforge import functional as F
from noduleforge.backbone import build_backbone, default_config
from noduleforge.checkpoint import load_tensors, save_tensors
from noduleforge.data import (SynthConfig, Volume, VolumeHeader, holdout_split, kfold_split, read_volume,
                              rescale_to_hu, synth_generate, write_volume)
from noduleforge.detection import Box3, Detection, cls_loss, nms, reg_loss, smooth_l1
from noduleforge.functional import ConvSpec, effective_receptive_field
from noduleforge.gradcheck import gradient_suite
from noduleforge.metrics import average_precision, pr_curve
from noduleforge.pipeline.config import ExperimentConfig
from noduleforge.pipeline.desk import run_desk
from noduleforge.pipeline.train import train
from noduleforge.tensor import Tensor

from oracles import ap_oracle, naive_conv3d, nms_oracle


def test_gradient_suite_passes_quickly():
    start = time.process_time()
    reports = gradient_suite()
    elapsed = time.process_time() - start
    names = {r.op_name for r in reports}
    for op in ("conv3d_dilation1", "conv3d_dilation2", "conv3d_dilation4", "downsample", "upsample_nearest",
               "linear", "batchnorm_train", "roi_align", "cls_loss", "reg_loss", "total_loss"):
        assert op in names
    worst = max(reports, key=lambda r: r.max_rel_error)
    assert worst.max_rel_error < 1e-5, worst
    assert elapsed < 60.0


def test_conv3d_matches_direct_summation():
    rng = np.random.default_rng(20240)
    cases = 0
    while cases < 50:
        k = int(rng.choice([1, 3, 5]))
        dil = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, dil * (k - 1) // 2 + 2))
        size = rng.integers(3, 9, 3)
        if np.any(size + 2 * pad < dil * (k - 1) + 1):
            continue
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(1, 3)), cin, *size))
        w = rng.standard_normal((cout, cin, k, k, k))
        b = rng.standard_normal(cout)
        got = F.conv3d(x, w, b, ConvSpec.make(k, stride=stride, dilation=dil, padding=pad)).data
        ref = naive_conv3d(x, w, b, (stride,) * 3, (dil,) * 3, (pad,) * 3)
        assert got.shape == ref.shape
        assert np.max(np.abs(got - ref)) < 1e-12, (k, dil, stride, pad, size)
        cases += 1


def test_receptive_field_figures():
    stack = [(3, 1), (3, 2), (3, 4)]
    assert [effective_receptive_field(stack[:i])[0] for i in (1, 2, 3)] == [3, 7, 15]
    assert effective_receptive_field([(3, 1)] * 3) == (7, 7, 7)


def test_loss_values():
    assert abs(float(cls_loss(np.array([0.5]), [1], w_pos=1.0, w_neg=1.0).data) - math.log(2)) <= 1e-9
    assert float(reg_loss(np.array([[0.5, 0.0, 0.0, 0.0]]), np.zeros((1, 4))).data) == 0.125
    assert float(reg_loss(np.array([[0.0, 2.0, 0.0, 0.0]]), np.zeros((1, 4))).data) == 1.5
    for sign in (1.0, -1.0):
        d = Tensor(np.array([sign * (1 - 1e-12), sign * (1 + 1e-12)]), requires_grad=True)
        smooth_l1(d).sum().backward()
        assert abs(d.grad[0] - d.grad[1]) <= 1e-9


def _det(box, score):
    z, y, x, d = box
    return Detection(Box3(cx=x, cy=y, cz=z, d=d), float(score), 0, "v")


def test_metrics_against_oracles():
    gts = [_det((5, 5, 5, 4), 1), _det((20, 20, 20, 4), 1)]
    dets = [_det((5, 5, 5, 4), 0.9), _det((40, 40, 40, 4), 0.8), _det((20, 20, 20, 4), 0.7)]
    assert average_precision(pr_curve(dets, gts)) == 5 / 6

    rng = np.random.default_rng(7)
    for _ in range(100):
        n_gt, n_det = int(rng.integers(1, 11)), int(rng.integers(0, 21))
        g = np.column_stack([rng.uniform(0, 20, (n_gt, 3)), rng.uniform(2, 6, n_gt)])
        src = g[rng.integers(0, n_gt, n_det)] if n_det else np.zeros((0, 4))
        d = src + np.column_stack([rng.normal(0, 1.0, (n_det, 3)), rng.normal(0, 0.5, n_det)])
        d[:, 3] = np.abs(d[:, 3]) + 0.5
        s = rng.uniform(size=n_det)
        got = average_precision(pr_curve([_det(b, sc) for b, sc in zip(d, s)], [_det(b, 1) for b in g]))
        assert abs(got - ap_oracle(d, s, g, 0.5)) <= 1e-12

    for _ in range(100):
        n = int(rng.integers(0, 30))
        boxes = np.column_stack([rng.uniform(0, 15, (n, 3)), rng.uniform(1, 6, n)])
        scores = rng.uniform(size=n)
        thresh = float(rng.uniform(0.05, 0.7))
        assert list(nms(boxes, scores, thresh)) == nms_oracle(boxes, scores, thresh)


def test_parameter_parity():
    for width in (1, 2, 4, 8, 16):
        for blocks in (0, 1, 2, 3):
            for levels in (1, 2, 3, 4):
                kw = dict(base_width=width, blocks=blocks, levels=levels)
                hr = build_backbone(default_config("hrnet", **kw)).num_parameters()
                pro = build_backbone(default_config("pro_hrnet", **kw)).num_parameters()
                assert hr == pro, kw


# -- desk run ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    with threadpool_limits(1):
        result = run_desk(out)
    return result


@pytest.mark.slow
def test_desk_run_ordering_and_budget(desk):
    s = desk.summary()
    print("median AP0.5:", s["median_ap50"])
    print("median small-nodule AP:", s["median_small_ap"])
    print("total seconds:", round(s["seconds"]))
    assert s["median_ap50"]["pro_hrnet"] >= 0.60
    small = s["median_small_ap"]
    assert small["serial"] <= small["hrnet"] <= small["pro_hrnet"]
    assert s["seconds"] < 45 * 60


@pytest.mark.slow
def test_desk_run_convergence_shape(desk):
    shape = desk.summary()["convergence"]
    print("smoothed AP:", [round(v, 4) for v in shape["smoothed"]])
    assert len(shape["smoothed"]) == 30
    assert shape["rising"], f"smoothed AP drops by {-shape['worst_drop']:.4f} before epoch 22"
    assert shape["plateau_span"] < 0.02


# -- pipeline exactness -------------------------------------------------------------

def test_pipeline_exactness(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(50):
        m, b = int(rng.integers(-4, 5)), int(rng.integers(-2048, 2049))
        sv = rng.integers(-4000, 4000, (3, 4, 5)).astype(np.int16)
        assert np.array_equal(rescale_to_hu(sv, m, b), sv.astype(np.int64) * m + b)

    for trial in range(20):
        n = int(rng.integers(10, 300))
        ids = [f"id{v}" for v in rng.choice(100_000, n, replace=False)]
        folds = kfold_split(ids, 10, seed=trial)
        parts = [set(folds.members(f)) for f in range(10)]
        assert set().union(*parts) == set(ids) and sum(map(len, parts)) == n
        assert max(map(len, parts)) - min(map(len, parts)) <= 1
        hold = holdout_split(ids, 0.8, seed=trial)
        tr, te = set(hold.members("train")), set(hold.members("test"))
        assert tr | te == set(ids) and not tr & te

    vol = Volume(VolumeHeader("s", (6, 5, 4), (0.8, 0.7, 1.5), 1.0, -1024.0),
                 rng.integers(-32768, 32767, (6, 5, 4)).astype(np.int16))
    back = read_volume(write_volume(vol, tmp_path))
    assert back.header == vol.header and back.sv.tobytes() == vol.sv.tobytes()
    tensors = {"w": rng.standard_normal((2, 3, 3, 3, 3)), "b": rng.standard_normal(2)}
    save_tensors(tmp_path / "t.nft", tensors)
    loaded = load_tensors(tmp_path / "t.nft")
    assert all(loaded[k].tobytes() == v.tobytes() and loaded[k].dtype == v.dtype for k, v in tensors.items())

    items = synth_generate(SynthConfig(n_volumes=6, dims=(16, 16, 16), nodules_per_volume=(1, 1),
                                       diameter_mm=(4, 6), margin_mm=1.0), seed=11)
    cfg = ExperimentConfig()
    cfg.data.patch, cfg.data.crop = 16, 8
    cfg.backbone.base_width, cfg.backbone.blocks, cfg.backbone.levels = 2, 1, 3
    cfg.detection.head_width, cfg.detection.head_hidden, cfg.detection.refine_hidden = 4, 8, 8
    cfg.detection.roi_size = 2
    cfg.detection.anchor_scales = {1: (4.0, 6.0)}
    cfg.train.epochs, cfg.train.batch_size, cfg.train.log_seconds = 2, 2, False
    cfg.validate()
    with threadpool_limits(1):
        for run in ("a", "b"):
            train(cfg, items[:4], items[4:], tmp_path / run)
    assert (tmp_path / "a" / "epochs.csv").read_bytes() == (tmp_path / "b" / "epochs.csv").read_bytes()
