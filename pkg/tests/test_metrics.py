import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noduleforge.detection import Box3, Detection
from noduleforge.metrics import (ConfusionCounts, ap_report, average_precision, iou3d, match,
                                 pr_curve, precision, recall)

from oracles import ap_oracle, cube_iou, greedy_match_oracle


def det(z, y, x, d, s, vid="v"):
    return Detection(Box3(cx=x, cy=y, cz=z, d=d), s, 0, vid)


def gt(z, y, x, d, vid="v"):
    return Detection(Box3(cx=x, cy=y, cz=z, d=d), 1.0, 0, vid)


def test_iou_examples():
    a = Box3(0, 0, 0, 2)
    assert iou3d(a, a) == 1.0
    assert iou3d(a, Box3(10, 0, 0, 2)) == 0.0
    assert iou3d(a, Box3(1, 0, 0, 2)) == pytest.approx(1 / 3, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.5, 5),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.5, 5))
def test_iou_symmetric_bounded_matches_oracle(c1, d1, c2, d2):
    a, b = Box3(*c1, d1), Box3(*c2, d2)
    v = iou3d(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(iou3d(b, a), abs=1e-15)
    assert v == pytest.approx(cube_iou(a.zyxd, b.zyxd), abs=1e-12)


def test_precision_recall_conventions():
    assert precision(ConfusionCounts(2, 1, 0)) == pytest.approx(2 / 3)
    assert recall(ConfusionCounts(2, 0, 2)) == 0.5
    assert precision(ConfusionCounts(0, 0, 3)) == 1.0


def test_match_examples():
    one = match([det(5, 5, 5, 4, 0.9)], [gt(5, 5, 5, 4)])
    assert (one.counts.tp, one.counts.fp, one.counts.fn) == (1, 0, 0)
    two = match([det(5, 5, 5, 4, 0.6), det(5, 5, 5, 4, 0.9)], [gt(5, 5, 5, 4)])
    assert list(two.is_tp) == [True, False] and list(two.scores) == [0.9, 0.6]


def test_match_respects_volume_ids():
    res = match([det(5, 5, 5, 4, 0.9, "a")], [gt(5, 5, 5, 4, "b")])
    assert res.counts.tp == 0 and res.counts.fn == 1


@pytest.mark.parametrize("seed", range(20))
def test_match_equals_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    gts = rng.uniform(2, 8, (3, 3))
    dets = gts[rng.integers(0, 3, 5)] + rng.normal(0, 0.6, (5, 3))
    dd = rng.uniform(2.5, 4.5, 5)
    scores = rng.uniform(size=5)
    gb = np.column_stack([gts, np.full(3, 3.5)])
    db = np.column_stack([dets, dd])
    res = match([det(*b, s) for b, s in zip(db, scores)], [gt(*b) for b in gb], 0.3)
    assert list(res.is_tp) == greedy_match_oracle(db, scores, gb, 0.3)


def test_pr_curve_hand_example():
    gts = [gt(5, 5, 5, 4), gt(20, 20, 20, 4)]
    dets = [det(5, 5, 5, 4, 0.9), det(40, 40, 40, 4, 0.8), det(20, 20, 20, 4, 0.7)]
    curve = pr_curve(dets, gts)
    pts = [(p.precision, p.recall) for p in curve.points]
    assert pts == [(1.0, 0.5), (0.5, 0.5), (pytest.approx(2 / 3), 1.0)]
    assert average_precision(curve) == pytest.approx(5 / 6, abs=1e-15)


def test_pr_curve_edges():
    perfect = pr_curve([det(5, 5, 5, 4, 0.9)], [gt(5, 5, 5, 4)])
    assert [(p.precision, p.recall) for p in perfect.points] == [(1.0, 1.0)]
    miss = pr_curve([det(30, 5, 5, 4, 0.9), det(40, 5, 5, 4, 0.5)], [gt(5, 5, 5, 4)])
    assert all(p.precision == 0 for p in miss.points)
    assert average_precision(miss) == 0.0


def _random_instance(rng):
    n_gt = int(rng.integers(1, 11))
    n_det = int(rng.integers(0, 21))
    g = np.column_stack([rng.uniform(0, 20, (n_gt, 3)), rng.uniform(2, 6, n_gt)])
    src = g[rng.integers(0, n_gt, n_det)] if n_det else np.zeros((0, 4))
    d = src + np.column_stack([rng.normal(0, 1.0, (n_det, 3)), rng.normal(0, 0.5, n_det)])
    d[:, 3] = np.abs(d[:, 3]) + 0.5
    s = rng.permutation(n_det) / max(n_det, 1) + rng.uniform(0, 1e-3, n_det)
    return d, s, g


@pytest.mark.parametrize("seed", range(25))
def test_ap_matches_envelope_oracle(seed):
    rng = np.random.default_rng(seed)
    d, s, g = _random_instance(rng)
    for thresh in (0.3, 0.5):
        got = average_precision(pr_curve([det(*b, sc) for b, sc in zip(d, s)], [gt(*b) for b in g], thresh))
        assert abs(got - ap_oracle(d, s, g, thresh)) < 1e-12


def test_ap_report_perfect_and_empty():
    gts = [gt(5, 5, 5, 4), gt(20, 20, 20, 6)]
    rep = ap_report([det(5, 5, 5, 4, 0.9), det(20, 20, 20, 6, 0.8)], gts)
    assert rep.ap == rep.ap50 == rep.ap75 == 1.0
    empty = ap_report([], gts)
    assert empty.ap == empty.ap50 == empty.ap75 == 0.0


def test_ap_report_composes_single_threshold_runs():
    rng = np.random.default_rng(11)
    d, s, g = _random_instance(rng)
    dets, gts = [det(*b, sc) for b, sc in zip(d, s)], [gt(*b) for b in g]
    rep = ap_report(dets, gts)
    for t, a in rep.per_threshold:
        assert a == average_precision(pr_curve(dets, gts, t))
    assert rep.ap == pytest.approx(np.mean([a for _, a in rep.per_threshold]), abs=1e-15)


def test_size_range_ignores_out_of_range_truths():
    gts = [gt(5, 5, 5, 4), gt(20, 20, 20, 10)]
    dets = [det(20, 20, 20, 10, 0.95), det(5, 5, 5, 4, 0.9)]
    small = ap_report(dets, gts, size_range=(0.0, 8.0))
    assert small.ap50 == 1.0


def test_report_json_round_trip(tmp_path):
    from noduleforge.metrics import APReport

    rep = ap_report([det(5, 5, 5, 4, 0.9)], [gt(5, 5, 5, 4), gt(9, 9, 9, 3)])
    rep.to_json(tmp_path / "r.json")
    import json
    assert APReport.from_dict(json.loads((tmp_path / "r.json").read_text())) == rep
