import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaled_second.heads import Detection, rotated_iou_bev
from scaled_second.metrics import (
    EvalConfig,
    EvalReport,
    MatchResult,
    ap,
    aph,
    evaluate,
    evaluate_corpus,
    heading_weight,
    match,
)
from scaled_second.pointcloud import Box3D

from oracles import ap_from_definition, iou_shapely, match_bruteforce

VEH = Box3D(0, 0, 0, 4.5, 2.0, 1.6, 0.0)


def _det(box, score, cls="vehicle"):
    return Detection(box, score, cls)


def _shift(box, dx=0.0, dy=0.0, dyaw=0.0):
    return Box3D(box.cx + dx, box.cy + dy, box.cz, box.length, box.width, box.height, box.yaw + dyaw)


def _scene(rng, n_gt, spacing=12.0):
    cols = 8
    gts = []
    for i in range(n_gt):
        cls = ["vehicle", "pedestrian", "cyclist"][int(rng.integers(3))]
        size = {"vehicle": (4.5, 2.0, 1.6), "pedestrian": (0.9, 0.9, 1.7), "cyclist": (1.8, 0.8, 1.7)}[cls]
        box = Box3D((i % cols) * spacing + rng.uniform(-1, 1), (i // cols) * spacing + rng.uniform(-1, 1),
                    0.0, *size, float(rng.uniform(-math.pi, math.pi)))
        gts.append((box, cls))
    return gts


def _noisy_dets(rng, gts, keep=0.8, n_fp=3):
    dets = []
    for box, cls in gts:
        if rng.random() < keep:
            dets.append(_det(_shift(box, *rng.normal(0, 0.15, 2), dyaw=rng.normal(0, 0.6)),
                             float(rng.random()), cls))
    for _ in range(n_fp):
        cls = ["vehicle", "pedestrian", "cyclist"][int(rng.integers(3))]
        dets.append(_det(Box3D(*rng.uniform(-5, 90, 2), 0.0, 2.0, 1.0, 1.5, float(rng.uniform(-3, 3))),
                         float(rng.random()), cls))
    return dets


# ---------------------------------------------------------------------------
# matching


def test_match_examples():
    m = match([_det(VEH, 0.9)], [VEH], 0.7)
    assert m.det_gt.tolist() == [0] and m.tp == 1 and m.fn == 0
    m = match([_det(VEH, 0.8), _det(_shift(VEH, 0.1), 0.9)], [VEH], 0.7)
    assert m.det_gt.tolist() == [-1, 0] and (m.tp, m.fp) == (1, 1)
    m = match([], [VEH, _shift(VEH, 50)], 0.7)
    assert m.fn == 2


@pytest.mark.parametrize("seed", range(100))
def test_match_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    gts = [Box3D(*rng.uniform(-6, 6, 2), 0, *rng.uniform(1, 4, 2), 1.5, rng.uniform(-3, 3))
           for _ in range(int(rng.integers(0, 8)))]
    dets = [_det(Box3D(*rng.uniform(-6, 6, 2), 0, *rng.uniform(1, 4, 2), 1.5, rng.uniform(-3, 3)),
                 float(np.round(rng.random(), 1))) for _ in range(int(rng.integers(0, 12)))]
    dets += [_det(_shift(g, *rng.normal(0, 0.3, 2)), float(rng.random())) for g in gts[:3]]
    thr = float(rng.uniform(0.1, 0.7))
    m = match(dets, gts, thr)
    ref, order = match_bruteforce([d.box.as_array() for d in dets], [d.score for d in dets],
                                  [g.as_array() for g in gts], thr, iou_shapely)
    assert m.det_gt.tolist() == ref
    assert m.order.tolist() == order


def test_heading_weight():
    assert heading_weight(0.0, 0.0) == 1.0
    assert heading_weight(math.pi, 0.0) == pytest.approx(0.0)
    assert heading_weight(-3.0, 3.0) == pytest.approx(1 - (2 * math.pi - 6) / math.pi)
    assert heading_weight(0.25, 0.25 + math.pi / 2) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# AP / APH


def test_ap_examples():
    gts = [VEH, _shift(VEH, 30)]
    m = match([_det(gts[0], 0.9), _det(gts[1], 0.8)], gts, 0.7)
    assert ap(m, 2) == 1.0
    assert ap(match([], gts, 0.7), 2) == 0.0
    m = match([_det(VEH, 0.9), _det(_shift(VEH, 60), 0.8)], gts, 0.7)
    assert abs(ap(m, 2) - 51 / 101) <= 1e-9


def test_ap_empty_conventions():
    assert ap(match([], [], 0.7), 0) == 1.0
    assert ap(match([_det(VEH, 0.5)], [], 0.7), 0) == 0.0


def test_aph_examples():
    gts = [VEH, _shift(VEH, 30)]
    m = match([_det(g, 1.0) for g in gts], gts, 0.7)
    assert aph(m, 2) == ap(m, 2) == 1.0
    flipped = match([_det(_shift(g, dyaw=math.pi), 1.0) for g in gts], gts, 0.7)
    assert ap(flipped, 2) == 1.0 and aph(flipped, 2) == 0.0


def test_aph_half_heading():
    # precision = recall = 0.5 after the only detection: envelope 0.5 on the 51 levels r <= 0.5
    square = Box3D(0, 0, 0, 2, 2, 1, 0)
    m = match([_det(_shift(square, dyaw=math.pi / 2), 0.7)], [square], 0.5)
    assert m.tp == 1
    assert aph(m, 1) == pytest.approx(0.5 * 51 / 101, abs=1e-12)
    assert ap(m, 1) == 1.0


@pytest.mark.parametrize("seed", range(30))
def test_ap_matches_definition(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 40))
    tp = rng.random(n) < 0.6
    weights = np.where(tp, rng.random(n), 0.0)
    n_gt = int(tp.sum() + rng.integers(0, 5))
    m = MatchResult(np.arange(n), np.where(tp, 0, -1), np.zeros(0, bool), weights)
    for R in (2, 11, 101):
        assert ap(m, n_gt, R) == pytest.approx(ap_from_definition(tp.astype(float), n_gt, R), abs=1e-12)
        assert aph(m, n_gt, R) == pytest.approx(ap_from_definition(weights, n_gt, R), abs=1e-12)


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_examples():
    r = evaluate([], [])
    assert all(c.ap == c.aph == 1.0 for c in r.per_class.values())
    labels = [(VEH, "vehicle"), (Box3D(20, 0, 0, 0.9, 0.9, 1.7, 1.0), "pedestrian"),
              (Box3D(0, 20, 0, 1.8, 0.8, 1.7, -2.0), "cyclist")]
    r = evaluate([_det(b, 1.0, c) for b, c in labels], labels)
    assert r.mAP == r.mAPH == 1.0
    assert r.per_class["vehicle"].tp == 1


def test_evaluate_unknown_class():
    with pytest.raises(ValueError, match="unknown class id 'truck'"):
        evaluate([_det(VEH, 0.5, "truck")], [])


def test_report_serialization():
    labels = [(VEH, "vehicle")]
    r = evaluate([_det(_shift(VEH, 0.2, dyaw=0.3), 0.6), _det(_shift(VEH, 40), 0.9)], labels)
    assert EvalReport.from_dict(r.to_dict()) == r
    header, row = r.to_csv().strip().split("\n")
    cols = dict(zip(header.split(","), map(float, row.split(","))))
    assert cols["mAPH"] == r.mAPH and cols["AP_vehicle"] == r.per_class["vehicle"].ap


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig({"vehicle": 0.0})
    with pytest.raises(ValueError):
        EvalConfig(recall_points=1)


def test_dropping_30_percent_bounds_ap():
    rng = np.random.default_rng(0)
    scenes = []
    for _ in range(20):
        gts = _scene(rng, 10)
        keep = rng.permutation(10)[:7]
        scenes.append(([_det(gts[i][0], float(rng.random()), gts[i][1]) for i in keep], gts))
    r = evaluate_corpus(scenes)
    for c in r.per_class.values():
        assert c.fp == 0
    n_gt = sum(len(g) for _, g in scenes)
    tp = sum(c.tp for c in r.per_class.values())
    assert tp == 140 and n_gt == 200
    assert r.mAP <= 0.7 + 1 / 101
    for c in r.per_class.values():
        assert c.ap <= c.tp / (c.tp + c.fn) + 1 / 101


# ---------------------------------------------------------------------------
# invariants


corpus_seed = st.integers(0, 2 ** 32 - 1)


def _corpus(seed, n_scenes=3):
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_scenes):
        gts = _scene(rng, int(rng.integers(0, 8)))
        scenes.append((_noisy_dets(rng, gts, n_fp=int(rng.integers(0, 4))), gts))
    return scenes


@settings(max_examples=40)
@given(corpus_seed)
def test_aph_le_ap(seed):
    r = evaluate_corpus(_corpus(seed))
    for c in r.per_class.values():
        assert 0.0 <= c.aph <= c.ap + 1e-12 <= 1.0 + 1e-12


@settings(max_examples=30)
@given(corpus_seed)
def test_ap_invariant_under_monotone_rescale(seed):
    scenes = _corpus(seed)
    rescaled = [([Detection(d.box, d.score ** 3 * 0.5 + 0.1, d.cls) for d in dets], g) for dets, g in scenes]
    assert evaluate_corpus(rescaled) == evaluate_corpus(scenes)


@settings(max_examples=30)
@given(corpus_seed)
def test_lowest_score_fp_never_helps(seed):
    scenes = _corpus(seed)
    base = evaluate_corpus(scenes)
    lowest = min((d.score for dets, _ in scenes for d in dets), default=1.0)
    for cls in ("vehicle", "pedestrian", "cyclist"):
        extra = _det(Box3D(-500, -500, 0, 1, 1, 1, 0), lowest / 2, cls)
        more = [(scenes[0][0] + [extra], scenes[0][1])] + scenes[1:]
        after = evaluate_corpus(more)
        assert after.per_class[cls].ap <= base.per_class[cls].ap
        assert after.per_class[cls].aph <= base.per_class[cls].aph


@settings(max_examples=30)
@given(corpus_seed)
def test_evaluation_independent_of_input_order(seed):
    scenes = _corpus(seed)
    rng = np.random.default_rng(seed)
    shuffled = [([dets[i] for i in rng.permutation(len(dets))], g) for dets, g in scenes]
    assert evaluate_corpus(shuffled) == evaluate_corpus(scenes)


def test_matching_uses_rotated_iou():
    a = Box3D(0, 0, 0, 1, 1, 1, 0)
    b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    iou = rotated_iou_bev(a, b)
    assert match([_det(b, 1.0)], [a], iou - 1e-9).tp == 1
    assert match([_det(b, 1.0)], [a], iou + 1e-9).tp == 0
