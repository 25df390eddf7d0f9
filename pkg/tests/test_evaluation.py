import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saliency_tal.evaluation import DEFAULT_THRESHOLDS, average_precision, evaluate, match_predictions
from saliency_tal.structures import Detection, Segment

from oracles import map_reference, tiou


def test_hand_computed_ap():
    assert average_precision(np.array([True, False, True]), 2) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert average_precision(np.array([True, True]), 2) == 1.0
    assert average_precision(np.array([False]), 1) == 0.0
    assert average_precision(np.array([], bool), 3) == 0.0
    with pytest.raises(ValueError):
        average_precision(np.array([True]), 0)


def test_match_identity_and_one_to_one():
    gts = {"a": [Segment(0, 1, 3)]}
    for tau in DEFAULT_THRESHOLDS:
        _, tp = match_predictions([Detection("a", 0, 1, 3, 0.5)], gts, 0, tau)
        assert tp.tolist() == [True]
    preds = [Detection("a", 0, 1, 3, 0.4), Detection("a", 0, 1.1, 3, 0.9)]
    scores, tp = match_predictions(preds, gts, 0, 0.5)
    assert scores.tolist() == [0.9, 0.4] and tp.tolist() == [True, False]


def _exhaustive_flags(preds, gts, tau):
    """Walk predictions in score order; each takes the best-IoU free gt. Enumerated without shortcuts."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], preds[i][0], preds[i][1]))
    free = set(range(len(gts)))
    flags = []
    for i in order:
        cands = [(tiou(preds[i][:2], gts[j]), -j) for j in free]
        cands = [c for c in cands if c[0] >= tau]
        if cands:
            free.discard(-max(cands)[1])
        flags.append(bool(cands))
    return flags


def test_match_fixture_against_exhaustive_oracle():
    gts = [(1.0, 3.0), (2.5, 4.0), (6.0, 9.0)]
    preds = [(1.2, 3.1, 0.9), (2.4, 4.2, 0.85), (1.0, 4.0, 0.8), (6.5, 8.0, 0.6), (5.0, 9.5, 0.3)]
    for tau in (0.1, 0.3, 0.5, 0.7):
        _, tp = match_predictions([Detection("c", 0, s, e, sc) for s, e, sc in preds],
                                  {"c": [Segment(0, s, e) for s, e in gts]}, 0, tau)
        assert tp.tolist() == _exhaustive_flags(preds, gts, tau)


def test_match_respects_clips():
    gts = {"a": [Segment(0, 1, 2)], "b": []}
    _, tp = match_predictions([Detection("b", 0, 1, 2, 0.9)], gts, 0, 0.3)
    assert tp.tolist() == [False]


def test_evaluate_identity_and_empty():
    gts = {"a": [Segment(0, 1, 3), Segment(1, 2, 5)], "b": [Segment(1, 0, 9)]}
    preds = [Detection(c, s.label, s.start_s, s.end_s, 1.0) for c, segs in gts.items() for s in segs]
    rep = evaluate(preds, gts, num_classes=3)
    assert rep.mean_ap == 1.0 and np.isnan(rep.ap[2]).all()
    assert evaluate([], gts, num_classes=3).mean_ap == 0.0
    with pytest.raises(ValueError):
        evaluate(preds, {"a": []}, num_classes=3)


def _fixture(seed, clips=10, num_classes=4):
    rng = np.random.default_rng(seed)
    gts, gt_rows, preds, pred_rows = {}, [], [], []
    for c in range(clips):
        cid = f"clip{c:02d}"
        segs = []
        for _ in range(rng.integers(0, 4)):
            a = float(rng.uniform(0, 8))
            segs.append(Segment(int(rng.integers(num_classes)), a, a + float(rng.uniform(0.3, 2))))
        gts[cid] = segs
        gt_rows += [(cid, s.label, s.start_s, s.end_s) for s in segs]
        for s in segs:
            for _ in range(rng.integers(0, 3)):
                j = rng.normal(0, 0.3, 2)
                a, b = s.start_s + j[0], s.end_s + j[1]
                if b > a:
                    label = s.label if rng.random() < 0.8 else int(rng.integers(num_classes))
                    preds.append(Detection(cid, label, float(a), float(b), float(rng.uniform(0.01, 1))))
        for _ in range(rng.integers(0, 3)):
            a = float(rng.uniform(0, 9))
            preds.append(Detection(cid, int(rng.integers(num_classes)), a, a + 0.8, float(rng.uniform(0.01, 1))))
    pred_rows = [(p.clip_id, p.label, p.start_s, p.end_s, p.score) for p in preds]
    return gts, gt_rows, preds, pred_rows


def test_evaluate_matches_reference_scorer():
    for seed in range(10):
        gts, gt_rows, preds, pred_rows = _fixture(seed)
        if not gt_rows:
            continue
        rep = evaluate(preds, gts, num_classes=4)
        per_tau, final = map_reference(pred_rows, gt_rows, 4, DEFAULT_THRESHOLDS)
        np.testing.assert_allclose(rep.map_per_threshold, per_tau, rtol=0, atol=1e-9)
        assert abs(rep.mean_ap - final) < 1e-9


def test_seizure_only_aggregate_excludes_background():
    gts = {"a": [Segment(0, 0, 5), Segment(1, 5, 9)]}
    preds = [Detection("a", 1, 5, 9, 0.9)]
    rep = evaluate(preds, gts, num_classes=2)
    assert rep.mean_ap == 0.5 and rep.seizure_mean_ap == 1.0
    assert "mAP (seizure)" in rep.table()
    d = rep.to_dict()
    assert d["mAP"] == 0.5 and d["seizure_mAP"] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_ap_monotone_in_threshold(seed):
    gts, gt_rows, preds, _ = _fixture(seed)
    if not gt_rows:
        return
    rep = evaluate(preds, gts, num_classes=4, thresholds=np.linspace(0.1, 0.9, 9))
    scored = ~np.isnan(rep.ap[:, 0])
    assert np.all(np.diff(rep.ap[scored], axis=1) <= 1e-12)
    assert np.all(np.diff(rep.map_per_threshold) <= 1e-12)
    assert np.all((rep.ap[scored] >= 0) & (rep.ap[scored] <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.randoms(use_true_random=False))
def test_order_of_equal_scores_irrelevant(seed, shuffler):
    gts, gt_rows, preds, _ = _fixture(seed)
    if not gt_rows:
        return
    preds = [Detection(p.clip_id, p.label, p.start_s, p.end_s, round(p.score, 1) or 0.1) for p in preds]
    a = evaluate(preds, gts, num_classes=4)
    shuffled = list(preds)
    shuffler.shuffle(shuffled)
    b = evaluate(shuffled, gts, num_classes=4)
    assert np.array_equal(np.nan_to_num(a.ap, nan=-1), np.nan_to_num(b.ap, nan=-1))


def test_appended_false_positive_never_raises_ap():
    for seed in range(20):
        gts, gt_rows, preds, _ = _fixture(seed)
        if not gt_rows:
            continue
        base = evaluate(preds, gts, num_classes=4)
        low = min([p.score for p in preds], default=1.0) / 2
        extra = [Detection(cid, lab, 9.5, 9.9, low) for cid, lab in itertools.product(gts, range(4))]
        after = evaluate(preds + extra, gts, num_classes=4)
        scored = ~np.isnan(base.ap)
        assert np.all(after.ap[scored] <= base.ap[scored] + 1e-12)
