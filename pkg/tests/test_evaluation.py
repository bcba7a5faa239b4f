import itertools

import numpy as np
import pytest

from partscene.evaluation import (AP_THRESHOLDS, EvalError, Prediction,
                                  average_precision, evaluate, point_iou,
                                  save_report)


def mask_from(indices, n=50):
    m = np.zeros(n, dtype=bool)
    m[list(indices)] = True
    return m


class TestPointIoU:
    def test_identical_masks(self):
        m = mask_from(range(10))
        assert point_iou(m, m) == 1.0

    def test_disjoint_masks(self):
        assert point_iou(mask_from(range(10)), mask_from(range(20, 30))) == 0.0

    def test_partial_overlap_closed_form(self):
        a = mask_from(range(0, 100), n=200)
        b = mask_from(range(40, 140), n=200)
        assert point_iou(a, b) == pytest.approx(60 / 140)

    def test_length_mismatch_rejected(self):
        with pytest.raises(EvalError):
            point_iou(np.zeros(5, bool), np.zeros(6, bool))

    def test_both_empty_is_zero_with_warning(self, caplog):
        import logging
        with caplog.at_level(logging.WARNING, logger="partscene.evaluation"):
            value = point_iou(np.zeros(5, bool), np.zeros(5, bool))
        assert value == 0.0
        assert any("empty" in r.message for r in caplog.records)


def overlapping_masks(iou_target, n=1000):
    """A (pred, gt) pair whose IoU is exactly `iou_target` (a rational).

    With |gt| = |pred| = k and overlap o the IoU is o / (2k - o); choosing
    o = 2p and k = p + q realizes any target p/q exactly.
    """
    from fractions import Fraction
    f = Fraction(iou_target).limit_denominator(100)
    o = 2 * f.numerator
    k = f.numerator + f.denominator
    gt = mask_from(range(k), n)
    pred = mask_from(range(k - o, 2 * k - o), n)
    assert point_iou(pred, gt) == o / (2 * k - o)
    return pred, gt


class TestAveragePrecision:
    def test_single_match_above_threshold(self):
        pred, gt = overlapping_masks(0.6)
        assert average_precision([Prediction(pred, 0.9)], [gt], 0.5) == 1.0

    def test_single_match_below_threshold(self):
        pred, gt = overlapping_masks(0.6)
        assert average_precision([Prediction(pred, 0.9)], [gt], 0.7) == 0.0

    def test_false_positive_ranked_first_halves_ap(self):
        # derived by hand: matched pred ranks second -> precision (0, 1/2)
        # -> all-point AP = 0.5
        gt = mask_from(range(20), n=100)
        good = mask_from(range(2, 20), n=100)      # IoU 18/22 ≈ 0.82
        bad = mask_from(range(60, 80), n=100)      # IoU 0
        ap = average_precision([Prediction(bad, 0.9), Prediction(good, 0.8)],
                               [gt], 0.5)
        assert ap == pytest.approx(0.5, abs=1e-12)

    def test_no_predictions(self):
        assert average_precision([], [mask_from(range(5))], 0.5) == 0.0

    def test_bad_confidence_rejected(self):
        with pytest.raises(EvalError):
            average_precision([Prediction(mask_from(range(5)), 1.5)],
                              [mask_from(range(5))], 0.5)


class TestEvaluate:
    def test_iou_060_threshold_sweep(self):
        # IoU 0.6 matches thresholds 0.50, 0.55, 0.60 -> AP = 3/10
        pred, gt = overlapping_masks(0.6)
        report = evaluate({"q": [Prediction(pred, 0.9)]}, {"q": [gt]})
        r = report.per_query["q"]
        assert r.ap50 == 1.0
        assert r.ap25 == 1.0
        assert r.ap == pytest.approx(0.3, abs=1e-12)

    def test_zero_predictions_for_query(self):
        report = evaluate({}, {"q": [mask_from(range(5))]})
        r = report.per_query["q"]
        assert r.ap == r.ap50 == r.ap25 == 0.0

    def test_ground_truth_fed_as_predictions_is_perfect(self, desk_pipeline):
        scene = desk_pipeline.scene
        preds, gts = {}, {}
        for q in scene.manifest.queries:
            if q.kind != "direct":
                continue
            masks = [scene.cloud.part_id == pid for pid in sorted(q.gt_part_ids)]
            gts[q.query_text] = masks
            preds[q.query_text] = [Prediction(m, 1.0) for m in masks]
        report = evaluate(preds, gts)
        assert report.mean_ap == report.mean_ap50 == report.mean_ap25 == 1.0

    def test_unknown_query_keys_rejected(self):
        with pytest.raises(EvalError, match="unknown"):
            evaluate({"mystery": []}, {"q": [mask_from(range(5))]})

    def test_query_without_gt_excluded_from_aggregate(self):
        pred, gt = overlapping_masks(0.9)
        report = evaluate({"good": [Prediction(pred, 1.0)],
                           "vacuous": [Prediction(pred, 1.0)]},
                          {"good": [gt], "vacuous": []})
        assert report.per_query["vacuous"].ap == 0.0
        assert report.mean_ap50 == 1.0

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            preds, gts = random_case(rng)
            aps = [average_precision(preds, gts, t / 100.0)
                   for t in (25,) + AP_THRESHOLDS]
            for a, b in zip(aps, aps[1:]):
                assert b <= a + 1e-12
            report = evaluate({"q": preds}, {"q": gts})
            assert report.per_query["q"].ap <= report.per_query["q"].ap50 + 1e-12
            assert report.per_query["q"].ap50 <= report.per_query["q"].ap25 + 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        preds, gts = random_case(rng)
        base = evaluate({"q": preds}, {"q": gts}).per_query["q"]
        for perm in itertools.permutations(range(len(preds))):
            shuffled = [preds[i] for i in perm]
            r = evaluate({"q": shuffled}, {"q": gts}).per_query["q"]
            assert (r.ap, r.ap50, r.ap25) == (base.ap, base.ap50, base.ap25)

    def test_confidence_scaling_invariance(self):
        rng = np.random.default_rng(2)
        preds, gts = random_case(rng)
        base = evaluate({"q": preds}, {"q": gts}).per_query["q"]
        scaled = [Prediction(p.mask, p.confidence * 0.25) for p in preds]
        r = evaluate({"q": scaled}, {"q": gts}).per_query["q"]
        assert (r.ap, r.ap50, r.ap25) == (base.ap, base.ap50, base.ap25)


def random_case(rng, n_points=60, max_preds=4, max_gts=4):
    n_gts = int(rng.integers(1, max_gts + 1))
    n_preds = int(rng.integers(0, max_preds + 1))
    gts = [rng.random(n_points) < rng.uniform(0.1, 0.4) for _ in range(n_gts)]
    preds = []
    for _ in range(n_preds):
        if n_gts and rng.random() < 0.7:
            base = gts[int(rng.integers(n_gts))].copy()
            flip = rng.random(n_points) < rng.uniform(0.0, 0.5)
            mask = np.logical_xor(base, flip)
        else:
            mask = rng.random(n_points) < rng.uniform(0.05, 0.4)
        conf = float(np.round(rng.uniform(0.05, 1.0), 3))
        preds.append(Prediction(mask, conf))
    return preds, gts


def oracle_ap(preds, gts, threshold):
    """Exhaustive reference: enumerate every matching consistent with the
    greedy confidence-ordered protocol (branching on IoU ties) and return the
    set of achievable APs."""
    order = sorted(range(len(preds)),
                   key=lambda i: (-preds[i].confidence,
                                  -int(preds[i].mask.sum()), i))

    results = set()

    def recurse(k, taken, hits):
        if k == len(order):
            ap = reference_ap(hits, len(gts))
            results.add(round(ap, 12))
            return
        i = order[k]
        candidates = []
        best = 0.0
        for g, gt in enumerate(gts):
            if g in taken:
                continue
            union = np.logical_or(preds[i].mask, gt).sum()
            iou = np.logical_and(preds[i].mask, gt).sum() / union if union else 0.0
            if iou >= threshold:
                if iou > best + 1e-12:
                    best = iou
                    candidates = [g]
                elif abs(iou - best) <= 1e-12:
                    candidates.append(g)
        if not candidates:
            recurse(k + 1, taken, hits + [False])
        else:
            for g in candidates:
                recurse(k + 1, taken | {g}, hits + [True])

    recurse(0, frozenset(), [])
    return results


def reference_ap(hits, n_gt):
    """Direct integral of the interpolated precision envelope."""
    if n_gt == 0:
        return 0.0
    recalls, precisions = [], []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += int(h)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    ap = 0.0
    prev_r = 0.0
    for k, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[k:])
            prev_r = r
    return ap


def test_greedy_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(500):
        preds, gts = random_case(rng)
        for threshold in (0.25, 0.5):
            got = average_precision(preds, gts, threshold)
            want = oracle_ap(preds, gts, threshold)
            assert any(abs(got - w) <= 1e-9 for w in want), (got, want)
            checked += 1
    assert checked == 1000


def test_report_export(tmp_path):
    pred, gt = overlapping_masks(0.8)
    report = evaluate({"q": [Prediction(pred, 0.9)]}, {"q": [gt]})
    save_report(report, tmp_path / "eval.json", tmp_path / "eval.csv")
    import json
    d = json.loads((tmp_path / "eval.json").read_text())
    assert d["per_query"]["q"]["ap50"] == 1.0
    lines = (tmp_path / "eval.csv").read_text().strip().splitlines()
    assert lines[0].startswith("query,ap,ap50,ap25")
    assert lines[1].startswith("q,")
