"""Average-precision evaluation of predicted 3D part instances.

Matching protocol, stated precisely so independent implementations agree:
predictions sort by confidence descending (ties: larger mask, then lower
input index); each prediction greedily matches the unmatched ground truth of
highest IoU at or above the threshold (ties: lower ground-truth index); AP is
the area under the precision envelope over recall (all-point interpolation).
Thresholds are carried as integer hundredths; the headline AP averages
{0.50, 0.55, ..., 0.95}, with AP50 and AP25 at single thresholds.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import dump_json

log = logging.getLogger(__name__)

AP_THRESHOLDS = tuple(range(50, 100, 5))   # hundredths: 50, 55, ..., 95
AP50 = 50
AP25 = 25


class EvalError(ValueError):
    pass


def point_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b| over equal-length boolean masks; 0 if both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise EvalError(f"mask length mismatch: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        log.warning("IoU of two empty masks defined as 0")
        return 0.0
    return float(np.logical_and(a, b).sum()) / union


@dataclass
class Prediction:
    mask: np.ndarray
    confidence: float


def _sorted_predictions(preds: list[Prediction]) -> list[int]:
    return sorted(range(len(preds)),
                  key=lambda i: (-preds[i].confidence,
                                 -int(preds[i].mask.sum()), i))


def _greedy_match(preds: list[Prediction], gts: list[np.ndarray],
                  threshold_h: int) -> list[bool]:
    """True/false-positive flags in confidence order."""
    thr = threshold_h / 100.0
    order = _sorted_predictions(preds)
    taken = [False] * len(gts)
    hits = []
    for i in order:
        best = -1
        best_iou = 0.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = point_iou(preds[i].mask, gt) if gt.any() or preds[i].mask.any() else 0.0
            if iou >= thr and iou > best_iou:
                best = g
                best_iou = iou
        if best >= 0:
            taken[best] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits


def _ap_from_hits(hits: list[bool], n_gt: int) -> tuple[float, list[tuple[float, float]]]:
    """All-point-interpolated AP and the raw precision-recall samples."""
    if n_gt == 0:
        return 0.0, []
    tp = 0
    pr: list[tuple[float, float]] = []
    for k, hit in enumerate(hits, start=1):
        tp += int(hit)
        pr.append((tp / n_gt, tp / k))
    ap = 0.0
    prev_recall = 0.0
    for k, (recall, _) in enumerate(pr):
        if recall > prev_recall:
            envelope = max(p for r, p in pr[k:])
            ap += (recall - prev_recall) * envelope
            prev_recall = recall
    return ap, pr


def average_precision(preds: list[Prediction], gts: list[np.ndarray],
                      iou_threshold: float) -> float:
    """AP at one threshold (see module docstring for the exact protocol)."""
    for p in preds:
        if not (0.0 <= p.confidence <= 1.0):
            raise EvalError(f"confidence {p.confidence} outside [0, 1]")
    threshold_h = int(round(iou_threshold * 100))
    hits = _greedy_match(preds, gts, threshold_h)
    ap, _ = _ap_from_hits(hits, len(gts))
    return ap


@dataclass
class QueryResult:
    ap: float
    ap50: float
    ap25: float
    n_predictions: int
    n_ground_truth: int
    matches_at_50: int
    pr_at_50: list[tuple[float, float]] = field(default_factory=list)
    pr_at_25: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class EvalReport:
    per_query: dict[str, QueryResult]
    mean_ap: float
    mean_ap50: float
    mean_ap25: float

    def to_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "mean_ap50": self.mean_ap50,
            "mean_ap25": self.mean_ap25,
            "per_query": {
                q: {
                    "ap": r.ap, "ap50": r.ap50, "ap25": r.ap25,
                    "n_predictions": r.n_predictions,
                    "n_ground_truth": r.n_ground_truth,
                    "matches_at_50": r.matches_at_50,
                    "pr_at_50": r.pr_at_50,
                    "pr_at_25": r.pr_at_25,
                }
                for q, r in sorted(self.per_query.items())
            },
        }


def evaluate(predictions: dict[str, list[Prediction]],
             ground_truth: dict[str, list[np.ndarray]]) -> EvalReport:
    """Per-query AP/AP50/AP25 plus unweighted means over queries with >= 1
    ground-truth instance. Queries present only in predictions are an error;
    queries without predictions count as empty."""
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        raise EvalError(f"predictions for unknown queries: {sorted(unknown)}")

    per_query: dict[str, QueryResult] = {}
    for query, gts in ground_truth.items():
        preds = predictions.get(query, [])
        for p in preds:
            if not (0.0 <= p.confidence <= 1.0):
                raise EvalError(f"confidence {p.confidence} outside [0, 1] "
                                f"for query '{query}'")
        aps = {}
        for t in AP_THRESHOLDS + (AP25,):
            hits = _greedy_match(preds, gts, t)
            aps[t], pr = _ap_from_hits(hits, len(gts))
            if t == 50:
                pr50, m50 = pr, sum(hits)
            if t == AP25:
                pr25 = pr
        per_query[query] = QueryResult(
            ap=float(np.mean([aps[t] for t in AP_THRESHOLDS])),
            ap50=aps[50], ap25=aps[AP25],
            n_predictions=len(preds), n_ground_truth=len(gts),
            matches_at_50=m50, pr_at_50=pr50, pr_at_25=pr25)

    scored = [r for r in per_query.values() if r.n_ground_truth > 0]
    if scored:
        mean_ap = float(np.mean([r.ap for r in scored]))
        mean_ap50 = float(np.mean([r.ap50 for r in scored]))
        mean_ap25 = float(np.mean([r.ap25 for r in scored]))
    else:
        mean_ap = mean_ap50 = mean_ap25 = 0.0
    return EvalReport(per_query=per_query, mean_ap=mean_ap,
                      mean_ap50=mean_ap50, mean_ap25=mean_ap25)


def save_report(report: EvalReport, json_path, csv_path=None) -> None:
    dump_json(report.to_dict(), json_path)
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["query", "ap", "ap50", "ap25",
                             "n_predictions", "n_ground_truth", "matches_at_50"])
            for q, r in sorted(report.per_query.items()):
                writer.writerow([q, f"{r.ap:.6f}", f"{r.ap50:.6f}",
                                 f"{r.ap25:.6f}", r.n_predictions,
                                 r.n_ground_truth, r.matches_at_50])
