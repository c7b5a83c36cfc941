"""Mask average precision with size-stratified breakdowns.

Evaluation matching is greedy in score order (highest first), distinct on
purpose from the optimal assignment used during training: detection
metrics reward confident predictions first, and the greedy rule is what
AP tooling conventionally does.

Conventions, shared verbatim with the naive reference implementation in
the test suite:

* predictions sort by descending score; equal scores keep list order
* a prediction claims the unclaimed ground truth with the highest IoU at
  or above the threshold; IoU ties pick the earliest ground truth
* IoU of two empty masks is 0
* AP uses the precision envelope; zero ground truths gives AP 1.0 when
  nothing was predicted against them and 0.0 otherwise
* strata: small is area < 200, medium 200..450 inclusive, large > 450,
  judged on ground-truth pixel area
* per stratum, predictions whose matched ground truth (or, unmatched,
  their highest-IoU ground truth; zero overlap falls back to the
  prediction's own area) lies outside the stratum are dropped, not FPs
* multi-threshold values average thresholds 0.50, 0.55, .. 0.95
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diffcore import ShapeError

__all__ = [
    "SMALL_MAX_AREA", "MEDIUM_MAX_AREA", "IOU_THRESHOLD_GRID",
    "EvaluationError", "EvalPrediction", "EvalConfig", "PRSample", "APReport",
    "mask_iou", "stratum_of", "match_for_eval", "average_precision", "evaluate",
]

SMALL_MAX_AREA = 200          # exclusive upper bound for "small"
MEDIUM_MAX_AREA = 450         # inclusive upper bound for "medium"
IOU_THRESHOLD_GRID = tuple((50 + 5 * i) / 100 for i in range(10))
STRATA = ("small", "medium", "large")


class EvaluationError(ValueError):
    """Raised on malformed evaluation inputs."""


@dataclass(frozen=True)
class EvalPrediction:
    tile_id: str
    score: float
    mask: np.ndarray              # bool (H, W)
    class_id: int = 0


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = IOU_THRESHOLD_GRID
    primary_threshold: float = 0.5

    def __post_init__(self):
        if self.primary_threshold not in self.thresholds:
            raise EvaluationError(
                f"primary threshold {self.primary_threshold} missing from "
                f"the grid {self.thresholds}")


@dataclass(frozen=True)
class PRSample:
    score: float
    recall: float
    precision: float


@dataclass
class APReport:
    ap50: float
    ap: float
    ap_small: float
    ap_medium: float
    ap_large: float
    ap_small_50: float
    ap_medium_50: float
    ap_large_50: float
    gt_counts: dict[str, int]
    pr_curves: dict[str, list[PRSample]] = field(default_factory=dict)

    @property
    def total_gt(self) -> int:
        return sum(self.gt_counts.values())


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask extents disagree: {a.shape} vs {b.shape}")
    inter = int((a & b).sum())
    union = int(a.sum()) + int(b.sum()) - inter
    return inter / union if union else 0.0


def stratum_of(area: int) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


def _check_sorted(scores: Sequence[float]) -> None:
    for k in range(1, len(scores)):
        if scores[k] > scores[k - 1]:
            raise EvaluationError(
                f"predictions must be sorted by descending score, but "
                f"score[{k}]={scores[k]} exceeds score[{k - 1}]={scores[k - 1]}")


def match_for_eval(predictions: Sequence[tuple[float, np.ndarray]],
                   ground_truths: Sequence[np.ndarray],
                   iou_threshold: float) -> tuple[list[bool], int]:
    """Greedy TP/FP flags for score-sorted predictions, plus missed gts."""
    _check_sorted([score for score, _ in predictions])
    claimed = np.zeros(len(ground_truths), dtype=bool)
    flags = []
    for _, mask in predictions:
        ious = np.array([mask_iou(mask, gt) for gt in ground_truths])
        open_enough = (~claimed) & (ious >= iou_threshold) & (ious > 0)
        if open_enough.any():
            best = int(np.argmax(np.where(open_enough, ious, -1.0)))
            claimed[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, int((~claimed).sum())


def average_precision(flags: Sequence[bool], total_gt: int) -> float:
    if total_gt < 0:
        raise EvaluationError(f"total_gt must be >= 0, got {total_gt}")
    if total_gt == 0:
        return 1.0 if len(flags) == 0 else 0.0
    if not flags:
        return 0.0
    flag_arr = np.asarray(flags, dtype=bool)
    cum_tp = np.cumsum(flag_arr)
    precision = cum_tp / np.arange(1, len(flags) + 1)
    recall = cum_tp / total_gt
    enveloped = np.maximum.accumulate(precision[::-1])[::-1]
    previous = np.concatenate([[0.0], recall[:-1]])
    # accumulate sequentially; pairwise summation could drift in the last
    # ulp and the reports are compared for exact equality
    area = 0.0
    for term in ((recall - previous) * enveloped)[flag_arr]:
        area += float(term)
    return area


# ---------------------------------------------------------------------------
# full-report evaluation

@dataclass
class _TileTruth:
    masks: list[np.ndarray]
    areas: list[int]
    strata: list[str]


def _truths_from(dataset) -> dict[str, _TileTruth]:
    tiles = getattr(dataset, "tiles", dataset)
    out = {}
    for tile in tiles:
        masks = [inst.mask for inst in tile.instances]
        areas = [int(m.sum()) for m in masks]
        out[tile.tile_id] = _TileTruth(
            masks=masks, areas=areas, strata=[stratum_of(a) for a in areas])
    return out


def _match_with_strata(ordered: Sequence[EvalPrediction],
                       truths: Mapping[str, _TileTruth],
                       threshold: float) -> list[tuple[float, bool, str]]:
    """(score, is_tp, stratum) per prediction, in the given order."""
    claimed = {tid: np.zeros(len(t.masks), dtype=bool)
               for tid, t in truths.items()}
    records = []
    for pred in ordered:
        truth = truths[pred.tile_id]
        if truth.masks:
            ious = np.array([mask_iou(pred.mask, gt) for gt in truth.masks])
            nearest = int(np.argmax(ious))
            open_enough = (~claimed[pred.tile_id]) & (ious >= threshold) & (ious > 0)
        else:
            ious = np.zeros(0)
            nearest = -1
            open_enough = np.zeros(0, dtype=bool)
        if open_enough.any():
            best = int(np.argmax(np.where(open_enough, ious, -1.0)))
            claimed[pred.tile_id][best] = True
            records.append((pred.score, True, truth.strata[best]))
        elif nearest >= 0 and ious[nearest] > 0:
            records.append((pred.score, False, truth.strata[nearest]))
        else:
            records.append((pred.score, False,
                            stratum_of(int(pred.mask.sum()))))
    return records


def _stratum_ap(records: Sequence[tuple[float, bool, str]],
                stratum: str, total: int) -> float:
    return average_precision(
        [tp for _, tp, key in records if key == stratum], total)


def _pr_samples(scored_flags: Sequence[tuple[float, bool]],
                total_gt: int) -> list[PRSample]:
    samples = []
    tp = 0
    for k, (score, flag) in enumerate(scored_flags):
        tp += int(flag)
        samples.append(PRSample(
            score=score,
            recall=tp / total_gt if total_gt else 0.0,
            precision=tp / (k + 1)))
    return samples


def evaluate(predictions: Sequence[EvalPrediction], dataset,
             config: EvalConfig = EvalConfig()) -> APReport:
    """Score a prediction set against a dataset's annotations.

    ``dataset`` is anything with a ``tiles`` attribute (or a plain tile
    sequence) whose tiles expose ``tile_id`` and ``instances``.
    """
    truths = _truths_from(dataset)
    unknown = sorted({p.tile_id for p in predictions} - set(truths))
    if unknown:
        raise EvaluationError(
            "predictions reference unknown tile ids: " + ", ".join(unknown))

    ordered = sorted(predictions, key=lambda p: -p.score)
    counts = {s: 0 for s in STRATA}
    for truth in truths.values():
        for s in truth.strata:
            counts[s] += 1
    total_gt = sum(counts.values())

    by_threshold = {t: _match_with_strata(ordered, truths, t)
                    for t in config.thresholds}
    primary = by_threshold[config.primary_threshold]

    ap50 = average_precision([tp for _, tp, _ in primary], total_gt)
    per_threshold = [
        average_precision([tp for _, tp, _ in by_threshold[t]], total_gt)
        for t in config.thresholds]
    ap = sum(per_threshold) / len(per_threshold)

    single = {s: _stratum_ap(primary, s, counts[s]) for s in STRATA}
    multi = {}
    for s in STRATA:
        values = [_stratum_ap(by_threshold[t], s, counts[s])
                  for t in config.thresholds]
        multi[s] = sum(values) / len(values)

    curves = {"overall": _pr_samples([(sc, tp) for sc, tp, _ in primary],
                                     total_gt)}
    for s in STRATA:
        curves[s] = _pr_samples(
            [(sc, tp) for sc, tp, key in primary if key == s], counts[s])

    return APReport(
        ap50=ap50, ap=ap,
        ap_small=multi["small"], ap_medium=multi["medium"],
        ap_large=multi["large"],
        ap_small_50=single["small"], ap_medium_50=single["medium"],
        ap_large_50=single["large"],
        gt_counts=counts, pr_curves=curves)
