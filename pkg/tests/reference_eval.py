"""Independent naive reference for mask-AP numbers.

Deliberately simple: plain loops over every prediction/ground-truth pair,
no pooling tricks, no vectorized matching.  The production evaluator must
agree with this file exactly, so the conventions are spelled out here and
must be kept in sync with the package documentation:

* predictions sort by descending score; equal scores keep list order
* a prediction claims the unclaimed ground truth with the highest IoU at
  or above the threshold; IoU ties pick the earliest ground truth
* IoU of two empty masks is 0
* AP uses the precision envelope (precision at each recall level is the
  max precision at that recall or beyond); no ground truths means AP 1.0
  when nothing was predicted and 0.0 otherwise
* strata: small is area < 200, medium is 200..450 inclusive, large > 450,
  judged on ground-truth pixel area
* for a stratum, predictions whose matched ground truth (or, unmatched,
  their highest-IoU ground truth; zero overlap falls back to the
  prediction's own area) lies outside the stratum are dropped, not FPs
* multi-threshold values average the ten thresholds 0.50, 0.55, .. 0.95
"""

import numpy as np

THRESHOLD_GRID = [(50 + 5 * i) / 100 for i in range(10)]


def ref_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = int(np.logical_and(a, b).sum())
    union = int(a.sum()) + int(b.sum()) - inter
    if union == 0:
        return 0.0
    return inter / union


def ref_stratum(area):
    if area < 200:
        return "small"
    if area <= 450:
        return "medium"
    return "large"


def ref_sort(predictions):
    """(tile_id, score, mask) triples by descending score, stable."""
    order = sorted(range(len(predictions)),
                   key=lambda i: -predictions[i][1])
    return [predictions[i] for i in order]


def ref_match(predictions, gts_by_tile, threshold):
    """Greedy matching over the already-sorted prediction list.

    Returns one record per prediction: (score, is_tp, stratum_key) where
    stratum_key names the stratum the prediction counts against.
    """
    claimed = {tile: [False] * len(gts) for tile, gts in gts_by_tile.items()}
    records = []
    for tile_id, score, mask in predictions:
        gts = gts_by_tile[tile_id]
        best_j = -1
        best_iou = 0.0
        nearest_j = -1
        nearest_iou = 0.0
        for j, gt in enumerate(gts):
            iou = ref_iou(mask, gt)
            if iou > nearest_iou:
                nearest_iou = iou
                nearest_j = j
            if claimed[tile_id][j]:
                continue
            if iou >= threshold and iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0:
            claimed[tile_id][best_j] = True
            records.append((score, True, ref_stratum(int(gts[best_j].sum()))))
        elif nearest_j >= 0:
            records.append((score, False,
                            ref_stratum(int(gts[nearest_j].sum()))))
        else:
            records.append((score, False,
                            ref_stratum(int(np.asarray(mask).sum()))))
    return records


def ref_average_precision(flags, total_gt):
    if total_gt == 0:
        return 1.0 if not flags else 0.0
    precisions = []
    recalls = []
    tp = 0
    for k, flag in enumerate(flags):
        if flag:
            tp += 1
        precisions.append(tp / (k + 1))
        recalls.append(tp / total_gt)
    # envelope: walk backwards keeping the running maximum
    enveloped = list(precisions)
    for k in range(len(enveloped) - 2, -1, -1):
        if enveloped[k + 1] > enveloped[k]:
            enveloped[k] = enveloped[k + 1]
    area = 0.0
    previous_recall = 0.0
    for k, flag in enumerate(flags):
        if flag:
            area += (recalls[k] - previous_recall) * enveloped[k]
            previous_recall = recalls[k]
    return area


def ref_stratum_ap(records, gt_areas, stratum, threshold_unused=None):
    total = sum(1 for a in gt_areas if ref_stratum(a) == stratum)
    flags = [is_tp for _, is_tp, key in records if key == stratum]
    return ref_average_precision(flags, total)


def ref_evaluate(predictions, gts_by_tile):
    """Full report over (tile_id, score, mask) predictions.

    Returns a dict with the same numbers the production evaluator reports.
    """
    ordered = ref_sort(predictions)
    gt_areas = [int(gt.sum())
                for gts in gts_by_tile.values() for gt in gts]
    total_gt = len(gt_areas)

    by_threshold = {}
    for t in THRESHOLD_GRID:
        by_threshold[t] = ref_match(ordered, gts_by_tile, t)

    records50 = by_threshold[0.5]
    out = {
        "ap50": ref_average_precision([r[1] for r in records50], total_gt),
        "ap": sum(
            ref_average_precision([r[1] for r in by_threshold[t]], total_gt)
            for t in THRESHOLD_GRID) / len(THRESHOLD_GRID),
    }
    for stratum in ("small", "medium", "large"):
        out[f"ap_{stratum}_50"] = ref_stratum_ap(records50, gt_areas, stratum)
        out[f"ap_{stratum}"] = sum(
            ref_stratum_ap(by_threshold[t], gt_areas, stratum)
            for t in THRESHOLD_GRID) / len(THRESHOLD_GRID)
        out[f"count_{stratum}"] = sum(
            1 for a in gt_areas if ref_stratum(a) == stratum)
    return out
