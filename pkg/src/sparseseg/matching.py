"""Prediction/ground-truth matching, training losses, and the fit loop.

Training treats the decoder's fixed slot set as a set prediction problem:
every iteration builds a cost matrix between slots and ground-truth
instances from class probability and mask dice, solves it exactly with a
Hungarian assignment, and applies per-component losses to the matched
pairs (unmatched slots are pushed toward background and objectness 0).

The Hungarian solver is the potentials + shortest-augmenting-path variant,
O(n^3), run on the transposed matrix so the smaller side (ground truths)
drives the augmentation count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import datagen
from . import diffcore as dc
from . import model as md
from .diffcore import ConfigError, ShapeError, Tensor

__all__ = [
    "Assignment", "LossWeights", "LossBreakdown", "TrainConfig", "FitResult",
    "MatchingError", "TrainingDiverged",
    "dice_coefficient", "pairwise_dice", "pairwise_cost", "hungarian",
    "compute_loss", "downsample_mask", "fit",
]

DICE_EPS = 1e-6
COST_CLASS_EXPONENT = 0.8
COST_DICE_EXPONENT = 1.0


class MatchingError(ValueError):
    """Raised on malformed cost matrices or inconsistent assignments."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss leaves the finite range; carries the curve so far."""

    def __init__(self, message: str, curve: list):
        super().__init__(message)
        self.curve = curve


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]        # (prediction index, gt index)
    unmatched_predictions: tuple[int, ...]
    total_cost: float


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    mask_dice: float = 2.0
    mask_bce: float = 2.0
    obj: float = 1.0

    def __post_init__(self):
        values = (self.cls, self.mask_dice, self.mask_bce, self.obj)
        if any(v < 0 for v in values):
            raise ConfigError(f"loss weights must be >= 0, got {values}")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    total: Tensor            # scalar, on the active tape
    cls: float
    dice: float
    bce: float
    obj: float


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    max_iterations: int = 2000
    # stable for the default model; small width/depth variants tolerate
    # substantially hotter rates
    lr: float = 1e-4
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


# ---------------------------------------------------------------------------
# dice and cost

def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """2|a.b| / (|a| + |b|), eps-regularized; a soft in [0,1], b binary."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dice extents disagree: {a.shape} vs {b.shape}")
    inter = float((a * b).sum())
    return (2.0 * inter + DICE_EPS) / (float(a.sum()) + float(b.sum()) + DICE_EPS)


def pairwise_dice(soft_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """(N,H,W) x (G,H,W) -> (N,G) dice matrix, same formula as above."""
    if soft_masks.shape[1:] != gt_masks.shape[1:]:
        raise ShapeError(
            f"mask extents disagree: {soft_masks.shape} vs {gt_masks.shape}")
    p = soft_masks.reshape(len(soft_masks), -1).astype(np.float64)
    g = gt_masks.reshape(len(gt_masks), -1).astype(np.float64)
    inter = p @ g.T
    return (2.0 * inter + DICE_EPS) / (
        p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] + DICE_EPS)


def pairwise_cost(class_probs: np.ndarray, soft_masks: np.ndarray,
                  gt_classes: np.ndarray, gt_masks: np.ndarray,
                  alpha: float = COST_CLASS_EXPONENT,
                  beta: float = COST_DICE_EXPONENT) -> np.ndarray:
    """cost[i, j] = -(p_i of gt j's class)^alpha * dice(i, j)^beta."""
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if gt_classes.size and (gt_classes.min() < 0
                            or gt_classes.max() >= class_probs.shape[1]):
        raise MatchingError(
            f"gt class ids outside [0, {class_probs.shape[1]}): {gt_classes}")
    prob = class_probs[:, gt_classes]                       # (N, G)
    dice = pairwise_dice(soft_masks, gt_masks)              # (N, G)
    return -(prob ** alpha) * (dice ** beta)


# ---------------------------------------------------------------------------
# Hungarian assignment

def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment of every column to a distinct row.

    ``cost`` is (rows, cols) with rows >= cols; rows are prediction slots,
    columns ground truths.  Exact optimum via row potentials and shortest
    augmenting paths.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be 2D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise MatchingError(
            f"need at least as many predictions as ground truths, "
            f"got {n_pred} x {n_gt}")
    if n_gt == 0:
        return Assignment(pairs=(), unmatched_predictions=tuple(range(n_pred)),
                          total_cost=0.0)
    # operate on the transpose (one augmentation per ground truth), 1-indexed
    # with column 0 as the virtual root
    a = cost.T
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)    # owner[j] = row assigned to col j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = np.flatnonzero(~used[1:]) + 1
            cur = a[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            sel = free[better]
            minv[sel] = cur[better]
            way[sel] = j0
            j1 = free[np.argmin(minv[free])]
            delta = minv[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((int(owner[j] - 1), int(j - 1))
                   for j in range(1, m + 1) if owner[j])
    pairs = tuple((pred, gt) for gt, pred in pairs)
    matched_preds = {pred for pred, _ in pairs}
    total = float(sum(cost[pred, gt] for pred, gt in pairs))
    return Assignment(
        pairs=tuple(sorted(pairs, key=lambda pg: pg[1])),
        unmatched_predictions=tuple(p for p in range(n_pred)
                                    if p not in matched_preds),
        total_cost=total,
    )


# ---------------------------------------------------------------------------
# loss

def _validate_assignment(assignment: Assignment, n_pred: int, n_gt: int) -> None:
    gts = [gt for _, gt in assignment.pairs]
    preds = [p for p, _ in assignment.pairs]
    if sorted(gts) != list(range(n_gt)):
        raise MatchingError(
            f"assignment must cover each of {n_gt} ground truths once, got {gts}")
    if len(set(preds)) != len(preds) or any(not 0 <= p < n_pred for p in preds):
        raise MatchingError(
            f"assignment uses invalid prediction indices {preds} for {n_pred} slots")


def _bce_terms(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise stable binary cross-entropy: softplus(z) - z*t."""
    t = Tensor(targets.astype(logits.dtype))
    return dc.sub(dc.softplus(logits), dc.mul(logits, t))


def compute_loss(class_logits: Tensor, objectness: Tensor, mask_logits: Tensor,
                 gt_masks: np.ndarray, gt_classes: np.ndarray,
                 assignment: Assignment, weights: LossWeights) -> LossBreakdown:
    """Single-tile loss.

    Matched slots learn the gt class, the gt mask (dice + pixel BCE), and
    an objectness equal to the achieved dice (detached); unmatched slots
    learn all-zero class targets and objectness 0.
    """
    n_pred = class_logits.shape[0]
    n_gt = len(gt_masks)
    _validate_assignment(assignment, n_pred, n_gt)
    num_classes = class_logits.shape[1]

    cls_targets = np.zeros((n_pred, num_classes), dtype=class_logits.dtype)
    for pred, gt in assignment.pairs:
        cls_targets[pred, int(gt_classes[gt])] = 1.0
    loss_cls = dc.mean(_bce_terms(class_logits, cls_targets))

    obj_targets = np.zeros(n_pred, dtype=objectness.dtype)
    denom = max(n_gt, 1)
    if assignment.pairs:
        pred_idx = [pred for pred, _ in assignment.pairs]
        matched_logits = dc.take(mask_logits, pred_idx, axis=0)
        matched_gt = np.stack([gt_masks[gt] for _, gt in assignment.pairs])
        gt_t = Tensor(matched_gt.astype(matched_logits.dtype))
        soft = dc.sigmoid(matched_logits)
        inter = dc.sum(dc.mul(soft, gt_t), axis=(1, 2))
        gt_areas = Tensor(matched_gt.sum(axis=(1, 2)).astype(matched_logits.dtype))
        totals = dc.add(dc.sum(soft, axis=(1, 2)), gt_areas)
        dice = dc.div(dc.add(dc.mul(inter, 2.0), DICE_EPS), dc.add(totals, DICE_EPS))
        loss_dice = dc.div(dc.sum(dc.sub(1.0, dice)), float(denom))
        pixel_bce = _bce_terms(matched_logits, matched_gt)
        loss_bce = dc.div(dc.sum(dc.mean(pixel_bce, axis=(1, 2))), float(denom))
        obj_targets[pred_idx] = dice.data
    else:
        loss_dice = Tensor(np.zeros((), dtype=class_logits.dtype))
        loss_bce = Tensor(np.zeros((), dtype=class_logits.dtype))

    obj_flat = dc.reshape(objectness, (n_pred,))
    loss_obj = dc.mean(dc.square(dc.sub(obj_flat, Tensor(obj_targets))))

    total = dc.add(
        dc.add(dc.mul(loss_cls, weights.cls), dc.mul(loss_dice, weights.mask_dice)),
        dc.add(dc.mul(loss_bce, weights.mask_bce), dc.mul(loss_obj, weights.obj)))
    return LossBreakdown(
        total=total,
        cls=float(loss_cls.data),
        dice=float(loss_dice.data),
        bce=float(loss_bce.data),
        obj=float(loss_obj.data),
    )


# ---------------------------------------------------------------------------
# training loop

def downsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average the mask by ``factor`` and re-binarize at half coverage."""
    h, w = mask.shape
    ph = (factor - h % factor) % factor
    pw = (factor - w % factor) % factor
    if ph or pw:
        mask = np.pad(mask, ((0, ph), (0, pw)))
    h2, w2 = mask.shape[0] // factor, mask.shape[1] // factor
    blocks = mask.reshape(h2, factor, w2, factor).astype(np.float32)
    return blocks.mean(axis=(1, 3)) >= 0.5


@dataclass
class FitResult:
    params: dict[str, Tensor]
    curve: list[tuple[int, float, float, float, float, float]]
    velocity: dict[str, np.ndarray]
    checkpoint_path: Optional[Path]


@dataclass
class _Batch:
    images: np.ndarray                   # (B, 3, Hp, Wp) padded
    gt_masks: list[np.ndarray]           # per tile, (G, Hp/4, Wp/4) bool
    gt_classes: list[np.ndarray]


def _prepare_batch(tiles: Sequence[datagen.LoadedTile],
                   n_instances: int) -> _Batch:
    max_h = max(t.image.shape[1] for t in tiles)
    max_w = max(t.image.shape[2] for t in tiles)
    ph = math.ceil(max_h / 16) * 16
    pw = math.ceil(max_w / 16) * 16
    images = np.zeros((len(tiles), 3, ph, pw), dtype=np.float32)
    gt_masks, gt_classes = [], []
    for b, tile in enumerate(tiles):
        c, h, w = tile.image.shape
        images[b, :, :h, :w] = tile.image
        if len(tile.instances) > n_instances:
            raise ConfigError(
                f"tile {tile.tile_id} has {len(tile.instances)} instances, "
                f"more than the {n_instances} prediction slots")
        small = []
        for inst in tile.instances:
            full = np.zeros((ph, pw), dtype=bool)
            full[:h, :w] = inst.mask
            small.append(downsample_mask(full, 4))
        gt_masks.append(np.stack(small) if small
                        else np.zeros((0, ph // 4, pw // 4), dtype=bool))
        gt_classes.append(np.array([inst.class_id for inst in tile.instances],
                                   dtype=np.int64))
    return _Batch(images=images, gt_masks=gt_masks, gt_classes=gt_classes)


def _batch_indices(n_tiles: int, batch_size: int, seed: int, iteration: int):
    """Deterministic batch schedule, random-access by iteration index."""
    b = min(batch_size, n_tiles)
    per_epoch = n_tiles // b
    epoch, slot = divmod(iteration, per_epoch)
    order = np.random.default_rng(
        np.random.SeedSequence([seed, epoch])).permutation(n_tiles)
    return order[slot * b:(slot + 1) * b]


def _slice_tile(t: Tensor, index: int) -> Tensor:
    picked = dc.take(t, [index], axis=0)
    return dc.reshape(picked, picked.shape[1:])


def _write_snapshot(out_dir: Path, params: Mapping[str, Tensor],
                    velocity: Mapping[str, np.ndarray], iteration: int,
                    seed: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "checkpoint.spseg"
    ckpt.save_checkpoint(path, params)
    ckpt.save_checkpoint(out_dir / "optimizer.spseg", velocity)
    (out_dir / "state.json").write_text(
        json.dumps({"iteration": iteration, "seed": seed}) + "\n")
    return path


def fit(tiles: Sequence[datagen.LoadedTile], params: dict[str, Tensor],
        model_cfg: md.ModelConfig, cfg: TrainConfig,
        out_dir: Optional[Path] = None, start_iteration: int = 0,
        velocity: Optional[dict[str, np.ndarray]] = None) -> FitResult:
    """SGD over Hungarian-matched set losses; see module docstring.

    Deterministic for a fixed (cfg.seed, start state): the batch schedule
    is a pure function of seed and iteration, so resuming from a snapshot
    continues the identical run.
    """
    if not tiles:
        raise ConfigError("fit requires a nonempty tile list")
    n = model_cfg.decoder.n_instances
    curve: list[tuple[int, float, float, float, float, float]] = []
    velocity = dict(velocity) if velocity else {}
    checkpoint_path: Optional[Path] = None
    param_list = list(params.values())
    for iteration in range(start_iteration, cfg.max_iterations):
        chosen = _batch_indices(len(tiles), cfg.batch_size, cfg.seed, iteration)
        batch = _prepare_batch([tiles[i] for i in chosen], n)
        with dc.OpGraph() as graph:
            out = md.forward(Tensor(batch.images), model_cfg, params)
            if not (np.isfinite(out.mask_logits.data).all()
                    and np.isfinite(out.class_logits.data).all()
                    and np.isfinite(out.objectness.data).all()):
                raise TrainingDiverged(
                    f"model outputs became non-finite at iteration {iteration}",
                    curve)
            soft_masks = dc._sigmoid_stable(out.mask_logits.data)
            class_probs = dc._sigmoid_stable(out.class_logits.data)
            total = None
            sums = np.zeros(4)
            for b in range(len(chosen)):
                assignment = hungarian(pairwise_cost(
                    class_probs[b], soft_masks[b],
                    batch.gt_classes[b], batch.gt_masks[b]))
                breakdown = compute_loss(
                    _slice_tile(out.class_logits, b),
                    _slice_tile(out.objectness, b),
                    _slice_tile(out.mask_logits, b),
                    batch.gt_masks[b], batch.gt_classes[b],
                    assignment, cfg.weights)
                tile_total = dc.div(breakdown.total, float(len(chosen)))
                total = tile_total if total is None else dc.add(total, tile_total)
                sums += np.array([breakdown.cls, breakdown.dice,
                                  breakdown.bce, breakdown.obj])
        total_value = total.item()
        parts = [float(s) / len(chosen) for s in sums]
        record = (iteration, total_value, parts[0], parts[1], parts[2], parts[3])
        if not np.isfinite(total_value):
            raise TrainingDiverged(
                f"loss became non-finite at iteration {iteration}", curve)
        curve.append(record)
        graph.backward(total, params=param_list)
        velocity = dc.sgd_step(params, cfg.lr, cfg.momentum, velocity)
        done = iteration + 1
        if out_dir is not None and (done % cfg.checkpoint_every == 0
                                    or done == cfg.max_iterations):
            checkpoint_path = _write_snapshot(Path(out_dir), params, velocity,
                                              done, cfg.seed)
    return FitResult(params=params, curve=curve, velocity=velocity,
                     checkpoint_path=checkpoint_path)
