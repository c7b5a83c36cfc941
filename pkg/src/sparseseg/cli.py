"""Command-line entry points.

Usage:
    sparseseg generate --out data/ [--config cfg.json] [--seed 0]
    sparseseg train <dataset> --out run/ [--config cfg.json] [--n-instances 64]
    sparseseg eval <run> <dataset> --out reports/ [--score-threshold 0.3]
    sparseseg bench <run> <dataset> --out reports/ [--warmup 3] [--reps 20]
    sparseseg sweep <dataset> --out sweep/ [--n-instances 100 --n-instances 300]
    sparseseg predict <run> <raster.png> --out predictions/ [--tile 256]

Configs are JSON files with optional "count", "workers", "scene", "model",
"train" and "split" sections; omitted fields fall back to the library
defaults.  All commands exit 0 on success and nonzero with a message on
stderr otherwise.  The SPSEG_THREADS environment variable caps worker
parallelism for dataset generation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import bench as bn
from . import checkpoint as ckpt
from . import datagen as dg
from . import evaluator as ev
from . import matching as mt
from . import model as md
from . import report as rp
from .backbone import BackboneConfig
from .decoder import DecoderConfig
from .diffcore import ConfigError, ShapeError, Tensor
from .encoder import EncoderConfig

RUN_CONFIG_NAME = "run_config.json"

_CLI_ERRORS = (
    ConfigError, ShapeError, dg.DatasetError, dg.GenerationError, dg.RleError,
    ckpt.CheckpointError, mt.MatchingError, ev.EvaluationError, rp.ReportError,
    OSError, UnidentifiedImageError, json.JSONDecodeError,
)


# ---------------------------------------------------------------------------
# config plumbing

def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(blob, dict):
        raise ConfigError(f"{path}: top-level config must be a JSON object")
    return blob


def _scene_config(cfg: dict, seed: Optional[int]) -> dg.SceneConfig:
    section = dict(cfg.get("scene", {}))
    if "count_range" in section:
        section["count_range"] = tuple(section["count_range"])
    if seed is not None:
        section["seed"] = seed
    return dg.SceneConfig(**section)


def _model_config(cfg: dict, n_instances: Optional[int]) -> md.ModelConfig:
    section = cfg.get("model", {})
    bb_kw = dict(section.get("backbone", {}))
    for key in ("stage_channels", "blocks_per_stage"):
        if key in bb_kw:
            bb_kw[key] = tuple(bb_kw[key])
    enc_kw = dict(section.get("encoder", {}))
    if "ppm_bins" in enc_kw:
        enc_kw["ppm_bins"] = tuple(enc_kw["ppm_bins"])
    model = md.ModelConfig(backbone=BackboneConfig(**bb_kw),
                           encoder=EncoderConfig(**enc_kw),
                           decoder=DecoderConfig(**dict(section.get("decoder", {}))))
    if n_instances is not None:
        model = model.with_n_instances(n_instances)
    return model


def _train_config(cfg: dict, seed: Optional[int]) -> mt.TrainConfig:
    section = dict(cfg.get("train", {}))
    if "weights" in section:
        section["weights"] = mt.LossWeights(**section["weights"])
    if seed is not None:
        section["seed"] = seed
    return mt.TrainConfig(**section)


def _write_run_config(run_dir: Path, model: md.ModelConfig,
                      train: mt.TrainConfig, dataset: Path,
                      split: str = "train") -> None:
    payload = {
        "model": {
            "backbone": dataclasses.asdict(model.backbone),
            "encoder": dataclasses.asdict(model.encoder),
            "decoder": dataclasses.asdict(model.decoder),
        },
        "train": dataclasses.asdict(train),
        "dataset": str(dataset),
        "split": split,
    }
    (run_dir / RUN_CONFIG_NAME).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_run(run_dir: Path) -> tuple[md.ModelConfig, dict[str, Tensor]]:
    """Model config + trained parameters from a training run directory."""
    cfg_path = run_dir / RUN_CONFIG_NAME
    if not cfg_path.exists():
        raise ConfigError(f"{run_dir} is not a run directory "
                          f"(missing {RUN_CONFIG_NAME})")
    blob = json.loads(cfg_path.read_text(encoding="utf-8"))
    model = _model_config(blob, None)
    params = {name: Tensor(arr, requires_grad=True)
              for name, arr in ckpt.load_checkpoint(run_dir / "checkpoint.spseg").items()}
    return model, params


def _read_raster(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _eval_tiles(dataset: dg.LoadedDataset, split: str) -> list[dg.LoadedTile]:
    if split == "all":
        return dataset.tiles
    chosen = dataset.by_split(split)
    if not chosen:
        raise ConfigError(f"dataset has no tiles in split {split!r}")
    return chosen


def _predictions_for(tiles: Sequence[dg.LoadedTile], model: md.ModelConfig,
                     params: dict[str, Tensor],
                     score_threshold: float) -> list[ev.EvalPrediction]:
    preds: list[ev.EvalPrediction] = []
    for tile in tiles:
        for sm in md.infer(tile.image, model, params, score_threshold)[0]:
            preds.append(ev.EvalPrediction(tile_id=tile.tile_id, score=sm.score,
                                           mask=sm.mask, class_id=sm.class_id))
    return preds


def _evaluate_tiles(tiles, model, params, score_threshold, iou_threshold):
    preds = _predictions_for(tiles, model, params, score_threshold)
    cfg = ev.EvalConfig(primary_threshold=iou_threshold)
    return ev.evaluate(preds, _Truths(tiles), cfg)


class _Truths:
    """Adapter giving the evaluator its expected ``.tiles`` view."""

    def __init__(self, tiles):
        self.tiles = tiles


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    cfg = _load_json(args.config)
    scene = _scene_config(cfg, args.seed)
    count = int(cfg.get("count", 64))
    workers = cfg.get("workers")
    out = Path(args.out)
    manifest = dg.generate_dataset(count, scene, out,
                                   workers=dg.resolve_workers(workers))
    print(f"wrote {count} tiles under {out} (manifest: {manifest.name})")
    return 0


def cmd_train(args) -> int:
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    curve_path = run_dir / "loss_curve.csv"
    prior_curve: list = []
    start = 0
    velocity = None

    if args.resume:
        # the stored run config is the source of truth: a resumed run must
        # be the run it continues, not a new one with fresh flags
        cfg = json.loads((run_dir / RUN_CONFIG_NAME).read_text(encoding="utf-8"))
        model = _model_config(cfg, None)
        train = _train_config(cfg, None)
        state = json.loads((run_dir / "state.json").read_text(encoding="utf-8"))
        start = int(state["iteration"])
        params = {name: Tensor(arr, requires_grad=True)
                  for name, arr in ckpt.load_checkpoint(run_dir / "checkpoint.spseg").items()}
        velocity = dict(ckpt.load_checkpoint(run_dir / "optimizer.spseg"))
        if curve_path.exists():
            prior_curve = [r for r in rp.read_loss_curve(curve_path)
                           if r[0] < start]
    else:
        cfg = _load_json(args.config)
        model = _model_config(cfg, args.n_instances)
        train = _train_config(cfg, args.seed)
        params = md.init_model(model, train.seed)
        _write_run_config(run_dir, model, train, Path(args.dataset),
                          split=cfg.get("split", "train"))

    dataset = dg.load_dataset(args.dataset)
    tiles = _eval_tiles(dataset, cfg.get("split", "train"))
    worst = max(len(t.instances) for t in tiles)
    if worst > model.decoder.n_instances:
        raise ConfigError(
            f"a training tile has {worst} instances but the model only has "
            f"{model.decoder.n_instances} prediction slots; raise --n-instances")

    try:
        result = mt.fit(tiles, params, model, train, out_dir=run_dir,
                        start_iteration=start, velocity=velocity)
    except mt.TrainingDiverged as exc:
        rp.write_loss_curve(curve_path, prior_curve + list(exc.curve))
        raise
    rp.write_loss_curve(curve_path, prior_curve + result.curve)
    last = result.curve[-1] if result.curve else None
    if last is not None:
        print(f"trained to iteration {last[0] + 1}, final loss {last[1]:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    model, params = _load_run(Path(args.run))
    dataset = dg.load_dataset(args.dataset)
    tiles = _eval_tiles(dataset, args.split)
    report = _evaluate_tiles(tiles, model, params,
                             args.score_threshold, args.iou_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rp.write_eval_report(out / "eval_report.txt", report)
    rp.write_pr_curves(out / "pr_curves.csv", report)
    print(f"ap50={report.ap50:.4f} ap={report.ap:.4f} "
          f"({len(tiles)} tiles, {report.total_gt} instances)")
    print(f"reports under {out}")
    return 0


def cmd_bench(args) -> int:
    model, params = _load_run(Path(args.run))
    dataset = dg.load_dataset(args.dataset)
    tiles = _eval_tiles(dataset, args.split)
    images = [t.image for t in tiles]

    def infer_fn(image):
        return md.infer(image, model, params, args.score_threshold)

    result = bn.measure_fps(infer_fn, images, warmup=args.warmup,
                            reps=args.reps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rp.write_fps_report(out / "fps_report.txt", result)
    label = "real-time" if result.real_time else "below real-time"
    print(f"fps={result.fps:.2f} p50={result.p50_ms:.1f}ms "
          f"p99={result.p99_ms:.1f}ms ({label})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_json(args.config)
    dataset = dg.load_dataset(args.dataset)
    train_tiles = _eval_tiles(dataset, cfg.get("split", "train"))
    eval_split = cfg.get("eval_split", "val")
    eval_tiles = _eval_tiles(dataset, eval_split)
    train = _train_config(cfg, args.seed)
    n_values = sorted(set(args.n_instances or [100, 300, 500]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    worst = dataset.max_instances
    for n in n_values:
        if n < worst:
            print(f"warning: N={n} is below the dataset maximum of {worst} "
                  f"instances; comparison against larger N is unfair",
                  file=sys.stderr)

    records: list[rp.TradeoffRecord] = []
    csv_path = out / "sweep.csv"
    for n in n_values:
        model = _model_config(cfg, n)
        leg_dir = out / f"n{n}"
        leg_dir.mkdir(exist_ok=True)
        params = md.init_model(model, train.seed)
        _write_run_config(leg_dir, model, train, Path(args.dataset),
                          split=cfg.get("split", "train"))
        try:
            result = mt.fit(train_tiles, params, model, train, out_dir=leg_dir)
            rp.write_loss_curve(leg_dir / "loss_curve.csv", result.curve)
            report = _evaluate_tiles(eval_tiles, model, params,
                                     args.score_threshold, args.iou_threshold)

            def infer_fn(image, _m=model, _p=params):
                return md.infer(image, _m, _p, args.score_threshold)

            fps = bn.measure_fps(infer_fn, [t.image for t in eval_tiles],
                                 warmup=args.warmup, reps=args.reps)
        except _CLI_ERRORS + (mt.TrainingDiverged,):
            rp.write_sweep_csv(csv_path, records)
            print(f"sweep aborted at N={n}; partial results in {csv_path}",
                  file=sys.stderr)
            raise
        records.append(rp.TradeoffRecord(n_instances=n, fps=fps.fps,
                                         ap50=report.ap50))
        print(f"N={n}: fps={fps.fps:.2f} ap50={report.ap50:.4f}")

    rp.write_sweep_csv(csv_path, records)
    rp.render_sweep_curve(out / "sweep.svg", records)
    if len(records) > 1:
        ap_lo, ap_hi = records[0].ap50, records[-1].ap50
        direction = ("rose" if ap_hi > ap_lo else
                     "fell" if ap_hi < ap_lo else "was flat")
        print(f"ap50 {direction} from N={records[0].n_instances} "
              f"to N={records[-1].n_instances} ({ap_lo:.4f} -> {ap_hi:.4f})")
    print(f"sweep results under {out}")
    return 0


def cmd_predict(args) -> int:
    model, params = _load_run(Path(args.run))
    raster = _read_raster(Path(args.raster))
    extent = raster.shape[1:]
    if args.tile <= args.overlap:
        raise ConfigError(f"need tile > overlap, got tile={args.tile} "
                          f"overlap={args.overlap}")
    windows = dg.tile_raster(raster, args.tile, args.overlap)

    # gather window-local detections, then resolve overlaps globally: each
    # pixel goes to the covering instance with the highest score
    detections: list[tuple[float, int, np.ndarray, int, int]] = []
    for win in windows:
        for sm in md.infer(win.data, model, params, args.score_threshold)[0]:
            detections.append((sm.score, sm.class_id, sm.mask,
                               win.row, win.col))
    detections.sort(key=lambda d: d[0])

    owner = np.full(extent, -1, dtype=np.int64)
    for idx, (score, _cls, mask, row, col) in enumerate(detections):
        h = min(mask.shape[0], extent[0] - row)
        w = min(mask.shape[1], extent[1] - col)
        patch = mask[:h, :w]
        owner[row:row + h, col:col + w][patch] = idx

    kept = []
    for idx, (score, class_id, _mask, _r, _c) in enumerate(detections):
        full = owner == idx
        if full.any():
            kept.append((score, class_id, full))
    kept.sort(key=lambda k: -k[0])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overlay = rp.render_overlay(raster, [mask for _s, _c, mask in kept])
    rp.save_png(out / "overlay.png", overlay)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for i, (score, class_id, mask) in enumerate(kept):
            fh.write(json.dumps({
                "id": f"inst_{i:04d}",
                "score": round(score, 6),
                "class_id": class_id,
                "extent": [int(extent[0]), int(extent[1])],
                "rle": dg.rle_encode(mask),
            }, sort_keys=True) + "\n")
    print(f"{len(kept)} instances above score {args.score_threshold}; "
          f"overlay and records under {out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseseg",
        description="synthetic-scene instance segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed=False, score=False, iou=False, timing=False,
               split=None):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
        if score:
            p.add_argument("--score-threshold", type=float, default=0.3)
        if iou:
            p.add_argument("--iou-threshold", type=float, default=0.5)
        if timing:
            p.add_argument("--warmup", type=int, default=3)
            p.add_argument("--reps", type=int, default=20)
        if split is not None:
            p.add_argument("--split", default=split,
                           choices=["train", "val", "test", "all"])

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, seed=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("dataset")
    p.add_argument("--n-instances", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    common(p, seed=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("run")
    p.add_argument("dataset")
    common(p, score=True, iou=True, split="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="measure single-stream FPS")
    p.add_argument("run")
    p.add_argument("dataset")
    common(p, score=True, timing=True, split="val")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep", help="speed/accuracy trade-off over N")
    p.add_argument("dataset")
    p.add_argument("--n-instances", type=int, action="append", default=None,
                   help="prediction slots; repeat for each swept value")
    common(p, seed=True, score=True, iou=True, timing=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("predict", help="segment a raster and render overlays")
    p.add_argument("run")
    p.add_argument("raster")
    p.add_argument("--tile", type=int, default=256,
                   help="sliding-window extent in pixels")
    p.add_argument("--overlap", type=int, default=32,
                   help="window overlap in pixels")
    common(p, score=True)
    p.set_defaults(fn=cmd_predict)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except mt.TrainingDiverged as exc:
        print(f"sparseseg: training diverged: {exc}", file=sys.stderr)
        return 2
    except _CLI_ERRORS as exc:
        print(f"sparseseg: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
