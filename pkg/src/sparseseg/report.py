"""Result files: delimited tables, key=value reports, rendered figures.

Every delimited file starts with a versioned schema comment line so
downstream parsing can refuse files it does not understand, followed by a
plain header row.  Floats are written with repr precision and survive a
read/write round trip bit for bit.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .bench import REAL_TIME_FPS, FpsResult
from .diffcore import ConfigError
from .evaluator import STRATA, APReport

__all__ = [
    "TradeoffRecord", "ReportError",
    "write_loss_curve", "read_loss_curve",
    "write_eval_report", "write_pr_curves",
    "write_fps_report", "write_sweep_csv", "read_sweep_csv",
    "render_sweep_curve", "instance_palette", "render_overlay", "save_png",
]


class ReportError(ValueError):
    """Raised when a result file is malformed or has the wrong schema."""


@dataclass(frozen=True)
class TradeoffRecord:
    n_instances: int
    fps: float
    ap50: float


def _write_table(path: Path, schema: str, header: Sequence[str],
                 rows: Sequence[Sequence]) -> None:
    lines = [f"# schema: sparseseg.{schema}.v1", ",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def _read_table(path: Path, schema: str) -> list[list[str]]:
    lines = path.read_text().splitlines()
    expected = f"# schema: sparseseg.{schema}.v1"
    if not lines or lines[0] != expected:
        found = lines[0] if lines else "<empty file>"
        raise ReportError(f"{path}: expected first line {expected!r}, "
                          f"found {found!r}")
    return [line.split(",") for line in lines[2:] if line]


# ---------------------------------------------------------------------------
# training curve

def write_loss_curve(path, records) -> None:
    _write_table(Path(path), "loss_curve",
                 ["iteration", "total", "cls", "dice", "bce", "obj"], records)


def read_loss_curve(path) -> list[tuple[int, float, float, float, float, float]]:
    rows = _read_table(Path(path), "loss_curve")
    out = []
    for row in rows:
        if len(row) != 6:
            raise ReportError(f"{path}: bad loss-curve row {row!r}")
        out.append((int(row[0]),) + tuple(float(v) for v in row[1:]))
    return out


# ---------------------------------------------------------------------------
# evaluation

def write_eval_report(path, report: APReport) -> None:
    lines = ["# schema: sparseseg.eval_report.v1"]
    for key in ("ap50", "ap", "ap_small", "ap_medium", "ap_large",
                "ap_small_50", "ap_medium_50", "ap_large_50"):
        lines.append(f"{key}={getattr(report, key):.6f}")
    for s in STRATA:
        lines.append(f"count_{s}={report.gt_counts[s]}")
    lines.append(f"total_gt={report.total_gt}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_pr_curves(path, report: APReport) -> None:
    rows = []
    for name, samples in report.pr_curves.items():
        for s in samples:
            rows.append((name, s.score, s.recall, s.precision))
    _write_table(Path(path), "pr_curve",
                 ["stratum", "score", "recall", "precision"], rows)


# ---------------------------------------------------------------------------
# benchmarking

def write_fps_report(path, result: FpsResult) -> None:
    lines = [
        "# schema: sparseseg.fps_report.v1",
        f"images_processed={result.images_processed}",
        f"wall_seconds={result.wall_seconds:.6f}",
        f"fps={result.fps:.3f}",
        f"p50_ms={result.p50_ms:.3f}",
        f"p90_ms={result.p90_ms:.3f}",
        f"p99_ms={result.p99_ms:.3f}",
        f"warmup_count={result.warmup_count}",
        f"real_time={'yes' if result.fps >= REAL_TIME_FPS else 'no'}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# sweep

def write_sweep_csv(path, records: Sequence[TradeoffRecord]) -> None:
    _write_table(Path(path), "sweep", ["n_instances", "fps", "ap50"],
                 [(r.n_instances, r.fps, r.ap50) for r in records])


def read_sweep_csv(path) -> list[TradeoffRecord]:
    rows = _read_table(Path(path), "sweep")
    out = []
    for row in rows:
        if len(row) != 3:
            raise ReportError(f"{path}: bad sweep row {row!r}")
        out.append(TradeoffRecord(int(row[0]), float(row[1]), float(row[2])))
    return out


def render_sweep_curve(path, records: Sequence[TradeoffRecord]) -> None:
    """Speed/accuracy trade-off figure, written as a vector graphic."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ordered = sorted(records, key=lambda r: r.n_instances)
    ns = [r.n_instances for r in ordered]
    fig, ax_fps = plt.subplots(figsize=(6, 4))
    ax_fps.plot(ns, [r.fps for r in ordered], "o-", color="tab:blue",
                label="FPS")
    ax_fps.set_xlabel("prediction slots N")
    ax_fps.set_ylabel("FPS", color="tab:blue")
    ax_fps.tick_params(axis="y", labelcolor="tab:blue")
    ax_fps.axhline(REAL_TIME_FPS, color="tab:blue", linestyle=":",
                   linewidth=1, alpha=0.6)

    ax_ap = ax_fps.twinx()
    ax_ap.plot(ns, [r.ap50 for r in ordered], "s--", color="tab:red",
               label="AP50")
    ax_ap.set_ylabel("AP50", color="tab:red")
    ax_ap.set_ylim(0.0, 1.05)
    ax_ap.tick_params(axis="y", labelcolor="tab:red")

    ax_fps.set_xticks(ns)
    ax_fps.set_title("speed / accuracy trade-off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# overlays

def instance_palette(count: int) -> np.ndarray:
    """(count, 3) uint8 colors, golden-ratio hue steps for separation."""
    colors = []
    for i in range(count):
        hue = (i * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 1.0)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.array(colors, dtype=np.uint8).reshape(count, 3)


def render_overlay(image: np.ndarray, masks: Sequence[np.ndarray],
                   alpha: float = 0.55) -> np.ndarray:
    """Blend one color per mask over the image; returns (H, W, 3) uint8.

    ``image`` is (3, H, W) in [0, 1]; masks are boolean (H, W) and are
    expected to be disjoint (the stitcher resolves overlaps first).
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"expected a (3, H, W) image, got {image.shape}")
    base = np.clip(image, 0.0, 1.0).transpose(1, 2, 0)
    out = base.copy()
    palette = instance_palette(len(masks))
    for mask, color in zip(masks, palette):
        if mask.shape != base.shape[:2]:
            raise ConfigError(
                f"mask extent {mask.shape} does not cover image "
                f"{base.shape[:2]}")
        out[mask] = (1 - alpha) * base[mask] + alpha * (color / 255.0)
    return (np.round(out * 255.0)).astype(np.uint8)


def save_png(path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")
