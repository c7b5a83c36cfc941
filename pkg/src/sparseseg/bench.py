"""Single-stream throughput measurement.

The callable under test is injected, so the harness times exactly one
thing: one inference call per image (forward pass plus thresholding,
however the callable defines it).  File reads, warmup passes, and
bookkeeping between calls stay outside the timed region.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffcore import ConfigError

__all__ = ["FpsResult", "measure_fps", "REAL_TIME_FPS"]

REAL_TIME_FPS = 30.0


@dataclass(frozen=True)
class FpsResult:
    images_processed: int
    wall_seconds: float
    fps: float
    p50_ms: float
    p90_ms: float
    p99_ms: float
    warmup_count: int
    latencies_ms: tuple[float, ...]

    @property
    def real_time(self) -> bool:
        return self.fps >= REAL_TIME_FPS


def measure_fps(infer_fn: Callable, images: Sequence[np.ndarray],
                warmup: int = 3, reps: int = 20) -> FpsResult:
    """Time ``reps`` single calls of ``infer_fn``, cycling through ``images``.

    The first ``warmup`` calls run untimed.  The wall clock is the sum of
    the per-call latencies from a monotonic timer, so only the calls
    themselves count.
    """
    if len(images) == 0:
        raise ConfigError("cannot benchmark an empty image set")
    if warmup < 1:
        raise ConfigError(f"warmup must be >= 1, got {warmup}")
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")

    for i in range(warmup):
        infer_fn(images[i % len(images)])

    latencies = []
    for i in range(reps):
        image = images[i % len(images)]
        start = time.perf_counter()
        infer_fn(image)
        latencies.append(time.perf_counter() - start)

    wall = float(sum(latencies))
    ms = sorted(lat * 1000.0 for lat in latencies)
    p50, p90, p99 = (float(np.percentile(ms, q)) for q in (50, 90, 99))
    return FpsResult(
        images_processed=reps,
        wall_seconds=wall,
        fps=reps / wall,
        p50_ms=p50, p90_ms=p90, p99_ms=p99,
        warmup_count=warmup,
        latencies_ms=tuple(lat * 1000.0 for lat in latencies),
    )
