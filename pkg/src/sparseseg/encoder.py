"""Instance context encoder.

Fuses the three pyramid levels into a single map at 1/4 resolution.  The
deepest level is enriched with multi-bin pyramid pooling, lateral 1x1
convolutions bring every level to a common width, a top-down pathway adds
coarser levels into finer ones, and the three results are upsampled to the
1/4 grid, concatenated, and projected down to ``fused_channels``.

All encoder layers are linear (convolutions, pooling, resampling); the
nonlinearities live in the backbone below and the decoder above.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .backbone import FeaturePyramid
from .diffcore import ConfigError, ShapeError, Tensor

__all__ = ["EncoderConfig", "init_params", "pyramid_pool", "fuse"]


@dataclass(frozen=True)
class EncoderConfig:
    fused_channels: int = 64
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    # pyramid pooling runs on the raw deepest level by default; set True to
    # run it after the lateral projection instead (ablation switch)
    ppm_after_lateral: bool = False
    norm_groups: int = 8

    def __post_init__(self):
        if not self.ppm_bins:
            raise ConfigError("ppm_bins must be nonempty")
        if any(b <= 0 for b in self.ppm_bins):
            raise ConfigError(f"ppm_bins must be positive, got {self.ppm_bins}")
        if list(self.ppm_bins) != sorted(set(self.ppm_bins)):
            raise ConfigError(f"ppm_bins must be strictly increasing, got {self.ppm_bins}")
        if self.fused_channels % self.norm_groups != 0:
            raise ConfigError(
                f"fused_channels {self.fused_channels} not divisible by "
                f"{self.norm_groups} norm groups")


def _conv1x1(rng, out_ch: int, in_ch: int) -> tuple[Tensor, Tensor]:
    weight = Tensor(dc.uniform_fan_in(rng, (out_ch, in_ch, 1, 1)), requires_grad=True)
    bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
    return weight, bias


def init_params(cfg: EncoderConfig, pyramid_channels: tuple[int, int, int],
                seed: int) -> dict[str, Tensor]:
    """Parameters for the laterals, the pyramid pooling convs, and the
    final projection.  ``pyramid_channels`` is (p3, p4, p5) widths."""
    rng = np.random.default_rng(seed)
    c3, c4, c5 = pyramid_channels
    f = cfg.fused_channels
    params: dict[str, Tensor] = {}
    ppm_width = f if cfg.ppm_after_lateral else c5
    params["ppm.proj.weight"], params["ppm.proj.bias"] = _conv1x1(rng, ppm_width, ppm_width)
    for b in cfg.ppm_bins:
        w, bias = _conv1x1(rng, ppm_width, ppm_width)
        params[f"ppm.bin{b}.weight"] = w
        params[f"ppm.bin{b}.bias"] = bias
    for name, width in (("lateral3", c3), ("lateral4", c4), ("lateral5", c5)):
        params[f"{name}.weight"], params[f"{name}.bias"] = _conv1x1(rng, f, width)
    params["project.weight"], params["project.bias"] = _conv1x1(rng, f, 3 * f)
    return params


def pyramid_pool(deepest: Tensor, bins, params: Mapping[str, Tensor]) -> Tensor:
    """Projected input plus one upsampled 1x1-convolved average per bin.

    Bins larger than the input extent are clamped to it, so tiny maps
    degrade to repeated global context rather than failing.
    """
    h, w = deepest.shape[2], deepest.shape[3]
    out = dc.conv2d(deepest, params["ppm.proj.weight"], params["ppm.proj.bias"])
    for b in bins:
        pooled = dc.pool2d("adaptive_avg", deepest, (min(b, h), min(b, w)))
        mixed = dc.conv2d(pooled, params[f"ppm.bin{b}.weight"], params[f"ppm.bin{b}.bias"])
        out = dc.add(out, dc.upsample_bilinear(mixed, (h, w)))
    return out


def _lateral(level: Tensor, name: str, params: Mapping[str, Tensor]) -> Tensor:
    weight = params[f"{name}.weight"]
    if level.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"{name}: level has {level.shape[1]} channels, expected {weight.shape[1]}")
    return dc.conv2d(level, weight, params[f"{name}.bias"])


def fuse(pyramid: FeaturePyramid, cfg: EncoderConfig,
         params: Mapping[str, Tensor]) -> Tensor:
    """Top-down fusion to a single N x fused_channels x H/4 x W/4 map."""
    p3, p4, p5 = pyramid.p3, pyramid.p4, pyramid.p5
    for coarse, fine, names in ((p4, p3, "p3/p4"), (p5, p4, "p4/p5")):
        if (fine.shape[2] != 2 * coarse.shape[2]
                or fine.shape[3] != 2 * coarse.shape[3]):
            raise ShapeError(
                f"pyramid extents must halve between {names}: "
                f"{fine.shape[2:]} vs {coarse.shape[2:]}")
    if cfg.ppm_after_lateral:
        t5 = pyramid_pool(_lateral(p5, "lateral5", params), cfg.ppm_bins, params)
    else:
        t5 = _lateral(pyramid_pool(p5, cfg.ppm_bins, params), "lateral5", params)
    t4 = dc.add(_lateral(p4, "lateral4", params),
                dc.upsample_bilinear(t5, p4.shape[2:]))
    t3 = dc.add(_lateral(p3, "lateral3", params),
                dc.upsample_bilinear(t4, p3.shape[2:]))
    target = p3.shape[2:]
    stacked = dc.concat(
        [t3, dc.upsample_bilinear(t4, target), dc.upsample_bilinear(t5, target)],
        axis=1)
    return dc.conv2d(stacked, params["project.weight"], params["project.bias"])
