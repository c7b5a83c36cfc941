"""Scaled-down residual feature extractor.

A stem conv at stride 2 followed by three residual stages, each opening
with a stride-2 block, yields feature maps at 1/4, 1/8, and 1/16 of the
(padded) input resolution.  Blocks are basic two-conv residual units with
group normalization; projection shortcuts appear only where stride or
channel count changes.

Parameters live in a flat name -> Tensor mapping so the checkpoint codec
and optimizer can treat every model component uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, ShapeError, Tensor

__all__ = ["BackboneConfig", "FeaturePyramid", "init_params", "extract_features",
           "residual_block"]


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    norm_groups: int = 8

    def __post_init__(self):
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ConfigError("backbone needs exactly three stages")
        if not all(b >= 1 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if not (self.stage_channels[0] < self.stage_channels[1] < self.stage_channels[2]):
            raise ConfigError(
                f"stage_channels must be strictly increasing, got {self.stage_channels}")
        for c in (self.stem_channels, *self.stage_channels):
            if c % self.norm_groups != 0:
                raise ConfigError(
                    f"channel count {c} not divisible by {self.norm_groups} norm groups")


@dataclass
class FeaturePyramid:
    """Three feature maps at 1/4, 1/8, and 1/16 of the padded input."""
    p3: Tensor
    p4: Tensor
    p5: Tensor

    @property
    def channels(self) -> tuple[int, int, int]:
        return (self.p3.shape[1], self.p4.shape[1], self.p5.shape[1])


def _conv_params(rng, out_ch: int, in_ch: int, k: int) -> tuple[Tensor, Tensor]:
    weight = Tensor(dc.uniform_fan_in(rng, (out_ch, in_ch, k, k)), requires_grad=True)
    bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
    return weight, bias


def _norm_params(out_ch: int) -> tuple[Tensor, Tensor]:
    gain = Tensor(np.ones(out_ch, dtype=np.float32), requires_grad=True)
    shift = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
    return gain, shift


def _add_conv(params: dict, rng, prefix: str, out_ch: int, in_ch: int, k: int) -> None:
    params[f"{prefix}.weight"], params[f"{prefix}.bias"] = _conv_params(rng, out_ch, in_ch, k)


def _add_norm(params: dict, prefix: str, out_ch: int) -> None:
    params[f"{prefix}.gain"], params[f"{prefix}.shift"] = _norm_params(out_ch)


def init_params(cfg: BackboneConfig, seed: int) -> dict[str, Tensor]:
    """Seeded fan-in uniform weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    _add_conv(params, rng, "stem.conv", cfg.stem_channels, 3, 3)
    _add_norm(params, "stem.norm", cfg.stem_channels)
    in_ch = cfg.stem_channels
    for s, (out_ch, blocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage), 1):
        for b in range(blocks):
            prefix = f"stage{s}.block{b}"
            block_in = in_ch if b == 0 else out_ch
            stride = 2 if b == 0 else 1
            _add_conv(params, rng, f"{prefix}.conv1", out_ch, block_in, 3)
            _add_norm(params, f"{prefix}.norm1", out_ch)
            _add_conv(params, rng, f"{prefix}.conv2", out_ch, out_ch, 3)
            _add_norm(params, f"{prefix}.norm2", out_ch)
            if stride != 1 or block_in != out_ch:
                _add_conv(params, rng, f"{prefix}.shortcut", out_ch, block_in, 1)
                _add_norm(params, f"{prefix}.shortcut_norm", out_ch)
        in_ch = out_ch
    return params


def residual_block(x: Tensor, params: Mapping[str, Tensor], prefix: str,
                   stride: int, groups: int) -> Tensor:
    """conv-norm-relu-conv-norm plus shortcut, then relu."""
    h = dc.conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"],
                  stride=stride, pad=1)
    h = dc.group_normalize(h, groups, params[f"{prefix}.norm1.gain"],
                           params[f"{prefix}.norm1.shift"])
    h = dc.relu(h)
    h = dc.conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"],
                  stride=1, pad=1)
    h = dc.group_normalize(h, groups, params[f"{prefix}.norm2.gain"],
                           params[f"{prefix}.norm2.shift"])
    if f"{prefix}.shortcut.weight" in params:
        sc = dc.conv2d(x, params[f"{prefix}.shortcut.weight"],
                       params[f"{prefix}.shortcut.bias"], stride=stride, pad=0)
        sc = dc.group_normalize(sc, groups, params[f"{prefix}.shortcut_norm.gain"],
                                params[f"{prefix}.shortcut_norm.shift"])
    else:
        sc = x
    return dc.relu(dc.add(h, sc))


def extract_features(image: Tensor, cfg: BackboneConfig,
                     params: Mapping[str, Tensor]) -> FeaturePyramid:
    """Run the stem and three stages; collect the per-stage outputs."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected N,3,H,W image, got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h % 16 != 0 or w % 16 != 0:
        raise ShapeError(
            f"input extents must be multiples of 16, got {h}x{w}; pad first")
    x = dc.conv2d(image, params["stem.conv.weight"], params["stem.conv.bias"],
                  stride=2, pad=1)
    x = dc.group_normalize(x, cfg.norm_groups, params["stem.norm.gain"],
                           params["stem.norm.shift"])
    x = dc.relu(x)
    outputs = []
    for s, blocks in enumerate(cfg.blocks_per_stage, 1):
        for b in range(blocks):
            x = residual_block(x, params, f"stage{s}.block{b}",
                               stride=2 if b == 0 else 1, groups=cfg.norm_groups)
        outputs.append(x)
    return FeaturePyramid(p3=outputs[0], p4=outputs[1], p5=outputs[2])
