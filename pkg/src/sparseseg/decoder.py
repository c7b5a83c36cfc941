"""IAM decoder.

One 3x3 convolution over the fused map produces ``n_instances`` activation
channels; sigmoid plus per-map spatial normalization turns each channel
into an instance activation map (IAM).  IAM-weighted pooling of the fused
features yields one embedding per prediction slot, and three affine heads
read class logits, an objectness score, and a mask kernel out of each
embedding.  Kernels composed with a small mask-feature branch give mask
logits at 1/4 resolution.

The slot count is fixed: every forward pass emits exactly ``n_instances``
predictions, and no prediction ever influences another (no suppression,
no pairwise terms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, ShapeError, Tensor

__all__ = ["DecoderConfig", "IAMSet", "HeadOutputs", "DecoderOutputs",
           "init_params", "compute_iams", "aggregate", "predict_heads",
           "mask_features", "compose_masks", "decode"]

IAM_NORM_EPS = 1e-8


@dataclass(frozen=True)
class DecoderConfig:
    n_instances: int = 64
    kernel_dim: int = 32
    num_classes: int = 1
    mask_branch_channels: int = 64

    def __post_init__(self):
        if self.n_instances < 1:
            raise ConfigError(f"n_instances must be >= 1, got {self.n_instances}")
        if self.kernel_dim < 1:
            raise ConfigError(f"kernel_dim must be >= 1, got {self.kernel_dim}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.mask_branch_channels < 1:
            raise ConfigError("mask_branch_channels must be >= 1")


@dataclass
class IAMSet:
    """maps: (batch, n_instances, H, W), nonnegative, spatial sum 1 per map."""
    maps: Tensor


@dataclass
class HeadOutputs:
    class_logits: Tensor      # (batch, n_instances, num_classes)
    objectness: Tensor        # (batch, n_instances, 1), already sigmoid
    kernels: Tensor           # (batch, n_instances, kernel_dim)


@dataclass
class DecoderOutputs:
    iams: IAMSet
    instance_features: Tensor  # (batch, n_instances, fused_channels)
    class_logits: Tensor
    objectness: Tensor
    kernels: Tensor
    mask_logits: Tensor        # (batch, n_instances, H, W) at 1/4 resolution


def _affine(rng, in_ch: int, out_ch: int) -> tuple[Tensor, Tensor]:
    # stored (in, out) so heads apply as features @ weight + bias
    bound = math.sqrt(3.0 / in_ch)
    weight = Tensor(rng.uniform(-bound, bound, (in_ch, out_ch)).astype(np.float32),
                    requires_grad=True)
    bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
    return weight, bias


def init_params(cfg: DecoderConfig, fused_channels: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    params["iam.conv.weight"] = Tensor(
        dc.uniform_fan_in(rng, (cfg.n_instances, fused_channels, 3, 3)), requires_grad=True)
    params["iam.conv.bias"] = Tensor(np.zeros(cfg.n_instances, dtype=np.float32),
                                     requires_grad=True)
    for name, out_ch in (("class", cfg.num_classes), ("objectness", 1),
                         ("kernel", cfg.kernel_dim)):
        w, b = _affine(rng, fused_channels, out_ch)
        params[f"head.{name}.weight"] = w
        params[f"head.{name}.bias"] = b
    params["mask.conv1.weight"] = Tensor(
        dc.uniform_fan_in(rng, (cfg.mask_branch_channels, fused_channels, 3, 3)),
        requires_grad=True)
    params["mask.conv1.bias"] = Tensor(
        np.zeros(cfg.mask_branch_channels, dtype=np.float32), requires_grad=True)
    params["mask.conv2.weight"] = Tensor(
        dc.uniform_fan_in(rng, (cfg.kernel_dim, cfg.mask_branch_channels, 3, 3)),
        requires_grad=True)
    params["mask.conv2.bias"] = Tensor(np.zeros(cfg.kernel_dim, dtype=np.float32),
                                       requires_grad=True)
    return params


def compute_iams(fused: Tensor, params: Mapping[str, Tensor]) -> IAMSet:
    """3x3 conv, sigmoid, then divide each map by its spatial sum."""
    z = dc.conv2d(fused, params["iam.conv.weight"], params["iam.conv.bias"],
                  stride=1, pad=1)
    s = dc.sigmoid(z)
    b, i, h, w = s.shape
    flat = dc.reshape(s, (b, i, h * w))
    denom = dc.add(dc.sum(flat, axis=2, keepdims=True), IAM_NORM_EPS)
    return IAMSet(maps=dc.reshape(dc.div(flat, denom), (b, i, h, w)))


def aggregate(iams: IAMSet, fused: Tensor) -> Tensor:
    """IAM-weighted spatial sum of fused features, one row per slot."""
    maps = iams.maps
    if maps.shape[2:] != fused.shape[2:] or maps.shape[0] != fused.shape[0]:
        raise ShapeError(
            f"IAM extent {maps.shape} does not match fused map {fused.shape}")
    b, i, h, w = maps.shape
    c = fused.shape[1]
    flat_maps = dc.reshape(maps, (b, i, h * w))
    columns = dc.swapaxes(dc.reshape(fused, (b, c, h * w)), 1, 2)
    return dc.matmul(flat_maps, columns)


def predict_heads(instance_features: Tensor, params: Mapping[str, Tensor]) -> HeadOutputs:
    def head(name: str) -> Tensor:
        return dc.add(dc.matmul(instance_features, params[f"head.{name}.weight"]),
                      params[f"head.{name}.bias"])

    return HeadOutputs(
        class_logits=head("class"),
        objectness=dc.sigmoid(head("objectness")),
        kernels=head("kernel"),
    )


def mask_features(fused: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    h = dc.relu(dc.conv2d(fused, params["mask.conv1.weight"],
                          params["mask.conv1.bias"], stride=1, pad=1))
    return dc.conv2d(h, params["mask.conv2.weight"], params["mask.conv2.bias"],
                     stride=1, pad=1)


def compose_masks(kernels: Tensor, feats: Tensor) -> Tensor:
    """Inner product of each kernel with the mask features at every pixel.

    Accepts batched (B,I,D) x (B,D,H,W) or single-tile (I,D) x (D,H,W).
    """
    single = kernels.ndim == 2
    if single:
        if feats.ndim != 3:
            raise ShapeError(f"expected (D,H,W) features, got {feats.shape}")
        kernels = dc.reshape(kernels, (1,) + kernels.shape)
        feats = dc.reshape(feats, (1,) + feats.shape)
    if kernels.shape[2] != feats.shape[1]:
        raise ShapeError(
            f"kernel_dim mismatch: kernels {kernels.shape} vs features {feats.shape}")
    b, d, h, w = feats.shape
    logits = dc.matmul(kernels, dc.reshape(feats, (b, d, h * w)))
    logits = dc.reshape(logits, (b, kernels.shape[1], h, w))
    return dc.reshape(logits, logits.shape[1:]) if single else logits


def decode(fused: Tensor, cfg: DecoderConfig, params: Mapping[str, Tensor]) -> DecoderOutputs:
    """Full decoder pass over an encoded feature map."""
    iams = compute_iams(fused, params)
    features = aggregate(iams, fused)
    heads = predict_heads(features, params)
    feats = mask_features(fused, params)
    logits = compose_masks(heads.kernels, feats)
    return DecoderOutputs(
        iams=iams,
        instance_features=features,
        class_logits=heads.class_logits,
        objectness=heads.objectness,
        kernels=heads.kernels,
        mask_logits=logits,
    )
