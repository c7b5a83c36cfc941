"""Model assembly: backbone -> encoder -> decoder, plus inference.

Parameters from all three stages live in one flat dict with ``backbone.``,
``encoder.``, and ``decoder.`` prefixes, so checkpointing and the
optimizer see a single namespace.

Inference pads inputs to the backbone's stride grid, runs the forward
pass, scores every prediction slot as max class probability times
objectness, drops slots below the score threshold, and upsamples the
surviving mask probabilities back to the original extent before
binarizing at 0.5.  There is no suppression step: predictions never
interact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import backbone as bb
from . import datagen
from . import decoder as dec
from . import diffcore as dc
from . import encoder as enc
from .diffcore import Tensor

__all__ = ["ModelConfig", "ModelOutputs", "ScoredMask", "sub_params",
           "init_model", "forward", "infer"]

DEFAULT_SCORE_THRESHOLD = 0.3


@dataclass(frozen=True)
class ModelConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    decoder: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)

    def with_n_instances(self, n: int) -> "ModelConfig":
        return dataclasses.replace(
            self, decoder=dataclasses.replace(self.decoder, n_instances=n))


@dataclass
class ModelOutputs:
    fused: Tensor
    iams: dec.IAMSet
    instance_features: Tensor
    class_logits: Tensor       # (B, N, num_classes)
    objectness: Tensor         # (B, N, 1), sigmoid applied
    kernels: Tensor            # (B, N, kernel_dim)
    mask_logits: Tensor        # (B, N, H/4, W/4)


@dataclass
class ScoredMask:
    score: float
    class_id: int
    mask: np.ndarray           # bool, original extent


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    head = prefix + "."
    return {name[len(head):]: t for name, t in params.items() if name.startswith(head)}


def init_model(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seeded parameters for all stages under one namespace."""
    seeds = np.random.SeedSequence(seed).generate_state(3)
    params: dict[str, Tensor] = {}
    for name, t in bb.init_params(cfg.backbone, int(seeds[0])).items():
        params[f"backbone.{name}"] = t
    pyramid_channels = cfg.backbone.stage_channels
    for name, t in enc.init_params(cfg.encoder, pyramid_channels, int(seeds[1])).items():
        params[f"encoder.{name}"] = t
    for name, t in dec.init_params(cfg.decoder, cfg.encoder.fused_channels,
                                   int(seeds[2])).items():
        params[f"decoder.{name}"] = t
    return params


def forward(image: Tensor, cfg: ModelConfig, params: Mapping[str, Tensor]) -> ModelOutputs:
    """Full differentiable pass on a padded (N,3,H,W) image batch."""
    pyramid = bb.extract_features(image, cfg.backbone, sub_params(params, "backbone"))
    fused = enc.fuse(pyramid, cfg.encoder, sub_params(params, "encoder"))
    out = dec.decode(fused, cfg.decoder, sub_params(params, "decoder"))
    return ModelOutputs(
        fused=fused,
        iams=out.iams,
        instance_features=out.instance_features,
        class_logits=out.class_logits,
        objectness=out.objectness,
        kernels=out.kernels,
        mask_logits=out.mask_logits,
    )


def _slot_scores(class_logits: np.ndarray, objectness: np.ndarray):
    """(N, num_classes) logits + (N, 1) objectness -> scores and class ids."""
    probs = dc._sigmoid_stable(class_logits)
    class_ids = probs.argmax(axis=1)
    best = probs[np.arange(len(probs)), class_ids]
    return best * objectness[:, 0], class_ids


def infer(images: np.ndarray, cfg: ModelConfig, params: Mapping[str, Tensor],
          score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> list[list[ScoredMask]]:
    """Score-thresholded instance masks for a batch of images.

    ``images`` is (N,3,H,W) or a single (3,H,W); all slots with
    score >= threshold are returned, in slot order, empty masks included.
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    padded, original = datagen.pad_to_grid(arr, 16)
    outputs = forward(Tensor(padded), cfg, params)
    cls = outputs.class_logits.data
    obj = outputs.objectness.data
    logits = outputs.mask_logits.data
    pad_hw = padded.shape[2:]
    results: list[list[ScoredMask]] = []
    for b in range(arr.shape[0]):
        scores, class_ids = _slot_scores(cls[b], obj[b])
        keep = np.flatnonzero(scores >= score_threshold)
        kept_masks = np.zeros((len(keep),) + original, dtype=bool)
        if len(keep):
            probs = dc._sigmoid_stable(logits[b, keep])
            up = dc.upsample_bilinear(Tensor(probs[:, None]), pad_hw).data[:, 0]
            kept_masks = datagen.unpad(up, original) >= 0.5
        results.append([
            ScoredMask(score=float(scores[slot]), class_id=int(class_ids[slot]),
                       mask=kept_masks[i])
            for i, slot in enumerate(keep)
        ])
    return results
