"""Per-layer feature maps of the source branch.

Conv features are averaged over channels. Attention maps average the
softmax(QK^T / sqrt(d)) scores over heads and over query tokens, which gives
the mean attention every token receives.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from typing import Dict, Iterable, Tuple

import numpy as np
from einops import rearrange

from diffusion.injection import InjectionPlan
from diffusion.pipeline import InversionResult, source_conditioning
from diffusion.scheduler import NoiseSchedule
from diffusion.tensor_core import Tensor, multi_head_attention
from diffusion.unet import FeatureKind, UNet
from utils.errors import PlanError

logger = logging.getLogger(__name__)

MapKey = Tuple[int, int, str]
MAP_KINDS = ("conv", "spatial", "temporal")


class _CollectHooks:
    def __init__(self):
        self.values: Dict[Tuple[int, FeatureKind], Tensor] = {}

    def __call__(self, layer: int, kind: FeatureKind, value: Tensor) -> Tensor:
        self.values[(layer, kind)] = value
        return value


def _attention_map(q: Tensor, k: Tensor, heads: int) -> Tensor:
    _, scores = multi_head_attention(q, k, k, heads, return_scores=True)
    # scores: [..., heads, queries, keys]
    return scores.mean(axis=(-3, -2))


def conv_map(feature: Tensor) -> Tensor:
    """[F, C, H, W] -> [F, H, W]."""
    return feature.mean(axis=1)


def spatial_map(q: Tensor, k: Tensor, heads: int, height: int, width: int) -> Tensor:
    return rearrange(_attention_map(q, k, heads), "f (h w) -> f h w", h=height, w=width)


def temporal_map(q: Tensor, k: Tensor, heads: int, height: int, width: int) -> Tensor:
    return rearrange(_attention_map(q, k, heads), "(h w) f -> f h w", h=height, w=width)


def visualize_features(
    inv: InversionResult,
    sched: NoiseSchedule,
    model: UNet,
    plan: InjectionPlan,
    steps: Iterable[int],
) -> "OrderedDict[MapKey, Tensor]":
    """Maps keyed by (step_index, layer, kind) for conv at l1, spatial at l2 and temporal at l3."""
    plan.validate_for(model.config.decoder_layer_count)
    cond = source_conditioning(inv, model)
    pairs = sched.denoise_pairs()
    heads = model.config.heads
    maps: "OrderedDict[MapKey, Tensor]" = OrderedDict()
    for step in steps:
        if not 0 <= step < sched.num_steps:
            raise PlanError(f"step_index {step} outside [0, {sched.num_steps})", key="step_index")
        collect = _CollectHooks()
        model.forward(inv.rung_for_step(step), cond, pairs[step][0], collect)
        for layer in sorted(plan.l1):
            maps[(step, layer, "conv")] = conv_map(collect.values[(layer, FeatureKind.CONV)])
        for layer in sorted(plan.l2):
            _, _, h, w = collect.values[(layer, FeatureKind.CONV)].shape
            maps[(step, layer, "spatial")] = spatial_map(
                collect.values[(layer, FeatureKind.SPATIAL_Q)], collect.values[(layer, FeatureKind.SPATIAL_K)], heads, h, w
            )
        for layer in sorted(plan.l3):
            _, _, h, w = collect.values[(layer, FeatureKind.CONV)].shape
            maps[(step, layer, "temporal")] = temporal_map(
                collect.values[(layer, FeatureKind.TEMPORAL_Q)], collect.values[(layer, FeatureKind.TEMPORAL_K)], heads, h, w
            )
        logger.debug(f"Collected feature maps for step {step}")
    return maps


def to_grayscale(feature_map: Tensor) -> np.ndarray:
    """Min-max normalize a 2-D map to uint8; a constant map becomes all zeros."""
    lo, hi = float(feature_map.min()), float(feature_map.max())
    if hi == lo:
        return np.zeros(feature_map.shape, dtype=np.uint8)
    return np.rint((feature_map - lo) / (hi - lo) * 255.0).astype(np.uint8)
