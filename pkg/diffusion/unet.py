"""Compact image-to-video denoiser eps_theta(z_t, I_1, s, t).

Layout: conv_in over [z_t ; I_1] (first frame broadcast to every frame),
``depth`` encoder levels, a middle residual block, then ``depth`` decoder
levels of ``decoder_layer_count / depth`` layers each. Decoder layers are
numbered 0.. in execution order (coarsest resolution first). Every decoder
layer is residual block -> spatial self-attention -> temporal self-attention,
and exposes three hook sites:

    conv_f                   residual-branch output, before it is added back
    spatial_q / spatial_k    [F, H*W, heads*head_dim]
    temporal_q / temporal_k  [H*W, F, heads*head_dim]

Encoder layers expose no hooks.

Hooks that also define ``consumed(layer, kind, value)`` are told the exact
tensor each site hands on to attention or to the residual add.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Protocol, Tuple

import numpy as np
from einops import rearrange

from config import (
    BASE_CHANNELS,
    DECODER_LAYER_COUNT,
    DEPTH,
    EMBED_DIM,
    FLOAT_DTYPE,
    FRAMES_NOMINAL,
    HEAD_DIM,
    HEADS,
    MODEL_SEED,
    NORM_EPS,
    NORM_GROUPS,
    TENSOR_SUFFIX,
)
from diffusion.tensor_core import (
    AttentionParams,
    Tensor,
    as_tensor,
    conv2d_frames,
    downsample2x,
    group_normalize,
    multi_head_attention,
    silu,
    sinusoidal_embedding,
    upsample2x,
)
from utils.errors import ConditioningError, ConfigurationError
from utils.media_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)


class FeatureKind(str, Enum):
    CONV = "conv_f"
    SPATIAL_Q = "spatial_q"
    SPATIAL_K = "spatial_k"
    TEMPORAL_Q = "temporal_q"
    TEMPORAL_K = "temporal_k"


class FeatureHooks(Protocol):
    """Called at every decoder hook site; returns the value the network continues with."""
    def __call__(self, layer: int, kind: FeatureKind, value: Tensor) -> Tensor: ...


def no_hooks(layer: int, kind: FeatureKind, value: Tensor) -> Tensor:
    return value


def report_consumed(hooks: FeatureHooks, layer: int, kind: FeatureKind, value: Tensor) -> None:
    consumed = getattr(hooks, "consumed", None)
    if consumed is not None:
        consumed(layer, kind, value)


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 16
    base_channels: int = BASE_CHANNELS
    depth: int = DEPTH
    decoder_layer_count: int = DECODER_LAYER_COUNT
    frames_nominal: int = FRAMES_NOMINAL
    head_dim: int = HEAD_DIM
    heads: int = HEADS
    embed_dim: int = EMBED_DIM
    groups: int = NORM_GROUPS
    seed: int = MODEL_SEED

    def __post_init__(self):
        if self.decoder_layer_count < 2:
            raise ConfigurationError("decoder_layer_count must be >= 2", key="decoder_layer_count")
        if self.frames_nominal < 2:
            raise ConfigurationError("frames_nominal must be >= 2", key="frames_nominal")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1", key="depth")
        if self.decoder_layer_count % self.depth:
            raise ConfigurationError(
                f"decoder_layer_count {self.decoder_layer_count} is not a multiple of depth {self.depth}",
                key="decoder_layer_count",
            )
        if self.base_channels % self.groups:
            raise ConfigurationError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}", key="groups"
            )
        for name in ("latent_channels", "base_channels", "head_dim", "heads", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive", key=name)
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer", key="seed")

    @property
    def layers_per_level(self) -> int:
        return self.decoder_layer_count // self.depth

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class ConditioningBundle:
    """First-frame latent plus prompt embedding; the null prompt is the zero vector."""
    first_frame_latent: Tensor
    text_embed: Tensor

    @property
    def is_null(self) -> bool:
        return not np.any(self.text_embed)


def encode_prompt(prompt: Optional[str], dim: int) -> Tensor:
    """Deterministic hash-to-vector text stub. Empty or None is the null prompt."""
    if not prompt:
        return np.zeros(dim, dtype=FLOAT_DTYPE)
    seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(dim) / math.sqrt(dim)).astype(FLOAT_DTYPE)


def make_conditioning(first_frame_latent: Tensor, prompt: Optional[str], embed_dim: int) -> ConditioningBundle:
    return ConditioningBundle(
        first_frame_latent=np.asarray(first_frame_latent, dtype=FLOAT_DTYPE),
        text_embed=encode_prompt(prompt, embed_dim),
    )


# Token layouts

def spatial_tokens(hidden: Tensor) -> Tensor:
    """[F, C, H, W] -> [F, H*W, C]; row i*W + j of frame f is position (i, j)."""
    return rearrange(hidden, "f c h w -> f (h w) c")


def from_spatial_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    return rearrange(tokens, "f (h w) c -> f c h w", h=height, w=width)


def temporal_tokens(hidden: Tensor) -> Tensor:
    """[F, C, H, W] -> [H*W, F, C]; one frame-sequence per spatial position."""
    return rearrange(hidden, "f c h w -> (h w) f c")


def from_temporal_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    return rearrange(tokens, "(h w) f c -> f c h w", h=height, w=width)


class Weights:
    """Named, immutable parameter arrays in creation order."""

    def __init__(self, arrays: "OrderedDict[str, Tensor]"):
        self._arrays = arrays
        for arr in self._arrays.values():
            arr.setflags(write=False)

    def __getitem__(self, name: str) -> Tensor:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def checksum(self, name: Optional[str] = None) -> str:
        """SHA-256 over the little-endian float64 bytes of one or all weights."""
        digest = hashlib.sha256()
        names = [name] if name else list(self._arrays)
        for n in names:
            digest.update(n.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._arrays[n], dtype="<f8").tobytes())
        return digest.hexdigest()


def _weight_shapes(config: UNetConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, init) in generation order; init is 'normal', 'ones' or 'zeros'."""
    b, c, e, inner = config.base_channels, config.latent_channels, config.embed_dim, config.inner_dim
    shapes = [
        ("time.w1", (e, e), "normal"),
        ("time.w2", (e, e), "normal"),
        ("conv_in.kernel", (b, 2 * c, 3, 3), "normal"),
        ("conv_in.bias", (b,), "zeros"),
    ]

    def resblock(prefix):
        return [
            (f"{prefix}.norm1.gain", (b,), "ones"),
            (f"{prefix}.norm1.bias", (b,), "zeros"),
            (f"{prefix}.conv1.kernel", (b, b, 3, 3), "normal"),
            (f"{prefix}.temb.w", (e, b), "normal"),
            (f"{prefix}.norm2.gain", (b,), "ones"),
            (f"{prefix}.norm2.bias", (b,), "zeros"),
            (f"{prefix}.conv2.kernel", (b, b, 3, 3), "normal"),
        ]

    def attention(prefix):
        return [
            (f"{prefix}.norm.gain", (b,), "ones"),
            (f"{prefix}.norm.bias", (b,), "zeros"),
            (f"{prefix}.w_q", (b, inner), "normal"),
            (f"{prefix}.w_k", (b, inner), "normal"),
            (f"{prefix}.w_v", (b, inner), "normal"),
            (f"{prefix}.w_o", (inner, b), "normal"),
        ]

    for level in range(config.depth):
        shapes += resblock(f"enc{level}")
    shapes += resblock("mid")
    for layer in range(config.decoder_layer_count):
        shapes += resblock(f"dec{layer}.res")
        shapes += attention(f"dec{layer}.sa")
        shapes += attention(f"dec{layer}.ta")
    shapes += [
        ("out.norm.gain", (b,), "ones"),
        ("out.norm.bias", (b,), "zeros"),
        ("out.conv.kernel", (c, b, 3, 3), "normal"),
    ]
    return shapes


def _fan_in(shape: Tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    # 2-D weights are applied as x @ W
    return shape[0]


def init_weights(config: UNetConfig) -> Weights:
    """Seeded Gaussian weights scaled by 1/sqrt(fan_in); norms start at identity."""
    rng = np.random.default_rng(config.seed)
    arrays: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape, init in _weight_shapes(config):
        if init == "ones":
            arrays[name] = np.ones(shape, dtype=FLOAT_DTYPE)
        elif init == "zeros":
            arrays[name] = np.zeros(shape, dtype=FLOAT_DTYPE)
        else:
            arrays[name] = (rng.standard_normal(shape) / math.sqrt(_fan_in(shape))).astype(FLOAT_DTYPE)
    logger.debug(f"Initialized {len(arrays)} weight arrays from seed {config.seed}")
    return Weights(arrays)


def save_weights(weights: Weights, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, arr in weights.items():
        write_tensor(os.path.join(directory, name + TENSOR_SUFFIX), arr)


def load_weights(config: UNetConfig, directory: str) -> Weights:
    arrays: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape, _ in _weight_shapes(config):
        arr = read_tensor(os.path.join(directory, name + TENSOR_SUFFIX))
        if arr.shape != shape:
            raise ConfigurationError(f"weight {name} has shape {arr.shape}, expected {shape}", key=name)
        arrays[name] = arr.astype(FLOAT_DTYPE)
    return Weights(arrays)


class UNet:
    """The denoising network. Weights are immutable; ``forward`` is reentrant."""

    def __init__(self, config: UNetConfig, weights: Optional[Weights] = None):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config)

    def _attention_params(self, prefix: str) -> AttentionParams:
        w = self.weights
        return AttentionParams(
            w_q=w[f"{prefix}.w_q"], w_k=w[f"{prefix}.w_k"], w_v=w[f"{prefix}.w_v"],
            head_dim=self.config.head_dim, heads=self.config.heads,
        )

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return group_normalize(
            x, self.config.groups, self.weights[f"{prefix}.gain"], self.weights[f"{prefix}.bias"], NORM_EPS
        )

    def _residual_branch(self, h: Tensor, emb: Tensor, prefix: str) -> Tensor:
        w = self.weights
        a = conv2d_frames(silu(self._norm(h, f"{prefix}.norm1")), w[f"{prefix}.conv1.kernel"])
        a = a + (emb @ w[f"{prefix}.temb.w"])[:, None, None]
        return conv2d_frames(silu(self._norm(a, f"{prefix}.norm2")), w[f"{prefix}.conv2.kernel"])

    def _attend(
        self, tokens: Tensor, layer: int, prefix: str, q_kind: FeatureKind, k_kind: FeatureKind, hooks: FeatureHooks
    ) -> Tensor:
        """Self-attention across the second-to-last axis of ``tokens``, with Q and K hooked."""
        params = self._attention_params(prefix)
        q, k, v = params.project(tokens)
        q = hooks(layer, q_kind, q)
        k = hooks(layer, k_kind, k)
        report_consumed(hooks, layer, q_kind, q)
        report_consumed(hooks, layer, k_kind, k)
        return multi_head_attention(q, k, v, params.heads) @ self.weights[f"{prefix}.w_o"]

    def _spatial_attention(self, h: Tensor, layer: int, hooks: FeatureHooks) -> Tensor:
        prefix = f"dec{layer}.sa"
        _, _, height, width = h.shape
        tokens = spatial_tokens(self._norm(h, f"{prefix}.norm"))
        out = self._attend(tokens, layer, prefix, FeatureKind.SPATIAL_Q, FeatureKind.SPATIAL_K, hooks)
        return from_spatial_tokens(out, height, width)

    def _temporal_attention(self, h: Tensor, layer: int, hooks: FeatureHooks) -> Tensor:
        prefix = f"dec{layer}.ta"
        frames, channels, height, width = h.shape
        positions = np.stack([sinusoidal_embedding(f, channels) for f in range(frames)])
        tokens = temporal_tokens(self._norm(h, f"{prefix}.norm")) + positions[None]
        out = self._attend(tokens, layer, prefix, FeatureKind.TEMPORAL_Q, FeatureKind.TEMPORAL_K, hooks)
        return from_temporal_tokens(out, height, width)

    def _decoder_layer(self, h: Tensor, emb: Tensor, layer: int, hooks: FeatureHooks) -> Tensor:
        f = hooks(layer, FeatureKind.CONV, self._residual_branch(h, emb, f"dec{layer}.res"))
        report_consumed(hooks, layer, FeatureKind.CONV, f)
        h = h + f
        h = h + self._spatial_attention(h, layer, hooks)
        return h + self._temporal_attention(h, layer, hooks)

    def _embedding(self, t: int, cond: ConditioningBundle) -> Tensor:
        w = self.weights
        temb = sinusoidal_embedding(float(t), self.config.embed_dim)
        return silu(temb @ w["time.w1"]) @ w["time.w2"] + cond.text_embed

    def _check_inputs(self, z_t: Tensor, cond: ConditioningBundle) -> None:
        cfg = self.config
        if z_t.ndim != 4:
            raise ConditioningError(f"latent must be [F, C, H, W], got shape {z_t.shape}")
        frames, channels, height, width = z_t.shape
        if frames < 2:
            raise ConditioningError(f"need at least 2 frames, got {frames}")
        if channels != cfg.latent_channels:
            raise ConditioningError(f"latent has {channels} channels, model expects {cfg.latent_channels}")
        if cond.first_frame_latent.shape != (channels, height, width):
            raise ConditioningError(
                f"first frame latent {cond.first_frame_latent.shape} does not match latent frame {(channels, height, width)}"
            )
        if cond.text_embed.shape != (cfg.embed_dim,):
            raise ConditioningError(f"text embedding must have {cfg.embed_dim} entries")
        factor = 2 ** (cfg.depth - 1)
        if height % factor or width % factor:
            raise ConditioningError(f"latent {height}x{width} not divisible by {factor} for depth {cfg.depth}")

    def forward(self, z_t: Tensor, cond: ConditioningBundle, t: int, hooks: Optional[FeatureHooks] = None) -> Tensor:
        """Predict eps for ``z_t`` of shape [F, C, H, W] at timestep ``t``."""
        z_t = as_tensor(z_t, "z_t")
        self._check_inputs(z_t, cond)
        hooks = hooks or no_hooks
        cfg = self.config
        w = self.weights
        frames = z_t.shape[0]

        emb = self._embedding(t, cond)
        first = np.broadcast_to(cond.first_frame_latent, z_t.shape)
        h = conv2d_frames(np.concatenate([z_t, first], axis=1), w["conv_in.kernel"], w["conv_in.bias"])

        skips = []
        for level in range(cfg.depth):
            h = h + self._residual_branch(h, emb, f"enc{level}")
            skips.append(h)
            if level < cfg.depth - 1:
                h = downsample2x(h)
        h = h + self._residual_branch(h, emb, "mid")

        layer = 0
        for level in reversed(range(cfg.depth)):
            h = h + skips[level]
            for _ in range(cfg.layers_per_level):
                h = self._decoder_layer(h, emb, layer, hooks)
                layer += 1
            if level > 0:
                h = upsample2x(h)

        eps = conv2d_frames(silu(self._norm(h, "out.norm")), w["out.conv.kernel"])
        if frames > cfg.frames_nominal:
            logger.debug(f"forward on {frames} frames (nominal {cfg.frames_nominal})")
        return eps
