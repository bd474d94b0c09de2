"""Run configuration: a flat ``key = value`` file with ``#`` comments.

Every key has a default in ``config.py``; ``preset`` selects model dimensions
from ``config.json`` and explicit keys override the preset. The effective
configuration is echoed to ``resolved.cfg`` in every output directory, one key
per line in field order.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values

import config
from diffusion.injection import InjectionPlan, remap_layers
from diffusion.scheduler import NoiseSchedule, build_schedule
from diffusion.unet import UNet, UNetConfig, load_weights
from utils.errors import VideoEditError, ConfigurationError, PlanError
from utils.media_io import PatchCodec
from utils.utils import format_int_list, parse_bool, parse_int_list, quote_value

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    preset: str = "default"
    seed: int = config.MODEL_SEED
    base_channels: int = config.BASE_CHANNELS
    depth: int = config.DEPTH
    decoder_layer_count: int = config.DECODER_LAYER_COUNT
    frames_nominal: int = config.FRAMES_NOMINAL
    head_dim: int = config.HEAD_DIM
    heads: int = config.HEADS
    embed_dim: int = config.EMBED_DIM
    groups: int = config.NORM_GROUPS
    t_train: int = config.T_TRAIN
    beta_start: float = config.BETA_START
    beta_end: float = config.BETA_END
    steps: int = config.SAMPLING_STEPS
    l1: Tuple[int, ...] = config.L1_LAYERS
    l2: Tuple[int, ...] = config.L2_LAYERS
    l3: Tuple[int, ...] = config.L3_LAYERS
    tau_conv: float = config.TAU_CONV
    tau_sa: float = config.TAU_SA
    tau_ta: float = config.TAU_TA
    guidance_scale: float = config.GUIDANCE_SCALE
    t_prime_fraction: float = config.T_PRIME_FRACTION
    prompt: str = ""
    negative_prompt: str = config.NEGATIVE_PROMPT
    inverted_init: bool = config.INVERTED_INIT
    noise_seed: int = config.NOISE_SEED
    patch: int = config.PATCH_SIZE
    codec_seed: int = config.CODEC_SEED
    frame_rate: float = config.FRAME_RATE
    weights: str = ""
    dump_cache: bool = False
    feature_steps: Tuple[int, ...] = (0,)
    export_pgm: bool = False

    def unet_config(self, latent_channels: int) -> UNetConfig:
        return UNetConfig(
            latent_channels=latent_channels,
            base_channels=self.base_channels,
            depth=self.depth,
            decoder_layer_count=self.decoder_layer_count,
            frames_nominal=self.frames_nominal,
            head_dim=self.head_dim,
            heads=self.heads,
            embed_dim=self.embed_dim,
            groups=self.groups,
            seed=self.seed,
        )

    def model(self, latent_channels: int) -> UNet:
        unet_config = self.unet_config(latent_channels)
        if self.weights:
            logger.info(f"Loading weights from {self.weights}")
            return UNet(unet_config, load_weights(unet_config, self.weights))
        return UNet(unet_config)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.t_train, self.beta_start, self.beta_end, self.steps)

    def plan(self, **taus: float) -> InjectionPlan:
        values = dict(tau_conv=self.tau_conv, tau_sa=self.tau_sa, tau_ta=self.tau_ta)
        values.update(taus)
        try:
            plan = InjectionPlan(l1=self.l1, l2=self.l2, l3=self.l3, T=self.steps, **values)
            return plan.validate_for(self.decoder_layer_count)
        except PlanError as e:
            raise ConfigurationError(str(e), key=e.key)

    def codec(self) -> PatchCodec:
        return PatchCodec(patch=self.patch, seed=self.codec_seed)

    def render(self) -> str:
        """The resolved.cfg text: one ``key = value`` line per field, in field order."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = format_int_list(value)
            elif isinstance(value, str):
                text = quote_value(value)
            else:
                text = repr(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory: str) -> str:
        path = os.path.join(directory, config.RESOLVED_CONFIG_FILE)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.render())
        return path


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: Optional[str]):
    kind = _FIELD_TYPES[key]
    text = "" if raw is None else raw.strip()
    try:
        if kind == "bool":
            return parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("Tuple"):
            return parse_int_list(text)
        return raw if raw is not None else ""
    except ValueError as e:
        raise ConfigurationError(f"cannot parse {key} = {raw!r}: {e}", key=key)


def load_presets() -> Dict[str, Dict]:
    try:
        with open(config.PRESETS_FILE, "r", encoding="utf-8") as f:
            return json.load(f)["presets"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ConfigurationError(f"cannot read presets from {config.PRESETS_FILE}: {e}", key="preset")


def _apply_preset(name: str) -> RunConfig:
    presets = load_presets()
    if name not in presets:
        raise ConfigurationError(f"unknown preset {name!r}; choose one of {sorted(presets)}", key="preset")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in presets[name].items()}
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigurationError(f"preset {name} has unknown keys {sorted(unknown)}", key="preset")
    count = values.get("decoder_layer_count", config.DECODER_LAYER_COUNT)
    for key, default in (("l1", config.L1_LAYERS), ("l2", config.L2_LAYERS), ("l3", config.L3_LAYERS)):
        if key not in values:
            values[key] = tuple(sorted(remap_layers(default, config.DECODER_LAYER_COUNT, count)))
    return replace(RunConfig(preset=name), **values)


def parse_run_config(entries: Mapping[str, Optional[str]], overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Build a RunConfig from raw key/value strings plus typed overrides."""
    unknown = [k for k in list(entries) + list(overrides or {}) if k not in _FIELD_TYPES]
    if unknown:
        raise ConfigurationError(f"unknown configuration key {unknown[0]!r}", key=unknown[0])
    preset = (entries.get("preset") or "default").strip()
    if overrides and "preset" in overrides:
        preset = str(overrides["preset"])
    values = {k: _convert(k, v) for k, v in entries.items() if k != "preset"}
    values.update({k: v for k, v in (overrides or {}).items() if k != "preset" and v is not None})
    run_config = replace(_apply_preset(preset), **values)
    _validate(run_config)
    return run_config


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    entries: Dict[str, Optional[str]] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigurationError(f"config file {path} not found", key="--config")
        entries = dict(dotenv_values(path, interpolate=False))
        logger.debug(f"Read {len(entries)} keys from {path}")
    return parse_run_config(entries, overrides)


def _validate(run_config: RunConfig) -> None:
    """Surface every construction error as a configuration error before any work starts."""
    try:
        run_config.unet_config(run_config.codec().latent_channels)
        run_config.schedule()
        run_config.plan()
    except ConfigurationError:
        raise
    except VideoEditError as e:
        raise ConfigurationError(str(e), key=e.key)
    if run_config.guidance_scale < 1.0:
        raise ConfigurationError("guidance_scale must be >= 1", key="guidance_scale")
    if not 0.0 < run_config.t_prime_fraction <= 1.0:
        raise ConfigurationError("t_prime_fraction must be in (0, 1]", key="t_prime_fraction")
    if any(not 0 <= s < run_config.steps for s in run_config.feature_steps):
        raise ConfigurationError("feature_steps must lie in [0, steps)", key="feature_steps")
