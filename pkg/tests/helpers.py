import numpy as np
from diffusion.injection import InjectionPlan
from diffusion.unet import UNetConfig


def tiny_config(**overrides) -> UNetConfig:
    """Four decoder layers over two levels; fast enough for per-test pipelines."""
    values = dict(
        latent_channels=4,
        base_channels=8,
        depth=2,
        decoder_layer_count=4,
        frames_nominal=4,
        head_dim=4,
        heads=1,
        embed_dim=8,
        groups=4,
        seed=7,
    )
    values.update(overrides)
    return UNetConfig(**values)


def tiny_plan(T: int, **taus) -> InjectionPlan:
    values = dict(l1={1}, l2={1, 2, 3}, l3={1, 2, 3}, tau_conv=0.2, tau_sa=0.2, tau_ta=0.5)
    values.update(taus)
    return InjectionPlan(T=T, **values)


def smooth_frames(count: int, size: int = 16, seed: int = 0) -> np.ndarray:
    """[count, 3, size, size] slowly brightening gradient frames in [0, 1]."""
    rng = np.random.default_rng(seed)
    base = 0.25 + 0.5 * rng.random((3, 1, 1))
    ramp = np.linspace(0.0, 0.2, size)[None, None, :] + np.linspace(0.0, 0.1, size)[None, :, None]
    return np.stack([np.clip(base + ramp + 0.002 * i, 0.0, 1.0) for i in range(count)])
