"""Noise schedule and deterministic (eta = 0) DDIM steps in both directions."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from config import FLOAT_DTYPE
from diffusion.tensor_core import Tensor
from utils.errors import ConfigurationError, KernelError, StepOrderError

logger = logging.getLogger(__name__)

# Timestep index of the clean endpoint, where alpha_bar is 1
CLEAN_STEP = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas, their cumulative alpha products, and the sampling ladder.

    Attributes:
        t_train: training horizon
        beta: per-step variances, length t_train
        alpha_bar: cumulative products of (1 - beta), length t_train
        sample_steps: strictly increasing timesteps used for sampling, length T
    """
    t_train: int
    beta: Tensor
    alpha_bar: Tensor
    sample_steps: Tuple[int, ...]

    @property
    def num_steps(self) -> int:
        return len(self.sample_steps)

    def alpha_at(self, t: int) -> float:
        """alpha_bar at timestep ``t``; ``CLEAN_STEP`` maps to 1."""
        if t == CLEAN_STEP:
            return 1.0
        if not 0 <= t < self.t_train:
            raise StepOrderError(f"timestep {t} outside [0, {self.t_train})")
        return float(self.alpha_bar[t])

    def denoise_pairs(self) -> List[Tuple[int, int]]:
        """(t, t_prev) for step_index 0..T-1, noisiest first, ending at the clean endpoint."""
        steps = self.sample_steps
        pairs = []
        for i in range(len(steps) - 1, -1, -1):
            pairs.append((steps[i], steps[i - 1] if i > 0 else CLEAN_STEP))
        return pairs

    def invert_pairs(self) -> List[Tuple[int, int]]:
        """(t, t_next) from the clean endpoint up to the noisiest sampling step."""
        return [(t_prev, t) for t, t_prev in reversed(self.denoise_pairs())]


def build_schedule(t_train: int, beta_start: float, beta_end: float, T: int) -> NoiseSchedule:
    """Linear beta ramp over ``t_train`` steps with a floor-stride ladder of ``T`` steps."""
    if not (isinstance(t_train, int) and isinstance(T, int)):
        raise ConfigurationError("t_train and T must be integers", key="steps")
    if not t_train >= T >= 1:
        raise ConfigurationError(f"need t_train >= T >= 1, got t_train={t_train}, T={T}", key="steps")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}", key="beta_start"
        )
    beta = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    sample_steps = tuple(int(i * t_train // T) for i in range(T))
    logger.debug(f"Built schedule: t_train={t_train}, T={T}, alpha_bar[-1]={alpha_bar[-1]:.6g}")
    return NoiseSchedule(
        t_train=t_train,
        beta=beta.astype(FLOAT_DTYPE),
        alpha_bar=alpha_bar.astype(FLOAT_DTYPE),
        sample_steps=sample_steps,
    )


def _check_pair(z_t: Tensor, eps: Tensor) -> None:
    if z_t.shape != eps.shape:
        raise KernelError(f"eps shape {eps.shape} != latent shape {z_t.shape}", key="eps")


def ddim_denoise_step(z_t: Tensor, eps: Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Tensor:
    """z_{t_prev} = sqrt(a_prev) * x0_hat + sqrt(1 - a_prev) * eps."""
    if not t > t_prev >= CLEAN_STEP:
        raise StepOrderError(f"denoise step needs t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    _check_pair(z_t, eps)
    a_t = sched.alpha_at(t)
    a_prev = sched.alpha_at(t_prev)
    if a_prev == a_t:
        return z_t.copy()
    x0_hat = (z_t - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps


def ddim_invert_step(z_t: Tensor, eps: Tensor, t: int, t_next: int, sched: NoiseSchedule) -> Tensor:
    """Reverse DDIM step in the scaled variable z / sqrt(a):

        z_next / sqrt(a_next) = z_t / sqrt(a_t) + (sqrt(1/a_next - 1) - sqrt(1/a_t - 1)) * eps

    which is the exact algebraic inverse of ``ddim_denoise_step`` for a shared eps.
    """
    if not t_next > t:
        raise StepOrderError(f"inversion step needs t_next > t, got t={t}, t_next={t_next}")
    _check_pair(z_t, eps)
    a_t = sched.alpha_at(t)
    a_next = sched.alpha_at(t_next)
    return (
        math.sqrt(a_next / a_t) * z_t
        + math.sqrt(a_next) * (math.sqrt(1.0 / a_next - 1.0) - math.sqrt(1.0 / a_t - 1.0)) * eps
    )
