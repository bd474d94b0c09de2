"""Video inversion, source reconstruction with feature recording, and the
guided edit branch with feature injection.

Sampling step ``i`` (0 = noisiest) runs the model at ``sample_steps[T-1-i]``
and lands on ladder rung ``T-1-i``; the ladder is stored clean first, so
``ladder[0]`` is the source latent and ``ladder[T]`` the inverted noise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from cache import FeatureCache
from config import GUIDANCE_SCALE, INVERTED_INIT, NEGATIVE_PROMPT, NOISE_SEED, T_PRIME_FRACTION
from diffusion.injection import InjectHooks, InjectionPlan, InjectionMonitor, RecordHooks
from diffusion.scheduler import NoiseSchedule, ddim_denoise_step, ddim_invert_step
from diffusion.tensor_core import Tensor
from diffusion.unet import ConditioningBundle, UNet, make_conditioning
from utils.errors import (
    CachePopulatedError,
    ConditioningError,
    ConfigurationError,
    DivergenceError,
    PipelineError,
    PlanError,
)

logger = logging.getLogger(__name__)

VideoLatent = Tensor


@dataclass(frozen=True)
class EditRequest:
    source_latents: VideoLatent
    edited_first_frame_latent: Tensor
    target_prompt: str = ""
    negative_prompt: str = NEGATIVE_PROMPT
    guidance_scale: float = GUIDANCE_SCALE
    t_prime_fraction: float = T_PRIME_FRACTION
    plan: InjectionPlan = field(default_factory=InjectionPlan)
    inverted_init: bool = INVERTED_INIT
    noise_seed: int = NOISE_SEED

    def __post_init__(self):
        if self.source_latents.ndim != 4 or self.source_latents.shape[0] < 2:
            raise ConditioningError(f"source latents must be [F>=2, C, H, W], got {self.source_latents.shape}")
        if self.edited_first_frame_latent.shape != self.source_latents.shape[1:]:
            raise ConditioningError(
                f"edited first frame {self.edited_first_frame_latent.shape} does not match "
                f"source frames {self.source_latents.shape[1:]}"
            )
        if self.guidance_scale < 1.0:
            raise ConfigurationError(f"guidance_scale must be >= 1, got {self.guidance_scale}", key="guidance_scale")
        if not 0.0 < self.t_prime_fraction <= 1.0:
            raise ConfigurationError(
                f"t_prime_fraction must be in (0, 1], got {self.t_prime_fraction}", key="t_prime_fraction"
            )

    def start_index(self, T: int) -> int:
        """First sampling step index; fraction 1 starts at the ladder top."""
        return int(math.floor((1.0 - self.t_prime_fraction) * T + 1e-9))


@dataclass
class InversionResult:
    """Latent ladder from the clean source (index 0) up to the inverted noise (index T)."""
    latent_ladder: List[VideoLatent]
    first_frame_latent: Tensor

    @property
    def num_steps(self) -> int:
        return len(self.latent_ladder) - 1

    @property
    def source(self) -> VideoLatent:
        return self.latent_ladder[0]

    @property
    def noise(self) -> VideoLatent:
        return self.latent_ladder[-1]

    def rung_for_step(self, step_index: int) -> VideoLatent:
        """Latent the sampling step ``step_index`` starts from."""
        return self.latent_ladder[self.num_steps - step_index]


@dataclass
class ReconstructionResult:
    latent: VideoLatent
    source_steps: List[VideoLatent]
    cache: FeatureCache


@dataclass
class EditResult:
    latent: VideoLatent
    steps: List[VideoLatent]
    start_index: int
    monitor: Optional[InjectionMonitor] = None


def _check_finite(z: Tensor, step_index: int, phase: str) -> None:
    if not np.all(np.isfinite(z)):
        logger.error(f"{phase} diverged at step {step_index}")
        raise DivergenceError(f"{phase} produced a non-finite latent at step {step_index}", step=step_index)


def _check_ladder(inv: InversionResult, sched: NoiseSchedule) -> None:
    if inv.num_steps != sched.num_steps:
        raise PipelineError(f"ladder has {inv.num_steps} steps, schedule has {sched.num_steps}")


def _check_plan(plan: InjectionPlan, sched: NoiseSchedule, model: UNet) -> None:
    if plan.T != sched.num_steps:
        raise PlanError(f"plan is for T={plan.T}, schedule has T={sched.num_steps}", key="steps")
    plan.validate_for(model.config.decoder_layer_count)
    if not (plan.l1 or plan.l2 or plan.l3):
        logger.warning("Injection plan names no layers; nothing will be injected")


def source_conditioning(inv: InversionResult, model: UNet) -> ConditioningBundle:
    return make_conditioning(inv.first_frame_latent, None, model.config.embed_dim)


def invert_video(source_latents: VideoLatent, first_frame: Tensor, sched: NoiseSchedule, model: UNet) -> InversionResult:
    """DDIM-invert the source under first-frame conditioning and the null prompt."""
    cond = make_conditioning(first_frame, None, model.config.embed_dim)
    z = np.array(source_latents, copy=True)
    ladder = [z]
    for i, (t, t_next) in enumerate(sched.invert_pairs()):
        eps = model.forward(z, cond, t_next)
        z = ddim_invert_step(z, eps, t, t_next, sched)
        _check_finite(z, i, "inversion")
        ladder.append(z)
        logger.debug(f"inversion step {i + 1}/{sched.num_steps} t={t_next}")
    logger.info(f"Inverted {z.shape[0]} frames over {sched.num_steps} steps")
    return InversionResult(latent_ladder=ladder, first_frame_latent=np.array(first_frame, copy=True))


def reconstruct(
    inv: InversionResult,
    sched: NoiseSchedule,
    model: UNet,
    record_into: Optional[FeatureCache] = None,
    plan: Optional[InjectionPlan] = None,
) -> ReconstructionResult:
    """Run the source branch and the reconstruction branch in lockstep.

    Each step the source branch restarts from the stored ladder rung and
    records planned features; the reconstruction branch continues from its own
    previous output and consumes those features at the same sites.
    """
    _check_ladder(inv, sched)
    plan = plan or InjectionPlan(T=sched.num_steps)
    _check_plan(plan, sched, model)
    if record_into is not None and len(record_into):
        raise CachePopulatedError(f"cache already holds {len(record_into)} entries")
    cache = record_into if record_into is not None else FeatureCache()

    cond = source_conditioning(inv, model)
    z = inv.noise
    source_steps = []
    for i, (t, t_prev) in enumerate(sched.denoise_pairs()):
        rung = inv.rung_for_step(i)
        eps_src = model.forward(rung, cond, t, RecordHooks(plan, cache, i))
        source_steps.append(ddim_denoise_step(rung, eps_src, t, t_prev, sched))

        eps = model.forward(z, cond, t, InjectHooks(plan, cache, i, branch="reconstruct"))
        z = ddim_denoise_step(z, eps, t, t_prev, sched)
        _check_finite(z, i, "reconstruction")
        logger.debug(f"reconstruction step {i + 1}/{sched.num_steps} t={t}")
    logger.info(f"Reconstructed with {len(cache)} recorded features")
    return ReconstructionResult(latent=z, source_steps=source_steps, cache=cache)


def regenerate(inv: InversionResult, sched: NoiseSchedule, model: UNet) -> VideoLatent:
    """Free-running denoise from the inverted noise with no feature injection."""
    _check_ladder(inv, sched)
    cond = source_conditioning(inv, model)
    z = inv.noise
    for i, (t, t_prev) in enumerate(sched.denoise_pairs()):
        z = ddim_denoise_step(z, model.forward(z, cond, t), t, t_prev, sched)
        _check_finite(z, i, "regeneration")
    return z


def cfg_combine(eps_cond: VideoLatent, eps_neg: VideoLatent, w: float) -> VideoLatent:
    """eps_neg + w * (eps_cond - eps_neg); w == 1 returns eps_cond exactly."""
    if eps_cond.shape != eps_neg.shape:
        raise PipelineError(f"guidance branches disagree in shape: {eps_cond.shape} vs {eps_neg.shape}")
    if w < 1.0:
        raise PipelineError(f"guidance scale must be >= 1, got {w}")
    if w == 1.0:
        return np.array(eps_cond, copy=True)
    return eps_neg + w * (eps_cond - eps_neg)


def _initial_latent(req: EditRequest, inv: InversionResult, start: int) -> VideoLatent:
    if req.inverted_init:
        return inv.rung_for_step(start)
    rng = np.random.default_rng(req.noise_seed)
    return rng.standard_normal(inv.source.shape).astype(inv.source.dtype)


def run_edit(
    req: EditRequest,
    inv: InversionResult,
    cache: FeatureCache,
    sched: NoiseSchedule,
    model: UNet,
    monitor: Optional[InjectionMonitor] = None,
) -> EditResult:
    """Edit branch with every intermediate state; see ``edit``."""
    _check_ladder(inv, sched)
    _check_plan(req.plan, sched, model)
    if req.source_latents.shape != inv.source.shape:
        raise ConditioningError(
            f"request latents {req.source_latents.shape} do not match the ladder {inv.source.shape}"
        )

    embed_dim = model.config.embed_dim
    cond = make_conditioning(req.edited_first_frame_latent, req.target_prompt, embed_dim)
    neg = make_conditioning(req.edited_first_frame_latent, req.negative_prompt, embed_dim)
    start = req.start_index(sched.num_steps)
    z = _initial_latent(req, inv, start)
    if z.shape[0] > model.config.frames_nominal:
        logger.warning(f"Editing {z.shape[0]} frames, beyond the nominal {model.config.frames_nominal}")

    steps = []
    pairs = sched.denoise_pairs()
    for i in range(start, sched.num_steps):
        t, t_prev = pairs[i]
        eps_cond = model.forward(z, cond, t, InjectHooks(req.plan, cache, i, "cond", monitor))
        eps_neg = model.forward(z, neg, t, InjectHooks(req.plan, cache, i, "neg", monitor))
        z = ddim_denoise_step(z, cfg_combine(eps_cond, eps_neg, req.guidance_scale), t, t_prev, sched)
        _check_finite(z, i, "edit")
        steps.append(z)
        logger.info(f"edit step {i + 1}/{sched.num_steps} t={t}")
    return EditResult(latent=z, steps=steps, start_index=start, monitor=monitor)


def edit(
    req: EditRequest,
    inv: InversionResult,
    cache: FeatureCache,
    sched: NoiseSchedule,
    model: UNet,
    monitor: Optional[InjectionMonitor] = None,
) -> VideoLatent:
    """Sample the edited video with CFG, replacing planned features in both branches."""
    return run_edit(req, inv, cache, sched, model, monitor).latent


def trajectory_distance(edit_steps: List[VideoLatent], inv: InversionResult, start: int = 0) -> float:
    """Summed L2 distance from each edit state to the ladder rung at the same timestep.

    ``edit_steps[k]`` is the state after step ``start + k``, which sits on rung
    ``T - 1 - (start + k)``; the last step is compared with the clean source.
    """
    T = inv.num_steps
    if start + len(edit_steps) > T:
        raise PipelineError(f"{len(edit_steps)} steps from index {start} exceed T={T}")
    total = 0.0
    for k, state in enumerate(edit_steps):
        rung = inv.latent_ladder[T - 1 - (start + k)]
        total += float(np.linalg.norm((state - rung).ravel()))
    return total


def relative_error(estimate: VideoLatent, reference: VideoLatent) -> float:
    """||estimate - reference|| / ||reference||."""
    return float(np.linalg.norm((estimate - reference).ravel()) / np.linalg.norm(reference.ravel()))


def edit_pipeline(
    req: EditRequest,
    sched: NoiseSchedule,
    model: UNet,
    monitor: Optional[InjectionMonitor] = None,
) -> Tuple[EditResult, ReconstructionResult, InversionResult]:
    """Invert, reconstruct with recording, then edit: the full run on one request."""
    inv = invert_video(req.source_latents, req.source_latents[0], sched, model)
    recon = reconstruct(inv, sched, model, FeatureCache(), req.plan)
    result = run_edit(req, inv, recon.cache, sched, model, monitor)
    return result, recon, inv
