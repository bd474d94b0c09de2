"""Edit, threshold sweep and ablation commands.

All three share one inversion and one recording pass. Sweeps and ablations
record under an all-steps plan so every threshold they try finds its
features in the cache.
"""
import os
import logging
from typing import List, Tuple
from cache import FeatureCache
from config import SWEEP_VALUES
from diffusion.injection import InjectionPlan
from diffusion.pipeline import EditRequest, EditResult, InversionResult, invert_video, reconstruct, run_edit, trajectory_distance
from diffusion.unet import UNet
from handlers.general import LATENT_FILE, load_config, progress_log, write_csv
from utils.errors import ConfigurationError
from utils.media_io import decode_video, encode_frame, encode_video, read_frame, read_frames, write_frames, write_tensor
from utils.metrics import frame_consistency, toy_embedder
from utils.run_config import RunConfig
from utils.utils import ensure_output_dir, parse_float_list

logger = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("full", dict(), True),
    ("no_temporal", dict(tau_ta=0.0), True),
    ("no_temporal_spatial", dict(tau_ta=0.0, tau_conv=0.0, tau_sa=0.0), True),
    ("no_temporal_spatial_inversion", dict(tau_ta=0.0, tau_conv=0.0, tau_sa=0.0), False),
)


class _EditSession:
    """Inputs, model, ladder and feature cache for one source video."""

    def __init__(self, args, run_config: RunConfig, record_plan: InjectionPlan):
        self.run_config = run_config
        self.codec = run_config.codec()
        self.sched = run_config.schedule()
        self.source = encode_video(read_frames(args.frames, run_config.frame_rate), self.codec)
        self.edited_first_frame = encode_frame(read_frame(args.edited_first_frame), self.codec)
        self.model: UNet = run_config.model(self.codec.latent_channels)
        self.inv: InversionResult = invert_video(self.source, self.source[0], self.sched, self.model)
        self.cache: FeatureCache = reconstruct(self.inv, self.sched, self.model, FeatureCache(), record_plan).cache

    def request(self, plan: InjectionPlan, inverted_init: bool) -> EditRequest:
        rc = self.run_config
        return EditRequest(
            source_latents=self.source,
            edited_first_frame_latent=self.edited_first_frame,
            target_prompt=rc.prompt,
            negative_prompt=rc.negative_prompt,
            guidance_scale=rc.guidance_scale,
            t_prime_fraction=rc.t_prime_fraction,
            plan=plan,
            inverted_init=inverted_init,
            noise_seed=rc.noise_seed,
        )

    def run(self, plan: InjectionPlan, inverted_init: bool) -> EditResult:
        return run_edit(self.request(plan, inverted_init), self.inv, self.cache, self.sched, self.model)

    def score(self, result: EditResult) -> Tuple[float, float]:
        """(trajectory distance to the source ladder, frame consistency of the decoded output)."""
        distance = trajectory_distance(result.steps, self.inv, result.start_index)
        frames = decode_video(result.latent, self.codec, self.run_config.frame_rate)
        return distance, frame_consistency(frames, toy_embedder(self.codec))

    def write(self, directory: str, result: EditResult) -> None:
        write_tensor(os.path.join(directory, LATENT_FILE), result.latent)
        write_frames(directory, decode_video(result.latent, self.codec, self.run_config.frame_rate))


def _full_plan(run_config: RunConfig) -> InjectionPlan:
    return run_config.plan().with_thresholds(tau_conv=1.0, tau_sa=1.0, tau_ta=1.0)


def edit_command(args) -> int:
    """Edit a video: frames, latent, resolved.cfg and progress.log land in --out."""
    run_config = load_config(args)
    ensure_output_dir(args.out, [args.frames])
    with progress_log(args.out):
        plan = run_config.plan()
        session = _EditSession(args, run_config, plan)
        result = session.run(plan, run_config.inverted_init)
        session.write(args.out, result)
    run_config.write_resolved(args.out)
    logger.info(f"Edited video written to {args.out}")
    return 0


def sweep_command(args) -> int:
    """Edit once per threshold value on one injection family and tabulate the results."""
    run_config = load_config(args)
    ensure_output_dir(args.out, [args.frames])
    try:
        values = parse_float_list(args.values) if args.values else SWEEP_VALUES
    except ValueError as e:
        raise ConfigurationError(f"cannot parse --values: {e}", key="--values")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ConfigurationError("--values must lie in [0, 1]", key="--values")
    base_plan = run_config.plan()
    session = _EditSession(args, run_config, _full_plan(run_config))
    rows: List[tuple] = []
    for tau in values:
        taus = dict(tau_conv=tau, tau_sa=tau) if args.family == "spatial" else dict(tau_ta=tau)
        result = session.run(base_plan.with_thresholds(**taus), run_config.inverted_init)
        distance, consistency = session.score(result)
        rows.append((args.family, float(tau), distance, consistency))
        logger.info(f"sweep {args.family} tau={tau}: distance={distance:.6g}, consistency={consistency:.6f}")
        if args.save_frames:
            session.write(ensure_output_dir(os.path.join(args.out, f"{args.family}_{tau:g}")), result)
    write_csv(os.path.join(args.out, "sweep.csv"), ("family", "tau", "trajectory_distance", "frame_consistency"), rows)
    run_config.write_resolved(args.out)
    return 0


def ablate_command(args) -> int:
    """Run the full edit and the three cumulative ablations."""
    run_config = load_config(args)
    ensure_output_dir(args.out, [args.frames])
    base_plan = run_config.plan()
    session = _EditSession(args, run_config, _full_plan(run_config))
    rows: List[tuple] = []
    for name, taus, inverted_init in ABLATION_ROWS:
        result = session.run(base_plan.with_thresholds(**taus), inverted_init)
        distance, consistency = session.score(result)
        rows.append((name, distance, consistency))
        logger.info(f"ablation {name}: distance={distance:.6g}, consistency={consistency:.6f}")
    write_csv(os.path.join(args.out, "ablation.csv"), ("row", "trajectory_distance", "frame_consistency"), rows)
    run_config.write_resolved(args.out)
    return 0
