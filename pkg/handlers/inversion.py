import os
import logging
from cache import FeatureCache
from diffusion.pipeline import invert_video, reconstruct
from handlers.general import CACHE_DIR, LATENT_FILE, load_config, read_ladder, write_ladder
from utils.media_io import decode_video, encode_video, read_frames, write_frames, write_tensor
from utils.utils import ensure_output_dir

logger = logging.getLogger(__name__)


def invert_command(args) -> int:
    """Encode a frame directory and write its latent ladder z_step_000 .. z_step_T."""
    run_config = load_config(args)
    ensure_output_dir(args.out, [args.frames])
    codec = run_config.codec()
    source = encode_video(read_frames(args.frames, run_config.frame_rate), codec)
    model = run_config.model(codec.latent_channels)
    inv = invert_video(source, source[0], run_config.schedule(), model)
    write_ladder(args.out, inv)
    run_config.write_resolved(args.out)
    return 0


def reconstruct_command(args) -> int:
    """Denoise a ladder back to frames; ``dump_cache = true`` also writes the recorded features."""
    run_config = load_config(args)
    ensure_output_dir(args.out, [args.ladder])
    inv = read_ladder(args.ladder)
    codec = run_config.codec()
    model = run_config.model(inv.source.shape[1])
    sched = run_config.schedule()
    result = reconstruct(inv, sched, model, FeatureCache(), run_config.plan())

    write_tensor(os.path.join(args.out, LATENT_FILE), result.latent)
    write_frames(args.out, decode_video(result.latent, codec, run_config.frame_rate))
    if run_config.dump_cache:
        result.cache.dump(os.path.join(args.out, CACHE_DIR))
    run_config.write_resolved(args.out)
    logger.info(f"Reconstruction written to {args.out}")
    return 0
