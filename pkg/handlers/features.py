import os
import logging
from einops import rearrange
from config import TENSOR_SUFFIX
from diffusion.visualize import to_grayscale, visualize_features
from handlers.general import load_config, read_ladder
from utils.media_io import write_grayscale, write_tensor
from utils.utils import ensure_output_dir

logger = logging.getLogger(__name__)


def map_filename(step_index: int, layer: int, kind: str, suffix: str = TENSOR_SUFFIX) -> str:
    return f"step_{step_index:03d}_layer_{layer:02d}_{kind}{suffix}"


def features_command(args) -> int:
    """One [F, H, W] map per planned layer and kind for each of ``feature_steps``."""
    run_config = load_config(args)
    ensure_output_dir(args.out, [args.ladder])
    inv = read_ladder(args.ladder)
    model = run_config.model(inv.source.shape[1])
    maps = visualize_features(inv, run_config.schedule(), model, run_config.plan(), run_config.feature_steps)
    for (step_index, layer, kind), feature_map in maps.items():
        write_tensor(os.path.join(args.out, map_filename(step_index, layer, kind)), feature_map)
        if run_config.export_pgm:
            # frames side by side
            tiled = rearrange(feature_map, "f h w -> h (f w)")
            write_grayscale(os.path.join(args.out, map_filename(step_index, layer, kind, ".pgm")), to_grayscale(tiled))
    run_config.write_resolved(args.out)
    logger.info(f"Wrote {len(maps)} feature maps to {args.out}")
    return 0
