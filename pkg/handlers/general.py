import os
import csv
import logging
from contextlib import contextmanager
from typing import Iterator, List, Sequence
import numpy as np
from config import LADDER_PATTERN, PROGRESS_LOG_FILE
from diffusion.pipeline import InversionResult
from utils.errors import FormatError
from utils.media_io import read_tensor, write_tensor
from utils.run_config import RunConfig, load_run_config

logger = logging.getLogger(__name__)

LATENT_FILE = "latent.av2v"
CACHE_DIR = "cache"

HELP_TEXT = """\
Commands:
  invert       DDIM-invert a frame directory into a latent ladder
  reconstruct  denoise a ladder back to frames, optionally dumping the feature cache
  edit         edit a video given an edited first frame and a prompt
  features     write per-layer feature maps for ladder steps
  metrics      print the frame-consistency score of a frame directory
  sweep        edit over a grid of injection thresholds
  ablate       run the injection ablation rows

Exit status: 0 success, 2 usage or configuration error, 3 runtime error.
"""


def load_config(args) -> RunConfig:
    """RunConfig from --config plus any command-line overrides present on ``args``."""
    overrides = {}
    if getattr(args, "prompt", None) is not None:
        overrides["prompt"] = args.prompt
    return load_run_config(getattr(args, "config", None), overrides)


def write_ladder(directory: str, inv: InversionResult) -> List[str]:
    paths = []
    for i, z in enumerate(inv.latent_ladder):
        path = os.path.join(directory, LADDER_PATTERN.format(i))
        write_tensor(path, z)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} ladder rungs to {directory}")
    return paths


def read_ladder(directory: str) -> InversionResult:
    """Ladder rungs z_step_000 (clean source) .. z_step_T; the first frame latent is rung 0, frame 0."""
    ladder = []
    while True:
        path = os.path.join(directory, LADDER_PATTERN.format(len(ladder)))
        if not os.path.exists(path):
            break
        ladder.append(read_tensor(path))
    if len(ladder) < 2:
        raise FormatError(f"{directory} holds no latent ladder", key=directory)
    shape = ladder[0].shape
    for i, z in enumerate(ladder):
        if z.shape != shape:
            raise FormatError(f"rung {i} has shape {z.shape}, rung 0 has {shape}", key=LADDER_PATTERN.format(i))
    return InversionResult(latent_ladder=ladder, first_frame_latent=np.array(ladder[0][0], copy=True))


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


@contextmanager
def progress_log(directory: str) -> Iterator[str]:
    """Mirror pipeline progress into ``progress.log`` without timestamps."""
    path = os.path.join(directory, PROGRESS_LOG_FILE)
    pipeline_logger = logging.getLogger("diffusion.pipeline")
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s - %(message)s"))
    handler.setLevel(logging.INFO)
    previous_level = pipeline_logger.level
    pipeline_logger.addHandler(handler)
    if pipeline_logger.getEffectiveLevel() > logging.INFO:
        pipeline_logger.setLevel(logging.INFO)
    try:
        yield path
    finally:
        pipeline_logger.removeHandler(handler)
        pipeline_logger.setLevel(previous_level)
        handler.close()


def help_command(args) -> int:
    print(HELP_TEXT, end="")
    return 0
