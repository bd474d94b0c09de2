import logging
from handlers.general import load_config, write_csv
from utils.media_io import read_frames
from utils.metrics import frame_consistency, pair_similarities, toy_embedder

logger = logging.getLogger(__name__)


def metrics_command(args) -> int:
    """Print the frame-consistency score; --pairs also writes per-pair similarities."""
    run_config = load_config(args)
    frames = read_frames(args.frames, run_config.frame_rate)
    embedder = toy_embedder(run_config.codec())
    score = frame_consistency(frames, embedder)
    if args.pairs:
        scores = pair_similarities(frames, embedder)
        write_csv(args.pairs, ("frame", "next_frame", "cosine"), [(i, i + 1, s) for i, s in enumerate(scores)])
    print(score)
    return 0
