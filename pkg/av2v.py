import sys
import argparse
import logging
from typing import List, Optional

from handlers.general import help_command
from handlers.inversion import invert_command, reconstruct_command
from handlers.editing import edit_command, sweep_command, ablate_command
from handlers.features import features_command
from handlers.metrics import metrics_command

from utils.errors import VideoEditError, ConfigurationError
from config import EXIT_CODES, LOG_LEVEL

logger = logging.getLogger(__name__)


def _add_edit_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run configuration file (key = value)")
    parser.add_argument("--frames", required=True, help="directory of frame_%%04d.ppm source frames")
    parser.add_argument("--edited-first-frame", required=True, dest="edited_first_frame", help="edited first frame (.ppm)")
    parser.add_argument("--prompt", default=None, help="target prompt; overrides the config's prompt key")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="av2v", description="Training-free video editing from an edited first frame")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("invert", help="DDIM-invert frames into a latent ladder")
    p.add_argument("--config")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=invert_command)

    p = commands.add_parser("reconstruct", help="denoise a ladder back to frames")
    p.add_argument("--config")
    p.add_argument("--ladder", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=reconstruct_command)

    p = commands.add_parser("edit", help="edit a video from an edited first frame")
    _add_edit_inputs(p)
    p.set_defaults(handler=edit_command)

    p = commands.add_parser("features", help="write per-layer feature maps")
    p.add_argument("--config")
    p.add_argument("--ladder", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=features_command)

    p = commands.add_parser("metrics", help="frame-consistency score of a frame directory")
    p.add_argument("--config")
    p.add_argument("--frames", required=True)
    p.add_argument("--pairs", help="optional CSV of per-pair similarities")
    p.set_defaults(handler=metrics_command)

    p = commands.add_parser("sweep", help="edit over a grid of injection thresholds")
    _add_edit_inputs(p)
    p.add_argument("--family", choices=("spatial", "temporal"), default="temporal")
    p.add_argument("--values", help="comma-separated thresholds (default 0,0.2,0.5,0.7,1)")
    p.add_argument("--save-frames", action="store_true", dest="save_frames")
    p.set_defaults(handler=sweep_command)

    p = commands.add_parser("ablate", help="run the injection ablation rows")
    _add_edit_inputs(p)
    p.set_defaults(handler=ablate_command)

    p = commands.add_parser("help", help="list commands and exit codes")
    p.set_defaults(handler=help_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit status."""
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=LOG_LEVEL
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES['success'] if not e.code else EXIT_CODES['usage']

    try:
        return args.handler(args)
    except ConfigurationError as e:
        logger.error(f"Configuration error in {args.command}: {str(e)}")
        print(e.describe(), file=sys.stderr)
        return EXIT_CODES['usage']
    except VideoEditError as e:
        logger.error(f"Error running {args.command}: {str(e)}")
        print(e.describe(), file=sys.stderr)
        return EXIT_CODES['runtime']


if __name__ == '__main__':
    sys.exit(main())
