import os
import logging
from typing import Iterable, List, Tuple
from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_int_list(text: str) -> Tuple[int, ...]:
    """'4, 5,6' -> (4, 5, 6); ranges like '4-11' expand inclusively; empty text is the empty tuple."""
    values: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part and not part.startswith("-"):
            lo, hi = part.split("-", 1)
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    return tuple(values)


def format_int_list(values: Iterable[int]) -> str:
    return ",".join(str(v) for v in sorted(values))


def parse_float_list(text: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def quote_value(text: str) -> str:
    """Double-quote a string for a key = value file, escaping backslashes and quotes."""
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def ensure_output_dir(path: str, inputs: Iterable[str] = ()) -> str:
    """Create ``path``; refuse to write into any of the input directories."""
    target = os.path.realpath(path)
    for source in inputs:
        if source and os.path.realpath(source) == target:
            raise ConfigurationError(f"output directory {path} is also an input", key="--out")
    os.makedirs(target, exist_ok=True)
    logger.debug(f"Output directory ready: {target}")
    return path
