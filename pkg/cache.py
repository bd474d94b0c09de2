import os
import re
import logging
from typing import Dict, Iterator, List, Tuple
import numpy as np
from config import TENSOR_SUFFIX
from diffusion.unet import FeatureKind
from utils.errors import CacheMissError, DuplicateEntryError, FormatError
from utils.media_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

CacheKey = Tuple[int, int, FeatureKind]

_ENTRY_FILE = re.compile(r"^step_(\d{3})_layer_(\d{2})_(\w+)" + re.escape(TENSOR_SUFFIX) + r"$")


def entry_filename(step_index: int, layer: int, kind: FeatureKind) -> str:
    return f"step_{step_index:03d}_layer_{layer:02d}_{kind.value}{TENSOR_SUFFIX}"


class FeatureCache:
    """Write-once store of source-branch features keyed by (step_index, layer, kind).

    Stored arrays are private read-only copies, so later reuse of the caller's
    activation buffers cannot change what gets injected.
    """

    def __init__(self):
        self._entries: Dict[CacheKey, np.ndarray] = {}

    def store(self, step_index: int, layer: int, kind: FeatureKind, value: np.ndarray) -> None:
        """Store a deep copy of ``value``; a second write to the same key is an error."""
        key = (step_index, layer, FeatureKind(kind))
        if key in self._entries:
            raise DuplicateEntryError(
                f"feature already recorded for step {step_index}, layer {layer}, {key[2].value}",
                key=entry_filename(*key),
            )
        copy = np.array(value, copy=True)
        copy.setflags(write=False)
        self._entries[key] = copy

    def get(self, step_index: int, layer: int, kind: FeatureKind) -> np.ndarray:
        """Return the recorded tensor; a miss means record and edit plans disagree."""
        key = (step_index, layer, FeatureKind(kind))
        try:
            return self._entries[key]
        except KeyError:
            logger.error(f"Cache miss at step {step_index}, layer {layer}, {key[2].value}")
            raise CacheMissError(
                f"no feature recorded for step {step_index}, layer {layer}, {key[2].value}; "
                "was the cache recorded under a different plan?",
                key=entry_filename(*key),
            )

    def __contains__(self, key: CacheKey) -> bool:
        step_index, layer, kind = key
        return (step_index, layer, FeatureKind(kind)) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[CacheKey]:
        return iter(sorted(self._entries, key=lambda k: (k[0], k[1], k[2].value)))

    def count_by_kind(self) -> Dict[FeatureKind, int]:
        counts = {kind: 0 for kind in FeatureKind}
        for _, _, kind in self._entries:
            counts[kind] += 1
        return counts

    def steps(self) -> List[int]:
        return sorted({step for step, _, _ in self._entries})

    @property
    def nbytes(self) -> int:
        return sum(arr.nbytes for arr in self._entries.values())

    def dump(self, directory: str) -> int:
        """Write one tensor file per entry; returns the number of files written."""
        try:
            os.makedirs(directory, exist_ok=True)
            for key in self:
                write_tensor(os.path.join(directory, entry_filename(*key)), self._entries[key])
            logger.info(f"Dumped {len(self)} cache entries ({self.nbytes} bytes) to {directory}")
            return len(self)
        except Exception as e:
            logger.error(f"Error dumping feature cache: {str(e)}")
            raise

    @classmethod
    def load(cls, directory: str) -> "FeatureCache":
        """Rebuild a cache from a ``dump`` directory."""
        cache = cls()
        if not os.path.isdir(directory):
            raise FormatError(f"cache directory {directory} does not exist", key=directory)
        for name in sorted(os.listdir(directory)):
            match = _ENTRY_FILE.match(name)
            if not match:
                continue
            step_index, layer, kind = int(match.group(1)), int(match.group(2)), match.group(3)
            try:
                feature_kind = FeatureKind(kind)
            except ValueError:
                raise FormatError(f"unknown feature kind in {name}", key=name)
            cache.store(step_index, layer, feature_kind, read_tensor(os.path.join(directory, name)))
        logger.debug(f"Loaded {len(cache)} cache entries from {directory}")
        return cache
