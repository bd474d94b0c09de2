"""Pixel <-> latent conversion and the on-disk tensor and frame formats.

Tensor file layout (little-endian throughout):

    magic "AV2V" | version u32 | rank u32 | dims u32 x rank | zero padding to 8 bytes | float64 payload

Frames are binary portable pixmaps (P6, maxval 255) named ``frame_%04d.ppm``;
lexicographic file order is temporal order.
"""
from __future__ import annotations

import glob
import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import List

import numpy as np
from einops import rearrange
from PIL import Image

from config import (
    CODEC_SEED,
    FLOAT_DTYPE,
    FRAME_PATTERN,
    FRAME_RATE,
    PATCH_SIZE,
    TENSOR_FORMAT_VERSION,
    TENSOR_MAGIC,
)
from diffusion.tensor_core import parallel_map
from utils.errors import (
    BadMagicError,
    ConfigurationError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from utils.retry import with_retry

logger = logging.getLogger(__name__)

_HEADER_FIXED = len(TENSOR_MAGIC) + 8


@with_retry(max_attempts=3)
def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


@with_retry(max_attempts=3)
def _write_bytes(path: str, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


def _header_size(rank: int) -> int:
    raw = _HEADER_FIXED + 4 * rank
    return raw + (-raw) % 8


def encode_tensor(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    header = TENSOR_MAGIC + np.array([TENSOR_FORMAT_VERSION, arr.ndim, *arr.shape], dtype="<u4").tobytes()
    header += b"\x00" * (_header_size(arr.ndim) - len(header))
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < len(TENSOR_MAGIC) or data[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise BadMagicError(f"{source} does not start with {TENSOR_MAGIC!r}", key=source)
    if len(data) < _HEADER_FIXED:
        raise TruncatedFileError(f"{source} ends inside the header", key=source)
    version, rank = np.frombuffer(data, dtype="<u4", count=2, offset=len(TENSOR_MAGIC))
    if version != TENSOR_FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source} has format version {version}", key=source)
    header = _header_size(int(rank))
    if len(data) < header:
        raise TruncatedFileError(f"{source} ends inside the header", key=source)
    dims = tuple(int(d) for d in np.frombuffer(data, dtype="<u4", count=int(rank), offset=_HEADER_FIXED))
    if any(d == 0 for d in dims):
        raise FormatError(f"{source} declares a zero extent {dims}", key=source)
    payload = math.prod(dims) * 8
    if len(data) < header + payload:
        raise TruncatedFileError(
            f"{source} payload has {len(data) - header} bytes, expected {payload}", key=source
        )
    if len(data) > header + payload:
        raise FormatError(f"{source} has {len(data) - header - payload} trailing bytes", key=source)
    return np.frombuffer(data, dtype="<f8", count=math.prod(dims), offset=header).reshape(dims).astype(np.float64)


def write_tensor(path: str, tensor: np.ndarray) -> None:
    """Write ``tensor`` in the AV2V tensor format (bit-exact float64)."""
    _write_bytes(path, encode_tensor(tensor))


def read_tensor(path: str) -> np.ndarray:
    try:
        data = _read_bytes(path)
    except FileNotFoundError as e:
        raise FormatError(f"missing tensor file {path}", key=path) from e
    return decode_tensor(data, source=path)


@dataclass(frozen=True)
class FrameSequence:
    """Frames as one [n, 3, H, W] array with values in [0, 1]."""
    frames: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise FormatError(f"frames must be [n, 3, H, W], got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class PatchCodec:
    """Orthogonal linear projection of non-overlapping patches; latent channels = 3 * patch**2."""
    patch: int = PATCH_SIZE
    seed: int = CODEC_SEED

    def __post_init__(self):
        if self.patch < 1:
            raise ConfigurationError("patch size must be positive", key="patch")

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch

    @cached_property
    def projection(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        q, r = np.linalg.qr(rng.standard_normal((self.latent_channels, self.latent_channels)))
        # fix column signs so the factorization is unique
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return q.astype(FLOAT_DTYPE)


def encode_frame(frame: np.ndarray, codec: PatchCodec) -> np.ndarray:
    """[3, H, W] pixels -> [3*p*p, H/p, W/p] latent."""
    _, height, width = frame.shape
    p = codec.patch
    if height % p or width % p:
        raise FormatError(f"frame size {height}x{width} is not divisible by patch {p}")
    patches = rearrange(frame, "c (h p1) (w p2) -> h w (c p1 p2)", p1=p, p2=p)
    return rearrange(patches @ codec.projection, "h w k -> k h w")


def encode_frames(frames: np.ndarray, codec: PatchCodec) -> np.ndarray:
    """[n, 3, H, W] pixels -> [n, 3*p*p, H/p, W/p] latents, one frame at a time."""
    return np.stack(parallel_map(lambda frame: encode_frame(frame, codec), list(frames)))


def encode_video(fs: FrameSequence, codec: PatchCodec) -> np.ndarray:
    return encode_frames(np.asarray(fs.frames, dtype=FLOAT_DTYPE), codec)


def decode_video(z: np.ndarray, codec: PatchCodec, frame_rate: float = FRAME_RATE) -> FrameSequence:
    """Transpose-projection inverse of ``encode_video``; no clamping."""
    if z.ndim != 4 or z.shape[1] != codec.latent_channels:
        raise FormatError(f"latent has shape {z.shape}, codec expects {codec.latent_channels} channels")
    patches = rearrange(z, "n k h w -> n h w k") @ codec.projection.T
    p = codec.patch
    frames = rearrange(patches, "n h w (c p1 p2) -> n c (h p1) (w p2)", c=3, p1=p, p2=p)
    return FrameSequence(frames=frames, frame_rate=frame_rate)


def frame_paths(directory: str) -> List[str]:
    return sorted(glob.glob(os.path.join(directory, "*.ppm")))


def read_frame(path: str) -> np.ndarray:
    """One P6 file -> [3, H, W] in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "RGB":
                raise FormatError(f"{path} is not an 8-bit RGB pixmap", key=path)
            pixels = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError as e:
        raise FormatError(f"missing frame {path}", key=path) from e
    except (OSError, SyntaxError) as e:
        raise FormatError(f"cannot decode {path}: {e}", key=path) from e
    return rearrange(pixels.astype(FLOAT_DTYPE) / 255.0, "h w c -> c h w")


def read_frames(directory: str, frame_rate: float = FRAME_RATE) -> FrameSequence:
    paths = frame_paths(directory)
    if not paths:
        raise FormatError(f"no .ppm frames in {directory}", key=directory)
    frames = [read_frame(p) for p in paths]
    shape = frames[0].shape
    for path, frame in zip(paths, frames):
        if frame.shape != shape:
            raise FormatError(f"{path} is {frame.shape[1:]} but the first frame is {shape[1:]}", key=path)
    logger.debug(f"Read {len(frames)} frames of {shape[1]}x{shape[2]} from {directory}")
    return FrameSequence(frames=np.stack(frames), frame_rate=frame_rate)


def quantize(frames: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round to 8-bit; export only."""
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_frame(path: str, frame: np.ndarray) -> None:
    Image.fromarray(rearrange(quantize(frame), "c h w -> h w c")).save(path, format="PPM")


def write_frames(directory: str, fs: FrameSequence) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frame in enumerate(fs.frames):
        path = os.path.join(directory, FRAME_PATTERN.format(i))
        write_frame(path, frame)
        paths.append(path)
    return paths


def write_grayscale(path: str, image: np.ndarray) -> None:
    """8-bit [H, W] array -> binary graymap (P5)."""
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PPM")
