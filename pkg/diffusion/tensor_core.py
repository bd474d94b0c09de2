"""Dense-array kernels the denoising network is built from.

Every kernel is a pure function of its inputs. Per-frame helpers may fan out
over a thread pool (``AV2V_THREADS``); frames are independent and results are
stacked in order, so the parallel path is bit-identical to the sequential one.
"""
from __future__ import annotations

import atexit
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from einops import rearrange

from config import AV2V_THREADS, FLOAT_DTYPE
from utils.errors import ConfigurationError, KernelError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

T_in = TypeVar("T_in")
T_out = TypeVar("T_out")

_executors = {}
_executors_lock = threading.Lock()


def _executor(threads: int) -> ThreadPoolExecutor:
    with _executors_lock:
        if threads not in _executors:
            _executors[threads] = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="av2v-kernel")
        return _executors[threads]


@atexit.register
def shutdown_executors() -> None:
    """Stop every kernel thread pool; later calls build fresh pools."""
    with _executors_lock:
        pools = list(_executors.values())
        _executors.clear()
    for pool in pools:
        pool.shutdown(wait=True)


def parallel_map(fn: Callable[[T_in], T_out], items: Sequence[T_in], threads: Optional[int] = None) -> List[T_out]:
    """Map ``fn`` over ``items`` in order, on a thread pool when threads > 0."""
    threads = AV2V_THREADS if threads is None else threads
    if threads <= 0 or len(items) < 2:
        return [fn(item) for item in items]
    return list(_executor(threads).map(fn, items))


def as_tensor(values, name: str = "tensor") -> Tensor:
    """Convert to the working float dtype and reject NaN/Inf."""
    arr = np.asarray(values, dtype=FLOAT_DTYPE)
    check_finite(arr, name)
    return arr


def check_finite(x: Tensor, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise KernelError(f"{name} contains NaN or Inf", key=name)


@dataclass(frozen=True)
class AttentionParams:
    """Query/key/value projections of one self-attention site."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    head_dim: int
    heads: int = 1

    def __post_init__(self):
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ConfigurationError(
                f"projection shapes differ: {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}",
                key="attention",
            )
        if self.head_dim < 1 or self.heads < 1:
            raise ConfigurationError("head_dim and heads must be positive", key="head_dim")
        if self.w_q.ndim != 2 or self.w_q.shape[1] != self.head_dim * self.heads:
            raise ConfigurationError(
                f"projection shape {self.w_q.shape} does not match heads={self.heads} x head_dim={self.head_dim}",
                key="head_dim",
            )

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    def project(self, z: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Q = zW^Q, K = zW^K, V = zW^V for token rows ``z`` (leading batch axes allowed)."""
        if z.shape[-1] != self.model_dim:
            raise KernelError(f"token width {z.shape[-1]} != model_dim {self.model_dim}", key="attention")
        return z @ self.w_q, z @ self.w_k, z @ self.w_v


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    m = np.asarray(m, dtype=FLOAT_DTYPE)
    check_finite(m, "softmax input")
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_scores: bool = False):
    """softmax(QKᵀ/√d)·V for one head.

    Accepts leading batch axes: ``[..., n_tok, d]``. With ``return_scores``
    returns ``(output, A)``.
    """
    if q.ndim < 2 or q.shape[-1] != k.shape[-1]:
        raise KernelError(f"query/key shapes disagree: {q.shape} vs {k.shape}", key="attention")
    if k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise KernelError(f"key/value shapes disagree: {k.shape} vs {v.shape}", key="attention")
    d = q.shape[-1]
    if d < 1:
        raise KernelError("head dimension must be >= 1", key="attention")
    for name, x in (("query", q), ("key", k), ("value", v)):
        check_finite(x, name)
    scores = softmax_rows((q @ np.swapaxes(k, -1, -2)) / math.sqrt(d))
    out = scores @ v
    if return_scores:
        return out, scores
    return out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_scores: bool = False):
    """Split ``[..., n, heads*d]`` projections into heads, attend, merge back."""
    qh, kh, vh = (rearrange(x, "... n (h d) -> ... h n d", h=heads) for x in (q, k, v))
    out, scores = scaled_dot_attention(qh, kh, vh, return_scores=True)
    out = rearrange(out, "... h n d -> ... n (h d)")
    if return_scores:
        return out, scores
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded, zero-filled cross-correlation of ``[C_in, H, W]`` with ``[C_out, C_in, k, k]``."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise KernelError(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape} and {kernel.shape}", key="conv2d")
    c_out, c_in, kh, kw = kernel.shape
    if c_in != x.shape[0]:
        raise KernelError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {c_in}", key="conv2d")
    if kh != kw or kh % 2 == 0:
        raise KernelError(f"conv2d needs an odd square kernel, got {kh}x{kw}", key="conv2d")
    check_finite(x, "conv2d input")
    check_finite(kernel, "conv2d kernel")
    if bias is not None:
        check_finite(bias, "conv2d bias")
    _, h, w = x.shape
    r = kh // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    out = np.zeros((c_out, h, w), dtype=np.result_type(x, kernel))
    for di in range(kh):
        for dj in range(kw):
            out += np.tensordot(kernel[:, :, di, dj], padded[:, di:di + h, dj:dj + w], axes=([1], [0]))
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_frames(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``conv2d`` applied to every frame of ``[F, C, H, W]``."""
    return np.stack(parallel_map(lambda frame: conv2d(frame, kernel, bias), list(x)))


def group_normalize(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Group normalization over ``[..., C, H, W]`` with per-channel gain and bias."""
    c = x.shape[-3]
    if groups < 1 or c % groups != 0:
        raise ConfigurationError(f"{c} channels are not divisible into {groups} groups", key="groups")
    if eps <= 0:
        raise ConfigurationError("eps must be positive", key="eps")
    check_finite(x, "group_normalize input")
    check_finite(gain, "group_normalize gain")
    check_finite(bias, "group_normalize bias")
    lead = x.shape[:-3]
    grouped = x.reshape(lead + (groups, -1))
    mean = grouped.mean(axis=-1, keepdims=True)
    var = grouped.var(axis=-1, keepdims=True)
    normed = ((grouped - mean) / np.sqrt(var + eps)).reshape(x.shape)
    return normed * gain[:, None, None] + bias[:, None, None]


def silu(x: Tensor) -> Tensor:
    return x / (1.0 + np.exp(-x))


def downsample2x(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes."""
    h, w = x.shape[-2:]
    return x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def sinusoidal_embedding(position: float, dim: int) -> Tensor:
    """Standard transformer sinusoid for a scalar position."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=FLOAT_DTYPE) / max(half, 1))
    angles = position * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1, dtype=FLOAT_DTYPE)])
    return emb.astype(FLOAT_DTYPE)
