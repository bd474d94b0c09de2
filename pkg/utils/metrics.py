import logging
from typing import Callable, List
import numpy as np
from utils.errors import MetricError
from utils.media_io import FrameSequence, PatchCodec, encode_frame

logger = logging.getLogger(__name__)

# frame [3, H, W] -> embedding vector
Embedder = Callable[[np.ndarray], np.ndarray]


def toy_embedder(codec: PatchCodec) -> Embedder:
    """Mean-pooled patch-codec features, L2-normalized; zero features stay zero."""
    def embed(frame: np.ndarray) -> np.ndarray:
        latent = encode_frame(frame, codec)
        vector = latent.mean(axis=(1, 2))
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector
    return embed


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two embeddings; 0.0 with a warning when either has zero norm."""
    a = np.ravel(a)
    b = np.ravel(b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("embedder produced a non-finite vector")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        logger.warning("Zero-norm embedding; scoring the pair as 0")
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def pair_similarities(fs: FrameSequence, emb: Embedder) -> List[float]:
    """Cosine similarity of every consecutive frame pair, in order."""
    if len(fs) < 2:
        raise MetricError(f"frame consistency needs at least 2 frames, got {len(fs)}")
    embeddings = [emb(frame) for frame in fs.frames]
    return [cosine_similarity(a, b) for a, b in zip(embeddings, embeddings[1:])]


def frame_consistency(fs: FrameSequence, emb: Embedder) -> float:
    """Mean consecutive-frame cosine similarity, in [-1, 1]."""
    scores = pair_similarities(fs, emb)
    return float(sum(scores) / len(scores))
