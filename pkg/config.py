import os
import logging
from dotenv import load_dotenv
import numpy as np

# Load environment variables
load_dotenv()

# Kernel parallelism (0 = sequential reference mode)
try:
    AV2V_THREADS = int(os.getenv('AV2V_THREADS', '0'))
except ValueError:
    raise ValueError("AV2V_THREADS must be an integer.")
if AV2V_THREADS < 0:
    raise ValueError("AV2V_THREADS must be >= 0.")

LOG_LEVEL = getattr(logging, os.getenv('AV2V_LOG_LEVEL', 'INFO').upper(), logging.INFO)

# 32-bit storage switch; tests run at 64-bit
FLOAT_DTYPE = np.float32 if os.getenv('AV2V_FLOAT32', '0') == '1' else np.float64

# Model presets
PRESETS_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config.json')

# Model defaults
MODEL_SEED = 0
BASE_CHANNELS = 8
DEPTH = 3
DECODER_LAYER_COUNT = 12
FRAMES_NOMINAL = 16
HEAD_DIM = 8
HEADS = 1
EMBED_DIM = 32
NORM_GROUPS = 4
NORM_EPS = 1e-5

# Schedule defaults
T_TRAIN = 1000
BETA_START = 0.00085
BETA_END = 0.012
SAMPLING_STEPS = 50

# Injection plan defaults
L1_LAYERS = (4,)
L2_LAYERS = tuple(range(4, 12))
L3_LAYERS = tuple(range(4, 12))
TAU_CONV = 0.2
TAU_SA = 0.2
TAU_TA = 0.5

# Edit defaults
GUIDANCE_SCALE = 7.5
T_PRIME_FRACTION = 1.0
NEGATIVE_PROMPT = (
    "Distorted, discontinuous, Ugly, blurry, low resolution, motionless, static, "
    "disfigured, disconnected limbs, Ugly faces, incomplete arms"
)
INVERTED_INIT = True
NOISE_SEED = 0

# Media defaults
PATCH_SIZE = 8
CODEC_SEED = 0
FRAME_RATE = 8.0

# Sweep defaults
SWEEP_VALUES = (0.0, 0.2, 0.5, 0.7, 1.0)

# File formats
TENSOR_MAGIC = b"AV2V"
TENSOR_FORMAT_VERSION = 1
TENSOR_SUFFIX = ".av2v"
FRAME_PATTERN = "frame_{:04d}.ppm"
LADDER_PATTERN = "z_step_{:03d}" + TENSOR_SUFFIX
RESOLVED_CONFIG_FILE = "resolved.cfg"
PROGRESS_LOG_FILE = "progress.log"

# Exit codes
EXIT_CODES = {
    'success': 0,
    'usage': 2,
    'runtime': 3,
}

# Error Messages
ERROR_MESSAGES = {
    'kernel_domain': "Kernel input outside its domain",
    'configuration': "Invalid configuration",
    'step_order': "Sampling steps out of order",
    'conditioning': "Conditioning does not match the latent",
    'plan': "Invalid injection plan",
    'cache': "Feature cache error",
    'cache_duplicate': "Feature already recorded at this site",
    'cache_miss': "No recorded feature at a planned injection site",
    'cache_populated': "Feature cache is already populated",
    'divergence': "Latent became non-finite",
    'pipeline': "Pipeline error",
    'format': "Malformed file",
    'bad_magic': "Not a tensor file (bad magic bytes)",
    'bad_version': "Unsupported tensor file version",
    'truncated': "Truncated file",
    'metric': "Metric input error",
    'general_error': "An error occurred.",
}
