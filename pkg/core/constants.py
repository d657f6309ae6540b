"""
Constants for the backdoor poisoning laboratory.

This module defines defaults shared by the domain layer and the experiment harness.
"""

from typing import Final

# Pixel domain
PIXEL_MIN: int = 0
PIXEL_MAX: int = 255

# Input-instance key: delta ~ U[-5, 5] per channel
DEFAULT_NOISE_BOUND: float = 5.0

# Prediction acceptance threshold; top probability must be strictly higher
DEFAULT_THRESHOLD: float = 0.85
NOT_SURE: Final[int] = -1
NOT_SURE_NAME: Final[str] = "NOT-SURE"

# Outlier pruning
DEFAULT_ETA: float = 0.05
DEFAULT_AUDIT_Z: float = 3.0

# Stealth budget for compare_to_pristine (fraction, i.e. 1pp)
DEFAULT_STEALTH_BUDGET: float = 0.01

# Threat-model guard: warn when n / N exceeds this
POISON_RATIO_WARNING: float = 0.01

# Desk-scale dataset defaults
DEFAULT_FRAME: tuple[int, int, int] = (32, 32, 3)
DEFAULT_NUM_LABELS: int = 10
DEFAULT_TRAIN_PER_LABEL: int = 100
DEFAULT_POOL_PER_LABEL: int = 20
DEFAULT_TEST_PER_LABEL: int = 10
SYNTH_NOISE_SIGMA: float = 8.0
SYNTH_MAX_SHIFT: int = 2
SYNTH_BRIGHTNESS: float = 16.0

# Training defaults, tuned for desk-scale runs
DEFAULT_EPOCHS: int = 30
DEFAULT_BATCH: int = 32
DEFAULT_LR: float = 0.01
DEFAULT_MOMENTUM: float = 0.9
DEFAULT_LR_DECAY: float = 0.99
DEFAULT_MLP_HIDDEN: int = 64
GRAD_CHECK_COORDINATES: int = 200

# A run whose epoch loss sits more than margin * ln(labels) above its best,
# or whose train accuracy halves, for patience epochs in a row has diverged
DIVERGENCE_PATIENCE: int = 3
DIVERGENCE_LOSS_MARGIN: float = 0.5

# Backdoor evaluation
DEFAULT_BACKDOOR_COUNT: int = 20
MAX_COLLISION_REDRAWS: int = 16

# Accessory scale presets as fractions of the frame (height, width)
SCALE_FRACTIONS: dict[str, tuple[float, float]] = {
    "small": (0.15, 0.55),
    "medium": (0.22, 0.75),
    "large": (0.30, 0.95),
}
EYE_REGION_ROW_FRACTION: float = 0.30

# Binary formats
RAW_IMAGE_MAGIC: bytes = b"IMG1"
CHECKPOINT_MAGIC: bytes = b"BFM1"
IDX_UBYTE_TYPE: int = 0x08

# Harness
WORKERS_ENV_VAR: str = "BACKDOORLAB_WORKERS"
SWEEP_SIZE_WARNING: int = 200
EXIT_OK: int = 0
EXIT_CONFIG_ERROR: int = 1
EXIT_PIPELINE_ERROR: int = 2

SWEEP_COLUMNS: tuple[str, ...] = (
    "strategy",
    "pattern",
    "n",
    "alpha_train",
    "alpha_test",
    "seed",
    "asr",
    "acc",
    "wrong_key",
    "not_sure",
)
