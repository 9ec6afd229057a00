"""Single-channel blind source separation of RF signals with a dual-path TF Transformer."""

from .errors import (
    CheckpointError,
    DimensionError,
    NumericError,
    ParameterError,
    UndefinedReferenceError,
)
from .loss import best_permutation, sd_sdr, upit_loss
from .model import FULL_CONFIG, TINY_CONFIG, ModelConfig, RFSeparator, count_params
from .tf_transform import StftConfig, istft, stft

__version__ = "0.1.0"
