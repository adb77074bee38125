"""earlyfuse - early-fusion audio-visual transformers on a small numpy autodiff core.

This package provides the tensor and layer primitives, tokenization and
masking for image/spectrogram pairs, the fusion encoder with its dense and
factorized interaction variants, masked-reconstruction pretraining, probing
and a forward-pass benchmark harness.
"""

from .builder import ConfigBuilder
from .config import RunConfig, load_config
from .encoder import FusionConfig, FusionEncoder
from .errors import (
    ArchitectureMismatchError,
    CheckpointFormatError,
    ConfigurationError,
    DimensionError,
    EarlyFuseError,
    NonFiniteLossError,
    TokenIndexError,
)
from .pretraining import AudioVisualMAE, DecoderConfig, TrainConfig, pretrain
from .tensor import Tensor
from .tokenization import InputConfig

__all__ = [
    'ArchitectureMismatchError', 'AudioVisualMAE', 'CheckpointFormatError', 'ConfigBuilder', 'ConfigurationError',
    'DecoderConfig', 'DimensionError', 'EarlyFuseError', 'FusionConfig', 'FusionEncoder', 'InputConfig',
    'NonFiniteLossError', 'RunConfig', 'TokenIndexError', 'Tensor', 'TrainConfig', 'load_config', 'pretrain',
]
