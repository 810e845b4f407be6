"""Temporal convolutional networks for PPG heart-rate estimation.

A small numpy engine (tensors, reverse-mode gradients, causal dilated
convolutions) carries a seed TCN, its training loop, a channel-width
search, int8 quantization, and the windowing / post-processing /
fine-tuning pipeline around them.
"""

from .errors import (
    ArgumentError,
    DimensionError,
    FormatError,
    PreconditionError,
    TapeError,
    TcnHrError,
    TrainingError,
    UnsupportedVersionError,
)

__version__ = "0.1.0"
