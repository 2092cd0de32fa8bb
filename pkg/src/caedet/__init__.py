"""Convolutional autoencoder for frame-level video anomaly detection, in plain numpy."""
from .errors import (CaedetError, ConfigError, DimensionError, DomainError, FormatError, NumericError,
                     StateError)
from .model import AutoencoderModel, build_decoder, build_encoder, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AutoencoderModel", "build_encoder", "build_decoder", "load_checkpoint", "save_checkpoint",
    "CaedetError", "ConfigError", "DimensionError", "DomainError", "FormatError", "NumericError",
    "StateError",
]
