"""Expand-and-quantize: product-quantized feature compression with entropy analysis."""

from .datagen import FeatureBatch, MixtureSpec, generate, read_features, write_features
from .errors import (ConfigError, DataCorruptionError, DataError, FormatError, InvalidInputError,
                     NumericalFailure)
from .expansion import ExpansionHead, init_head
from .quantizer import Codebooks, QuantizeResult, QuantizerConfig, assign, code_bits, quantize, quantize_batch, split

__version__ = "0.1.0"
