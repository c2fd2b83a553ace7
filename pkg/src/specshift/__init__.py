"""Spectral-shift fine-tuning of a toy text-conditioned diffusion denoiser."""

__version__ = "0.1.0"

from .errors import (
    BaseModelMismatch,
    ConfigError,
    CorruptFile,
    DegenerateInput,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    SpecShiftError,
    TapeError,
)
from .linalg import SvdFactors, reshape_kernel, svd_decompose, unreshape_kernel
from .model import NULL_PROMPT, PromptTokens, ToyDenoiser
from .spectral import (
    DeltaCheckpoint,
    LoraFactor,
    SpectralShift,
    add_shifts,
    apply_checkpoint,
    interp_shifts,
    limit_rank,
    scale_shifts,
    shift_correlation,
)
