"""Speech dereverberation guided by a panoramic view of the room.

Everything runs on numpy and scipy: a shoebox image-source simulator, a
ray-cast room panorama, a dataset builder, a small reverse-mode autograd, the
visual-acoustic UNet, a WPE baseline and the evaluation metrics.
"""
from .dsp import AudioClip, ComplexSpectrogram, LogMagPhase, StftConfig, griffin_lim, istft, stft
from .errors import DataError, NumericError, PipelineError, ShapeError, UsageError

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ComplexSpectrogram",
    "LogMagPhase",
    "StftConfig",
    "griffin_lim",
    "istft",
    "stft",
    "DataError",
    "NumericError",
    "PipelineError",
    "ShapeError",
    "UsageError",
]
