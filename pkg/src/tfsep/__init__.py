"""Multichannel speech separation with alternating spectral/temporal attention, in NumPy."""
from .model import ModelConfig, build, count_params, preset, separate
from .objective import pit_loss, si_sdr
from .signal import ComplexSpectrogram, MultichannelWaveform, StftConfig, istft, read_wav, stft, write_wav

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram",
    "ModelConfig",
    "MultichannelWaveform",
    "StftConfig",
    "build",
    "count_params",
    "istft",
    "pit_loss",
    "preset",
    "read_wav",
    "separate",
    "si_sdr",
    "stft",
    "write_wav",
]
