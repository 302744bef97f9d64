"""Mono WAV input and output."""

from __future__ import annotations

import numpy as np
import torch
from scipy.io import wavfile

__all__ = ["AudioFormatError", "read_wav", "write_wav"]


class AudioFormatError(ValueError):
    """The file is readable but not in a supported format."""


def read_wav(path, sample_rate: int = 16000) -> torch.Tensor:
    """Read a mono 16-bit PCM or 32-bit float WAV as float64 samples.

    PCM is scaled by 1/32768; float data is taken as is, including values
    outside [-1, 1]. Other rates are rejected rather than resampled.
    """
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != sample_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, required {sample_rate} Hz (resample first)")
    if data.dtype == np.int16:
        out = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        out = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}; use 16-bit PCM or 32-bit float")
    return torch.from_numpy(out)


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    """Write 32-bit float mono WAV without normalizing or clipping."""
    arr = samples.detach().cpu().numpy() if isinstance(samples, torch.Tensor) else np.asarray(samples)
    if arr.ndim != 1:
        raise AudioFormatError("write_wav expects a 1-D signal")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("refusing to write non-finite samples")
    wavfile.write(path, sample_rate, arr.astype(np.float32))
