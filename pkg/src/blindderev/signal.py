"""Short-time Fourier analysis and synthesis.

Frames are stored time-major, ``(..., frames, bins)``. Analysis windows of
``window_length`` samples are zero-padded to ``fft_size`` before the DFT.
Synthesis overlap-adds the *full* ``fft_size`` inverse frames and divides by
the overlapped analysis-window sum. For spectrograms produced by :func:`stft`
the inverse frames vanish past the window, so this is an exact inverse; for
products such as ``H * X`` the inverse frames carry the linear-convolution
tail, which keeps subband filtering equivalent to time-domain convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import torch
import torch.nn.functional as F

__all__ = [
    "StftConfig",
    "Spectrogram",
    "SizingError",
    "get_window",
    "num_frames",
    "stft",
    "istft",
    "consistency_project",
]


class SizingError(ValueError):
    """Raised when a signal or spectrogram does not fit the STFT configuration."""


_WINDOWS = ("hann", "rect")


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 512
    hop: int = 128
    fft_size: int = 1024
    window: str = "hann"
    # Leading zero padding. ``None`` means ``window_length - hop``, which puts
    # every input sample under a full set of overlapping windows.
    pad: Optional[int] = None

    def __post_init__(self):
        if not (0 < self.hop <= self.window_length <= self.fft_size):
            raise ValueError(
                f"need 0 < hop <= window_length <= fft_size, got "
                f"{self.hop}, {self.window_length}, {self.fft_size}"
            )
        if self.fft_size % 2:
            raise ValueError(f"fft_size must be even, got {self.fft_size}")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}, expected one of {_WINDOWS}")
        if self.pad is not None and self.pad < 0:
            raise ValueError("pad must be non-negative")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def front_pad(self) -> int:
        return self.window_length - self.hop if self.pad is None else self.pad


@dataclass
class Spectrogram:
    """Complex STFT matrix with the configuration and signal length it came from."""

    data: torch.Tensor
    config: StftConfig
    length: int

    @property
    def n_frames(self) -> int:
        return self.data.shape[-2]

    def with_data(self, data: torch.Tensor, length: Optional[int] = None) -> "Spectrogram":
        return replace(self, data=data, length=self.length if length is None else length)


def get_window(cfg: StftConfig, dtype=torch.float64, device=None) -> torch.Tensor:
    if cfg.window == "hann":
        return torch.hann_window(cfg.window_length, periodic=True, dtype=dtype, device=device)
    return torch.ones(cfg.window_length, dtype=dtype, device=device)


def num_frames(length: int, cfg: StftConfig) -> int:
    """Number of frames :func:`stft` produces for a signal of ``length`` samples."""
    return (length - 1 + cfg.front_pad) // cfg.hop + 1


def stft(x: torch.Tensor, cfg: StftConfig) -> Spectrogram:
    """Windowed DFT of frames starting every ``hop`` samples.

    Frame ``t`` covers input samples ``[t*hop - pad, t*hop - pad + window_length)``.
    """
    x = torch.as_tensor(x)
    length = x.shape[-1]
    if length < cfg.window_length:
        raise SizingError(
            f"signal of {length} samples is shorter than one window ({cfg.window_length})"
        )
    n = num_frames(length, cfg)
    total = (n - 1) * cfg.hop + cfg.window_length
    front = cfg.front_pad
    xp = F.pad(x, (front, total - front - length))
    frames = xp.unfold(-1, cfg.window_length, cfg.hop)
    frames = frames * get_window(cfg, dtype=x.dtype, device=x.device)
    data = torch.fft.rfft(frames, n=cfg.fft_size, dim=-1)
    return Spectrogram(data=data, config=cfg, length=length)


def _overlap_add(frames: torch.Tensor, hop: int) -> torch.Tensor:
    # frames: (..., n_frames, frame_len) -> (..., (n_frames - 1) * hop + frame_len)
    lead = frames.shape[:-2]
    n, flen = frames.shape[-2:]
    out_len = (n - 1) * hop + flen
    if flen % hop == 0:
        # Shift-and-add of hop-sized slices beats col2im on CPU.
        out = 0
        for j in range(flen // hop):
            part = frames[..., j * hop : (j + 1) * hop].reshape(*lead, n * hop)
            out = out + F.pad(part, (j * hop, out_len - n * hop - j * hop))
        return out
    cols = frames.reshape(-1, n, flen).transpose(1, 2)
    out = F.fold(cols, output_size=(1, out_len), kernel_size=(1, flen), stride=(1, hop))
    return out.reshape(*lead, out_len)


@lru_cache(maxsize=64)
def _window_sum(cfg: StftConfig, n: int, dtype, device) -> torch.Tensor:
    win = get_window(cfg, dtype=dtype, device=device)
    frames = F.pad(win, (0, cfg.fft_size - cfg.window_length)).expand(n, cfg.fft_size)
    return _overlap_add(frames, cfg.hop)


def istft(spec: Spectrogram, length: Optional[int] = None) -> torch.Tensor:
    """Overlap-add inverse of :func:`stft`; returns ``length`` samples (default ``spec.length``).

    Only bins ``0..fft_size/2`` are read, so the output is real by construction.
    """
    cfg = spec.config
    data = spec.data
    if data.shape[-1] != cfg.n_bins:
        raise SizingError(f"spectrogram has {data.shape[-1]} bins, config expects {cfg.n_bins}")
    if length is None:
        length = spec.length
    n = data.shape[-2]
    frames = torch.fft.irfft(data, n=cfg.fft_size, dim=-1)
    out = _overlap_add(frames, cfg.hop)
    wsum = _window_sum(cfg, n, frames.dtype, frames.device)
    tiny = 1e-10 * float(wsum.max())
    out = out / torch.where(wsum > tiny, wsum, torch.ones_like(wsum))
    front = cfg.front_pad
    if front + length > out.shape[-1]:
        out = F.pad(out, (0, front + length - out.shape[-1]))
    return out[..., front : front + length]


def consistency_project(spec: Spectrogram) -> Spectrogram:
    """Nearest consistent spectrogram, ``stft(istft(S))``. Idempotent."""
    return stft(istft(spec), spec.config)
