"""Single-channel weighted prediction error (WPE) dereverberation."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .signal import SizingError, StftConfig, istft, stft

__all__ = ["WpeConfig", "wpe_spectrogram", "wpe_dereverb"]


@dataclass(frozen=True)
class WpeConfig:
    iterations: int = 5
    taps: int = 50
    delay: int = 2
    variance_floor: float = 1e-10
    diagonal_loading: float = 1e-10
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.taps < 1 or self.delay < 0 or self.iterations < 0:
            raise ValueError("need taps >= 1, delay >= 0, iterations >= 0")


def _delayed_taps(Y: torch.Tensor, taps: int, delay: int) -> torch.Tensor:
    # Y: (K, T) -> (K, T, taps), entry [k, t, j] = Y[k, t - delay - j]
    K, T = Y.shape
    out = Y.new_zeros(K, T, taps)
    for j in range(taps):
        d = delay + j
        if d >= T:
            break
        out[:, d:, j] = Y[:, : T - d]
    return out


def wpe_spectrogram(Y: torch.Tensor, cfg: WpeConfig = WpeConfig(), return_objective: bool = False):
    """Dereverberate a ``(frames, bins)`` spectrogram bin by bin.

    Alternates per-frame variance estimates with weighted least-squares
    prediction filters over the delayed past, and subtracts the predicted
    late reverberation. With ``return_objective`` also returns the negative
    log-likelihood ``sum |x|^2 / lambda + log lambda`` after each iteration.
    """
    Yk = Y.transpose(0, 1)  # (K, T)
    Ytil = _delayed_taps(Yk, cfg.taps, cfg.delay)
    X = Yk
    objective = []
    eye = torch.eye(cfg.taps, dtype=Ytil.dtype)
    for _ in range(cfg.iterations):
        lam = (X.real**2 + X.imag**2).clamp_min(cfg.variance_floor)
        weighted = Ytil / lam[..., None]
        R = torch.einsum("ktj,kti->kji", weighted, Ytil.conj())
        r = torch.einsum("ktj,kt->kj", weighted, Yk.conj())
        load = cfg.diagonal_loading * torch.diagonal(R, dim1=-2, dim2=-1).real.sum(-1)
        R = R + load.clamp_min(cfg.diagonal_loading)[:, None, None] * eye
        G = torch.linalg.solve(R, r.unsqueeze(-1)).squeeze(-1)
        X = Yk - torch.einsum("ktj,kj->kt", Ytil, G.conj())
        if return_objective:
            objective.append(float(((X.real**2 + X.imag**2) / lam + torch.log(lam)).sum()))
    out = X.transpose(0, 1)
    return (out, objective) if return_objective else out


def wpe_dereverb(y: torch.Tensor, cfg: WpeConfig = WpeConfig()) -> torch.Tensor:
    """WPE on a waveform; output has the input's length."""
    y = torch.as_tensor(y, dtype=torch.float64)
    S = stft(y, cfg.stft)
    if S.n_frames < cfg.taps + cfg.delay:
        raise SizingError(f"signal too short for WPE: {S.n_frames} frames, need taps + delay = {cfg.taps + cfg.delay}")
    if not torch.any(y != 0):
        return torch.zeros_like(y)
    return istft(S.with_data(wpe_spectrogram(S.data, cfg)))
