"""Compressed-spectrogram reconstruction cost, likelihood weighting and RIR noise regularizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .operator import OperatorConfig, RirParams, impulse_response, surrogate_subbands
from .signal import StftConfig, stft

__all__ = [
    "CompressionConfig",
    "RegularizerSchedule",
    "compress",
    "cost",
    "likelihood_weight",
    "constant_weight",
    "noise_regularizer",
    "sigma_prime",
]

# Keeps d|S|^p/dS finite at S = 0 for p < 1.
_COMPRESS_EPS = 1e-20


@dataclass(frozen=True)
class CompressionConfig:
    exponent: float = 2.0 / 3.0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if not 0 < self.exponent <= 1:
            raise ValueError(f"compression exponent must lie in (0, 1], got {self.exponent}")


@dataclass(frozen=True)
class RegularizerSchedule:
    sigma_min: float = 5e-4
    sigma_max: float = 1e-2

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")


def compress(S: torch.Tensor, exponent: float) -> torch.Tensor:
    """``|S|**exponent * exp(1j * angle(S))``, with zero mapped to zero."""
    if exponent == 1:
        return S
    mag2 = S.real**2 + S.imag**2
    return S * (mag2 + _COMPRESS_EPS) ** ((exponent - 1) / 2)


def _match_length(a: torch.Tensor, b: torch.Tensor):
    n = max(a.shape[-1], b.shape[-1])
    return F.pad(a, (0, n - a.shape[-1])), F.pad(b, (0, n - b.shape[-1]))


def cost(y: torch.Tensor, y_hat: torch.Tensor, c: CompressionConfig = CompressionConfig()) -> torch.Tensor:
    """Mean-over-frames squared distance between compressed spectrograms.

    The shorter signal is zero-padded. Leading dimensions are summed, so a
    batch of independent problems yields independent gradients.
    """
    y, y_hat = _match_length(y, y_hat)
    Y = compress(stft(y, c.stft).data, c.exponent)
    Yh = compress(stft(y_hat, c.stft).data, c.exponent)
    diff = Y - Yh
    return (diff.real**2 + diff.imag**2).sum() / Y.shape[-2]


def likelihood_weight(grad_norm, n_elems: int, zeta_prime: float = 0.5, eps: float = 1e-8, sigma: float = 1.0):
    """Gradient-norm-normalized step weight ``zeta' * sqrt(n) / (sigma * (||g|| + eps))``.

    The ``1 / sigma`` keeps the guidance a fixed fraction of the prior score,
    whose magnitude also grows like ``1 / sigma``. ``grad_norm`` may be a tensor.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if (torch.as_tensor(grad_norm) < 0).any():
        raise ValueError("grad_norm must be non-negative")
    return zeta_prime * n_elems**0.5 / (sigma * (grad_norm + eps))


def constant_weight(eta: float) -> float:
    """Weight implied by a Gaussian likelihood of known variance, ``1 / (2 eta^2)``."""
    return 1.0 / (2.0 * eta**2)


def sigma_prime(sigma: float, sched: RegularizerSchedule = RegularizerSchedule()) -> float:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return min(max(sigma, sched.sigma_min), sched.sigma_max)


def noise_regularizer(
    p: RirParams,
    sigma: float,
    cfg: OperatorConfig,
    c: CompressionConfig = CompressionConfig(),
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    offset: Optional[torch.Tensor] = None,
    subbands: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Distance between the RIR estimate and a noisy, detached copy of itself.

    Differentiable in ``p`` through the first term only. The noise draw comes
    from ``generator`` if given, else from a fresh generator seeded with
    ``seed``. ``offset`` has the meaning given in ``surrogate_subbands``.
    Callers that already built those subbands from ``p`` can pass them as
    ``subbands`` to skip the rebuild.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if subbands is None:
        subbands = surrogate_subbands(p, cfg, offset)
    h = impulse_response(subbands, cfg)
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    v = torch.randn(h.shape, generator=generator, dtype=h.dtype)
    target = h.detach() + sigma * v
    A = compress(stft(h, c.stft).data, c.exponent)
    B = compress(stft(target, c.stft).data, c.exponent)
    diff = A - B
    return (diff.real**2 + diff.imag**2).sum() / cfg.n_frames
