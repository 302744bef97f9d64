"""Parametric subband reverberation operator.

The RIR lives in the STFT domain as ``H = A * exp(1j * Phi)`` with shape
``(n_frames, n_bins)``. Magnitudes follow a per-band exponential decay,
``A'[n, b] = w_b * exp(-alpha_b * n)``, interpolated log-linearly across
frequency. Phases are free.

The RIR side uses a block transform: rectangular windows of ``hop`` samples,
no overlap, zero-padded to the same ``fft_size`` as the signal STFT. With
that choice, subband filtering by ``H`` equals time-domain convolution with
``rir_from_subbands(H)`` whenever every block's inverse DFT fits in
``fft_size - window_length + 1`` samples, which holds for any ``H`` returned
by :func:`apply_projection`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .signal import Spectrogram, StftConfig, istft, stft

__all__ = [
    "BandLayout",
    "OperatorConfig",
    "RirParams",
    "magnitude_from_params",
    "assemble_rir",
    "subband_convolve",
    "min_phase_project",
    "rir_from_subbands",
    "subbands_from_rir",
    "apply_projection",
    "pin_direct_path",
    "surrogate_subbands",
    "apply_operator",
    "operator_output_length",
    "impulse_response",
    "operator_gradients",
]

DB_TO_NEPER = math.log(10.0) / 20.0


@dataclass(frozen=True)
class BandLayout:
    centers: tuple  # ascending bin indices

    def __post_init__(self):
        c = np.asarray(self.centers)
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("band layout needs at least one center")
        if c[0] < 0 or np.any(np.diff(c) <= 0):
            raise ValueError("band centers must be non-negative and strictly ascending")

    @property
    def n_bands(self) -> int:
        return len(self.centers)

    @classmethod
    def from_hz(cls, freqs_hz: Sequence[float], sample_rate: int, fft_size: int) -> "BandLayout":
        bins = [int(round(f * fft_size / sample_rate)) for f in freqs_hz]
        return cls(tuple(bins))

    @classmethod
    def default(cls, sample_rate: int = 16000, fft_size: int = 1024) -> "BandLayout":
        """26 bands: 125 Hz steps to 1 kHz, 250 Hz steps to 3 kHz, 500 Hz steps to 8 kHz."""
        freqs = (
            list(np.arange(125, 1001, 125))
            + list(np.arange(1250, 3001, 250))
            + list(np.arange(3500, 8001, 500))
        )
        return cls.from_hz(freqs, sample_rate, fft_size)

    def interpolation_matrix(self, n_bins: int) -> np.ndarray:
        """``(n_bins, n_bands)`` matrix of linear interpolation weights.

        Bins outside ``[centers[0], centers[-1]]`` copy the nearest band.
        """
        if self.centers[-1] > n_bins - 1:
            raise ValueError(f"band center {self.centers[-1]} beyond last bin {n_bins - 1}")
        eye = np.eye(self.n_bands)
        k = np.arange(n_bins)
        return np.stack([np.interp(k, self.centers, eye[b]) for b in range(self.n_bands)], axis=1)


@dataclass(frozen=True)
class OperatorConfig:
    n_frames: int = 100
    stft: StftConfig = field(default_factory=StftConfig)
    band_layout: Optional[BandLayout] = None
    sample_rate: int = 16000
    # Alternation limits for the min-phase / unit-direct-path projection.
    # Convergence is linear and occasionally slow: a few random RIRs need
    # thousands of rounds.
    projection_tol: float = 1e-10
    projection_max_iter: int = 10000

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.band_layout is None:
            object.__setattr__(
                self, "band_layout", BandLayout.default(self.sample_rate, self.stft.fft_size)
            )
        if self.band_layout.n_bands >= self.stft.n_bins:
            raise ValueError("need fewer bands than frequency bins")

    @property
    def n_bins(self) -> int:
        return self.stft.n_bins

    @property
    def n_bands(self) -> int:
        return self.band_layout.n_bands

    @property
    def rir_stft(self) -> StftConfig:
        s = self.stft
        return StftConfig(window_length=s.hop, hop=s.hop, fft_size=s.fft_size, window="rect", pad=0)

    @property
    def rir_length(self) -> int:
        return self.n_frames * self.stft.hop

    @cached_property
    def _interp(self) -> np.ndarray:
        return self.band_layout.interpolation_matrix(self.n_bins)

    def interp_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self._interp, dtype=dtype)


@dataclass
class RirParams:
    """Band weights (dB), band decays (nepers per frame) and the full phase matrix."""

    weights_db: torch.Tensor
    decays: torch.Tensor
    phases: torch.Tensor

    WEIGHT_DB_RANGE = (0.0, 40.0)
    DECAY_RANGE = (0.5, 28.0)

    @classmethod
    def initial(
        cls,
        cfg: OperatorConfig,
        weight_db: float = 0.0,
        decay: float = 10.0,
        seed: Optional[int] = 0,
    ) -> "RirParams":
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        phases = math.pi - 2 * math.pi * torch.rand(cfg.n_frames, cfg.n_bins, generator=gen, dtype=torch.float64)
        return cls(
            weights_db=torch.full((cfg.n_bands,), float(weight_db), dtype=torch.float64),
            decays=torch.full((cfg.n_bands,), float(decay), dtype=torch.float64),
            phases=phases,
        )

    def tensors(self) -> list:
        return [self.weights_db, self.decays, self.phases]

    def clone(self) -> "RirParams":
        return RirParams(*(t.detach().clone() for t in self.tensors()))

    def requires_grad_(self) -> "RirParams":
        for t in self.tensors():
            t.requires_grad_(True)
        return self

    @property
    def weights(self) -> torch.Tensor:
        """Linear-amplitude band weights."""
        return torch.exp(self.weights_db * DB_TO_NEPER)

    def validate(self, cfg: OperatorConfig) -> None:
        if self.weights_db.shape != (cfg.n_bands,) or self.decays.shape != (cfg.n_bands,):
            raise ValueError(f"expected {cfg.n_bands} band weights and decays")
        if self.phases.shape != (cfg.n_frames, cfg.n_bins):
            raise ValueError(f"phases must have shape {(cfg.n_frames, cfg.n_bins)}")
        for name, t in zip(("weights_db", "decays", "phases"), self.tensors()):
            if not torch.isfinite(t).all():
                raise ValueError(f"non-finite {name}")


def magnitude_from_params(p: RirParams, cfg: OperatorConfig) -> torch.Tensor:
    """``(n_frames, n_bins)`` magnitudes ``exp(lerp(log(w_b) - alpha_b * n))``."""
    n = torch.arange(cfg.n_frames, dtype=p.decays.dtype)
    log_band = p.weights_db * DB_TO_NEPER - n[:, None] * p.decays[None, :]
    return torch.exp(log_band @ cfg.interp_tensor(p.decays.dtype).T)


def assemble_rir(p: RirParams, cfg: OperatorConfig) -> torch.Tensor:
    """``H = A * exp(1j * Phi)``."""
    # torch.polar's backward is NaN where the magnitude underflows to zero.
    A = magnitude_from_params(p, cfg)
    return torch.complex(A * torch.cos(p.phases), A * torch.sin(p.phases))


def subband_convolve(X: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
    """Per-bin convolution along frames: ``Y[m, k] = sum_n H[n, k] X[m - n, k]``.

    ``X`` is ``(..., M, K)``, ``H`` is ``(N, K)``; the result has ``M + N - 1`` frames.
    """
    if X.shape[-1] != H.shape[-1]:
        raise ValueError(f"bin mismatch: X has {X.shape[-1]} bins, H has {H.shape[-1]}")
    m, n = X.shape[-2], H.shape[-2]
    out = m + n - 1
    nfft = 1 << (out - 1).bit_length()
    Xf = torch.fft.fft(X, n=nfft, dim=-2)
    Hf = torch.fft.fft(H, n=nfft, dim=-2)
    return torch.fft.ifft(Xf * Hf, dim=-2)[..., :out, :]


def min_phase_project(h: torch.Tensor, n_fft: Optional[int] = None, floor: float = 1e-8) -> torch.Tensor:
    """Minimum-phase signal with the magnitude spectrum of ``h``, via the folded real cepstrum.

    The construction runs on an ``n_fft``-point grid (default ``len(h)``) and
    returns ``n_fft`` samples; on that grid the magnitude is preserved exactly
    (apart from the floor).
    """
    h = torch.as_tensor(h)
    if h.shape[-1] == 0:
        raise ValueError("empty filter")
    if not torch.any(h != 0):
        raise ValueError("min-phase projection of an all-zero filter is undefined")
    n = h.shape[-1] if n_fft is None else n_fft
    if n < h.shape[-1]:
        raise ValueError("n_fft shorter than the filter")
    mag = torch.fft.fft(h, n=n).abs().clamp_min(floor)
    cep = torch.fft.ifft(torch.log(mag)).real
    fold = torch.zeros_like(cep)
    half = n // 2
    fold[..., 0] = cep[..., 0]
    fold[..., 1 : (n + 1) // 2] = 2 * cep[..., 1 : (n + 1) // 2]
    if n % 2 == 0:
        fold[..., half] = cep[..., half]
    return torch.fft.ifft(torch.exp(torch.fft.fft(fold))).real


def rir_from_subbands(H: torch.Tensor, cfg: OperatorConfig) -> torch.Tensor:
    """Time-domain RIR of ``rir_length`` samples from block-domain subbands."""
    spec = Spectrogram(data=H, config=cfg.rir_stft, length=cfg.rir_length)
    return istft(spec)


def subbands_from_rir(h: torch.Tensor, cfg: OperatorConfig) -> torch.Tensor:
    """Block-domain subbands ``(n_frames, n_bins)`` of an RIR, truncated or padded to ``rir_length``."""
    L = cfg.rir_length
    h = torch.as_tensor(h, dtype=torch.float64)
    h = F.pad(h, (0, L - h.shape[-1])) if h.shape[-1] < L else h[..., :L]
    return stft(h, cfg.rir_stft).data


def apply_projection(H: torch.Tensor, cfg: OperatorConfig) -> torch.Tensor:
    """Consistency, minimum phase and unit direct path.

    ``H_bar = blocks(delta (+) minphase(unblocks(H)))``. Minimum phase and the
    unit first sample are alternated until they agree (relative change below
    ``projection_tol``), so the result is a fixed point and the projection is
    idempotent. The last operation is always the first-sample replacement.
    """
    with torch.no_grad():
        h = rir_from_subbands(H.detach(), cfg)
        for _ in range(cfg.projection_max_iter):
            m = min_phase_project(h)
            m[..., 0] = 1.0
            change = (m - h).norm() / m.norm()
            h = m
            if change < cfg.projection_tol:
                break
        return subbands_from_rir(h, cfg)


def pin_direct_path(H: torch.Tensor, cfg: OperatorConfig) -> torch.Tensor:
    """Differentiable last stage of the projection: set the first RIR sample to one."""
    h = rir_from_subbands(H, cfg)
    h = torch.cat([torch.ones_like(h[..., :1]), h[..., 1:]], dim=-1)
    return subbands_from_rir(h, cfg)


def surrogate_subbands(p: RirParams, cfg: OperatorConfig, offset: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Subbands used inside the RIR search.

    Without ``offset`` this is plain ``assemble_rir``. With it, the direct
    path is pinned differentiably and ``offset`` (held constant) supplies the
    rest of the projection. Pinning inside the graph matters: a uniform gain
    cannot move the first sample, and a constant offset would hide that.
    """
    H = assemble_rir(p, cfg)
    if offset is None:
        return H
    return pin_direct_path(H, cfg) + offset


def operator_output_length(length: int, cfg: OperatorConfig) -> int:
    return length + (cfg.n_frames - 1) * cfg.stft.hop


def apply_operator(x: torch.Tensor, H, cfg: OperatorConfig) -> torch.Tensor:
    """``istft(subband_convolve(stft(x), H))``; output is ``(n_frames - 1) * hop`` samples longer.

    ``H`` is a subband tensor or a :class:`RirParams` (assembled without projection).
    """
    if isinstance(H, RirParams):
        H = assemble_rir(H, cfg)
    X = stft(x, cfg.stft)
    Y = subband_convolve(X.data, H)
    return istft(X.with_data(Y, length=operator_output_length(X.length, cfg)))


def impulse_response(H: torch.Tensor, cfg: OperatorConfig) -> torch.Tensor:
    """Waveform-domain RIR ``A(delta)`` of the operator, ``rir_length`` samples long."""
    delta = torch.zeros(cfg.stft.window_length, dtype=torch.float64)
    delta[0] = 1.0
    return apply_operator(delta, H, cfg)[: cfg.rir_length]


def operator_gradients(x: torch.Tensor, p: RirParams, cfg: OperatorConfig, upstream: torch.Tensor):
    """Vector-Jacobian products of ``apply_operator(x, assemble_rir(p))`` with ``upstream``.

    Returns ``(grad_x, RirParams-of-gradients)``.
    """
    x = torch.as_tensor(x, dtype=torch.float64).detach().requires_grad_(True)
    q = p.clone().requires_grad_()
    y = apply_operator(x, assemble_rir(q, cfg), cfg)
    grads = torch.autograd.grad(y, [x, *q.tensors()], grad_outputs=upstream)
    return grads[0], RirParams(*grads[1:])
