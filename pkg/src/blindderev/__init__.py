"""Blind single-channel speech dereverberation by diffusion posterior sampling
with joint estimation of a subband exponential-decay room impulse response."""

from .objective import CompressionConfig, RegularizerSchedule, cost
from .operator import OperatorConfig, RirParams, apply_operator, apply_projection, assemble_rir, impulse_response
from .optim import RirOptConfig, rir_opt_loop
from .prior import ExternalScoreModel, GaussianPrior, OracleScore, ScoreModel
from .sampler import (
    InferenceResult,
    SamplerConfig,
    build_schedule,
    run_blind_inference,
    run_informed_inference,
)
from .signal import StftConfig, istft, stft
from .wpe import WpeConfig, wpe_dereverb

__version__ = "0.1.0"

__all__ = [
    "CompressionConfig",
    "RegularizerSchedule",
    "cost",
    "OperatorConfig",
    "RirParams",
    "apply_operator",
    "apply_projection",
    "assemble_rir",
    "impulse_response",
    "RirOptConfig",
    "rir_opt_loop",
    "ExternalScoreModel",
    "GaussianPrior",
    "OracleScore",
    "ScoreModel",
    "InferenceResult",
    "SamplerConfig",
    "build_schedule",
    "run_blind_inference",
    "run_informed_inference",
    "StftConfig",
    "istft",
    "stft",
    "WpeConfig",
    "wpe_dereverb",
]
