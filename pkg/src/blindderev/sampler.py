"""Reverse-diffusion posterior sampling with optional joint RIR estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .objective import CompressionConfig, constant_weight, cost, likelihood_weight
from .operator import (
    OperatorConfig,
    RirParams,
    apply_operator,
    apply_projection,
    assemble_rir,
    subbands_from_rir,
)
from .optim import RirOptConfig, rir_opt_loop
from .prior import ScoreModel, denoise_one_step, rescale_estimate
from .wpe import WpeConfig, wpe_dereverb

__all__ = [
    "DiffusionSchedule",
    "SamplerConfig",
    "InferenceResult",
    "SamplerError",
    "build_schedule",
    "likelihood_score",
    "sampler_step",
    "churn",
    "run_blind_inference",
    "run_informed_inference",
]


class SamplerError(RuntimeError):
    """Failure inside the sampling loop; ``step`` is the 0-based step index."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class DiffusionSchedule:
    t_max: float
    t_min: float
    n_steps: int
    rho: float
    sigmas: tuple

    def __post_init__(self):
        if len(self.sigmas) != self.n_steps:
            raise ValueError("sigmas must have n_steps entries")

    def with_terminal_zero(self) -> tuple:
        return self.sigmas + (0.0,)


def build_schedule(t_max: float = 0.5, t_min: float = 1e-4, n_steps: int = 200, rho: float = 10.0) -> DiffusionSchedule:
    """Noise levels interpolated linearly in ``sigma ** (1 / rho)``, endpoints exact."""
    if not (t_max > t_min > 0):
        raise ValueError(f"need t_max > t_min > 0, got {t_max}, {t_min}")
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    if rho <= 0:
        raise ValueError("rho must be positive")
    a, b = t_max ** (1 / rho), t_min ** (1 / rho)
    sig = [(a + n / (n_steps - 1) * (b - a)) ** rho for n in range(n_steps)]
    sig[0], sig[-1] = float(t_max), float(t_min)
    if any(s1 >= s0 for s0, s1 in zip(sig, sig[1:])):
        raise ValueError("schedule is not strictly decreasing; use fewer steps or a wider range")
    return DiffusionSchedule(float(t_max), float(t_min), n_steps, float(rho), tuple(sig))


@dataclass
class SamplerConfig:
    schedule: DiffusionSchedule = field(default_factory=build_schedule)
    s_churn: float = 50.0
    s_noise: float = 1.0
    s_tmin: float = 0.0
    s_tmax: float = math.inf
    zeta_prime: float = 0.5
    order: int = 2
    seed: int = 0
    # "normalized": zeta' sqrt(n) / (sigma ||grad C||); "constant": 1 / (2 eta^2).
    weighting: str = "normalized"
    eta: float = 1.0
    # Rescale the denoised estimate to this standard deviation; None disables.
    sigma_data: Optional[float] = 0.05
    # "auto" backpropagates through the score when the model allows it.
    score_jacobian: str = "auto"
    # Start from the warm initialization plus noise (True) or from it exactly.
    noisy_start: bool = True

    def __post_init__(self):
        if self.s_churn < 0:
            raise ValueError("s_churn must be >= 0")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.weighting not in ("normalized", "constant"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.score_jacobian not in ("auto", "exact", "identity"):
            raise ValueError(f"unknown score_jacobian {self.score_jacobian!r}")
        if self.eta <= 0 or self.zeta_prime < 0:
            raise ValueError("eta must be positive and zeta_prime non-negative")
        if self.sigma_data is not None and self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive or None")

    def gamma(self, sigma: float) -> float:
        if not (self.s_tmin <= sigma <= self.s_tmax):
            return 0.0
        return min(self.s_churn / self.schedule.n_steps, math.sqrt(2.0) - 1.0)

    def uses_exact_jacobian(self, model: ScoreModel) -> bool:
        if self.score_jacobian == "auto":
            return bool(model.differentiable)
        if self.score_jacobian == "exact" and not model.differentiable:
            raise ValueError("score model is not differentiable; use score_jacobian='identity'")
        return self.score_jacobian == "exact"


@dataclass
class InferenceResult:
    x0: torch.Tensor
    psi: Optional[RirParams]
    diagnostics: list
    jacobian: str
    initial_cost: float
    final_cost: float


@dataclass
class _Eval:
    score: torch.Tensor
    x0_hat: torch.Tensor
    grad: torch.Tensor
    zeta: torch.Tensor
    cost: float


def _weight(grad: torch.Tensor, sigma: float, cfg: SamplerConfig) -> torch.Tensor:
    if cfg.weighting == "constant":
        return torch.full(grad.shape[:-1] + (1,), constant_weight(cfg.eta), dtype=grad.dtype)
    return likelihood_weight(grad.norm(dim=-1, keepdim=True), grad.shape[-1], cfg.zeta_prime, sigma=sigma)


def _render(x, H, y, op_cfg):
    # Reverberant estimate cropped to the recording's length.
    return apply_operator(x, H, op_cfg)[..., : y.shape[-1]]


def _denoise(x, sigma, model, cfg, score=None):
    s = model.score(x, sigma).detach() if score is None else score
    x0 = denoise_one_step(x, sigma, model, score=s)
    if cfg.sigma_data is not None:
        x0 = rescale_estimate(x0, cfg.sigma_data)
    return s, x0


def _evaluate(x, sigma, y, H, model, op_cfg, comp, cfg, exact, score=None) -> _Eval:
    """Score, denoised estimate and likelihood gradient at ``(x, sigma)``.

    A precomputed ``score`` is reused on the surrogate-Jacobian path.
    """
    x = x.detach()
    if exact:
        with torch.enable_grad():
            leaf = x.clone().requires_grad_(True)
            s = model.score(leaf, sigma)
            x0 = denoise_one_step(leaf, sigma, model, score=s)
            if cfg.sigma_data is not None:
                x0 = rescale_estimate(x0, cfg.sigma_data)
            c = cost(y, _render(x0, H, y, op_cfg), comp)
            (grad,) = torch.autograd.grad(c, leaf)
        s, x0 = s.detach(), x0.detach()
    else:
        s, x0 = _denoise(x, sigma, model, cfg, score)
        with torch.enable_grad():
            leaf = x0.clone().requires_grad_(True)
            c = cost(y, _render(leaf, H, y, op_cfg), comp)
            (grad,) = torch.autograd.grad(c, leaf)
    return _Eval(s, x0, grad, _weight(grad, sigma, cfg), c.item())


def likelihood_score(
    x: torch.Tensor,
    sigma: float,
    y: torch.Tensor,
    H: torch.Tensor,
    model: ScoreModel,
    op_cfg: OperatorConfig,
    comp: CompressionConfig = CompressionConfig(),
    cfg: SamplerConfig = SamplerConfig(),
) -> torch.Tensor:
    """Approximate ``grad_x log p(y | x)`` as ``-zeta * grad_x C(y, A_H(x0_hat(x)))``.

    Adding it to the prior score gives the posterior score. Leading batch
    dimensions are independent problems with their own weights.
    """
    e = _evaluate(x, sigma, y, H, model, op_cfg, comp, cfg, cfg.uses_exact_jacobian(model))
    return -e.zeta * e.grad


def sampler_step(x: torch.Tensor, sigma: float, sigma_next: float, score: torch.Tensor, lik: torch.Tensor) -> torch.Tensor:
    """Euler step of the probability-flow ODE: ``x - sigma (sigma_next - sigma) (score + lik)``."""
    return x - sigma * (sigma_next - sigma) * (score + lik)


def churn(x: torch.Tensor, sigma: float, cfg: SamplerConfig, generator: torch.Generator):
    """Raise the noise level from ``sigma`` to ``sigma (1 + gamma)`` with fresh noise."""
    gamma = cfg.gamma(sigma)
    if gamma <= 0:
        return x, sigma
    sigma_hat = sigma * (1 + gamma)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x + math.sqrt(sigma_hat**2 - sigma**2) * cfg.s_noise * eps, sigma_hat


def _run(y, model, H_fixed, op_cfg, comp, cfg, wpe_cfg, opt_cfg, init_params, batch_shape, x_init):
    gen = torch.Generator().manual_seed(cfg.seed)
    exact = cfg.uses_exact_jacobian(model)
    y = torch.as_tensor(y, dtype=torch.float64)
    if x_init is None:
        x_init = wpe_dereverb(y, wpe_cfg)
    x_init = torch.as_tensor(x_init, dtype=torch.float64).expand(*batch_shape, y.shape[-1]).clone()

    blind = H_fixed is None
    p = state = None
    if blind:
        p = init_params if init_params is not None else RirParams.initial(op_cfg, seed=cfg.seed)
        p = p.clone()
        p.validate(op_cfg)
        state = opt_cfg.make_state()

    def operator():
        return apply_projection(assemble_rir(p, op_cfg), op_cfg) if blind else H_fixed

    with torch.no_grad():
        H = operator()
        initial_cost = cost(y, _render(x_init, H, y, op_cfg), comp).item()

    sigmas = cfg.schedule.with_terminal_zero()
    x = x_init
    if cfg.noisy_start:
        x = x + sigmas[0] * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    diagnostics = []
    for i in range(cfg.schedule.n_steps):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        try:
            x_hat, sigma_hat = churn(x, sigma, cfg, gen)
            rec = {"step": i, "sigma": sigma_hat}
            s = None
            if blind:
                with torch.no_grad():
                    s, x0_hat = _denoise(x_hat, sigma_hat, model, cfg)
                p, trace = rir_opt_loop(p, x0_hat, y, sigma_hat, state, op_cfg, opt_cfg, comp, gen)
                H = operator()
                if trace:
                    rec["rir_cost"], rec["regularizer"] = trace[-1]
                rec["weights_db"] = p.weights_db.tolist()
                rec["decays"] = p.decays.tolist()
            e = _evaluate(x_hat, sigma_hat, y, H, model, op_cfg, comp, cfg, exact, score=s)
            g = -e.zeta * e.grad
            x_next = sampler_step(x_hat, sigma_hat, sigma_next, e.score, g)
            if cfg.order == 2 and sigma_next > 0:
                e2 = _evaluate(x_next, sigma_next, y, H, model, op_cfg, comp, cfg, exact)
                d1 = -sigma_hat * (e.score + g)
                d2 = -sigma_next * (e2.score - e2.zeta * e2.grad)
                x_next = x_hat + (sigma_next - sigma_hat) * 0.5 * (d1 + d2)
            if not torch.isfinite(x_next).all():
                raise FloatingPointError("non-finite sample")
        except SamplerError:
            raise
        except Exception as exc:  # attach the step index
            raise SamplerError(i, exc) from exc
        rec["cost"] = e.cost
        rec["zeta"] = e.zeta.mean().item()
        diagnostics.append(rec)
        x = x_next

    with torch.no_grad():
        final_cost = cost(y, _render(x, H, y, op_cfg), comp).item()
    return InferenceResult(
        x0=x,
        psi=p,
        diagnostics=diagnostics,
        jacobian="exact" if exact else "identity",
        initial_cost=initial_cost,
        final_cost=final_cost,
    )


def run_blind_inference(
    y: torch.Tensor,
    model: ScoreModel,
    sampler_cfg: SamplerConfig = None,
    op_cfg: OperatorConfig = None,
    opt_cfg: RirOptConfig = None,
    comp: CompressionConfig = None,
    wpe_cfg: WpeConfig = None,
    init_params: Optional[RirParams] = None,
    x_init: Optional[torch.Tensor] = None,
) -> InferenceResult:
    """Jointly sample the clean signal and fit the RIR parameters.

    Starts from WPE output (unless ``x_init`` is given) and, at every noise
    level, refines the RIR estimate against the current denoised signal
    before taking the posterior step with the projected RIR.
    """
    return _run(
        y,
        model,
        None,
        op_cfg or OperatorConfig(),
        comp or CompressionConfig(),
        sampler_cfg or SamplerConfig(),
        wpe_cfg or WpeConfig(),
        opt_cfg or RirOptConfig(),
        init_params,
        (),
        x_init,
    )


def run_informed_inference(
    y: torch.Tensor,
    h: torch.Tensor,
    model: ScoreModel,
    sampler_cfg: SamplerConfig = None,
    op_cfg: OperatorConfig = None,
    comp: CompressionConfig = None,
    wpe_cfg: WpeConfig = None,
    n_chains: Optional[int] = None,
    x_init: Optional[torch.Tensor] = None,
) -> InferenceResult:
    """Posterior sampling with a known RIR ``h`` (no parameter search).

    ``n_chains`` runs that many independent chains as one batch; ``x0`` then
    has shape ``(n_chains, len(y))``.
    """
    op_cfg = op_cfg or OperatorConfig()
    H = subbands_from_rir(h, op_cfg)
    return _run(
        y,
        model,
        H,
        op_cfg,
        comp or CompressionConfig(),
        sampler_cfg or SamplerConfig(),
        wpe_cfg or WpeConfig(),
        None,
        None,
        () if n_chains is None else (n_chains,),
        x_init,
    )
