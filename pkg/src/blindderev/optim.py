"""Constrained Adam search over RIR parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .objective import CompressionConfig, RegularizerSchedule, cost, noise_regularizer, sigma_prime
from .operator import (
    OperatorConfig,
    RirParams,
    apply_operator,
    apply_projection,
    assemble_rir,
    pin_direct_path,
    surrogate_subbands,
)

__all__ = ["AdamState", "RirOptConfig", "adam_step", "project_params", "rir_opt_loop", "NonFiniteGradient"]

_NAMES = ("weights_db", "decays", "phases")


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    # Separate step size for the phase matrix; None uses ``lr``.
    phase_lr: Optional[float] = None
    step_count: int = 0
    first_moment: Optional[list] = None
    second_moment: Optional[list] = None

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr <= 0 or (self.phase_lr is not None and self.phase_lr <= 0):
            raise ValueError("learning rate must be positive")

    def reset(self) -> None:
        self.step_count = 0
        self.first_moment = None
        self.second_moment = None


def adam_step(state: AdamState, params: RirParams, grads: RirParams) -> RirParams:
    """One bias-corrected Adam update. Mutates ``state``; returns new parameters."""
    g_list = grads.tensors()
    for name, g in zip(_NAMES, g_list):
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    if state.first_moment is None:
        state.first_moment = [torch.zeros_like(g) for g in g_list]
        state.second_moment = [torch.zeros_like(g) for g in g_list]
    state.step_count += 1
    t = state.step_count
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    rates = (state.lr, state.lr, state.lr if state.phase_lr is None else state.phase_lr)
    out = []
    for i, (p, g) in enumerate(zip(params.tensors(), g_list)):
        m = state.first_moment[i].mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v = state.second_moment[i].mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        step = rates[i] * (m / bc1) / ((v / bc2).sqrt() + state.eps)
        out.append(p.detach() - step)
    return RirParams(*out)


def _wrap(phi: torch.Tensor) -> torch.Tensor:
    # (-pi, pi]
    return math.pi - torch.remainder(math.pi - phi, 2 * math.pi)


def project_params(
    p: RirParams,
    weight_db_range=RirParams.WEIGHT_DB_RANGE,
    decay_range=RirParams.DECAY_RANGE,
) -> RirParams:
    return RirParams(
        weights_db=p.weights_db.detach().clamp(*weight_db_range),
        decays=p.decays.detach().clamp(*decay_range),
        phases=_wrap(p.phases.detach()),
    )


@dataclass
class RirOptConfig:
    n_its: int = 10
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    # Adam normalizes every coordinate, so near the optimum each of the many
    # phases still moves by the full step. 0.1 rad makes the projected RIR
    # oscillate; 0.01 is stable but leaves some bands unconverged.
    phase_lr: Optional[float] = 0.03
    # Keep Adam moments across diffusion steps (warm start).
    persist_moments: bool = True
    weight_db_range: tuple = RirParams.WEIGHT_DB_RANGE
    decay_range: tuple = RirParams.DECAY_RANGE
    regularizer: Optional[RegularizerSchedule] = field(default_factory=RegularizerSchedule)
    # Apply the RIR projection after every step and adopt its phases.
    project_rir: bool = True

    def make_state(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, phase_lr=self.phase_lr)


def rir_objective(
    p: RirParams,
    x_hat: torch.Tensor,
    y: torch.Tensor,
    sigma: float,
    op_cfg: OperatorConfig,
    comp: CompressionConfig,
    reg: Optional[RegularizerSchedule],
    generator: Optional[torch.Generator] = None,
    offset: Optional[torch.Tensor] = None,
):
    """``C(y, A_p(x_hat)) + R(p)``; returns ``(total, C, R)`` as tensors.

    ``offset`` carries the part of the projection that is not differentiated
    (see ``surrogate_subbands``).
    The operator output is cropped to the length of ``y``: a recording ends
    where it ends, it does not contain a silent tail.
    """
    H = surrogate_subbands(p, op_cfg, offset)
    y_hat = apply_operator(x_hat, H, op_cfg)[..., : y.shape[-1]]
    c = cost(y, y_hat, comp)
    if reg is None:
        r = torch.zeros((), dtype=c.dtype)
    else:
        r = noise_regularizer(p, sigma_prime(sigma, reg), op_cfg, comp, generator=generator, subbands=H)
    return c + r, c, r


def rir_opt_loop(
    p: RirParams,
    x_hat: torch.Tensor,
    y: torch.Tensor,
    sigma: float,
    state: AdamState,
    op_cfg: OperatorConfig,
    opt_cfg: RirOptConfig = RirOptConfig(),
    comp: CompressionConfig = CompressionConfig(),
    generator: Optional[torch.Generator] = None,
    n_its: Optional[int] = None,
):
    """Run the inner RIR search at one diffusion step.

    Each iteration projects the current RIR, adopts the projected phases,
    and takes an Adam step on ``C + R`` evaluated at the projected RIR. The
    projection's correction is held constant within the step, so gradients
    pass through the unprojected parameterization. Parameters are clamped to
    the constraint box after every step. Returns ``(params, trace)`` where
    ``trace`` lists ``(C, R)`` per iteration.
    """
    n_its = opt_cfg.n_its if n_its is None else n_its
    if n_its < 0:
        raise ValueError("n_its must be >= 0")
    if not opt_cfg.persist_moments:
        state.reset()
    x_hat = x_hat.detach()
    trace = []
    for _ in range(n_its):
        offset = None
        if opt_cfg.project_rir:
            p, offset = _write_back(p, op_cfg)
        q = p.clone().requires_grad_()
        total, c, r = rir_objective(q, x_hat, y, sigma, op_cfg, comp, opt_cfg.regularizer, generator, offset)
        grads = torch.autograd.grad(total, q.tensors())
        trace.append((c.item(), r.item()))
        p = adam_step(state, q, RirParams(*grads))
        p = project_params(p, opt_cfg.weight_db_range, opt_cfg.decay_range)
    if opt_cfg.project_rir and n_its:
        p, _ = _write_back(p, op_cfg)
    return p, trace


def _write_back(p: RirParams, op_cfg: OperatorConfig):
    """Give ``p`` the phases of its projection; return it with the remaining magnitude correction."""
    with torch.no_grad():
        H_bar = apply_projection(assemble_rir(p, op_cfg), op_cfg)
        p = RirParams(p.weights_db, p.decays, torch.angle(H_bar))
        return p, H_bar - pin_direct_path(assemble_rir(p, op_cfg), op_cfg)
