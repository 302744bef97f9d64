import math

import numpy as np
import pytest
import torch
from oracles import triple_loop
from scipy.signal import fftconvolve

from blindderev.operator import (
    BandLayout,
    OperatorConfig,
    RirParams,
    apply_operator,
    apply_projection,
    assemble_rir,
    impulse_response,
    magnitude_from_params,
    min_phase_project,
    operator_gradients,
    operator_output_length,
    pin_direct_path,
    rir_from_subbands,
    subband_convolve,
    subbands_from_rir,
    surrogate_subbands,
)

CFG = OperatorConfig()


def test_subband_convolve_matches_loops():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((7, 5)) + 1j * rng.standard_normal((7, 5))
    H = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
    got = subband_convolve(torch.from_numpy(X), torch.from_numpy(H)).numpy()
    np.testing.assert_allclose(got, triple_loop(X, H), rtol=1e-12, atol=1e-12)


def test_subband_convolve_bin_mismatch():
    with pytest.raises(ValueError, match="bin mismatch"):
        subband_convolve(torch.zeros(3, 4, dtype=torch.complex128), torch.zeros(2, 5, dtype=torch.complex128))


def test_default_band_layout():
    layout = BandLayout.default()
    assert layout.n_bands == 26
    assert layout.centers[0] == pytest.approx(125 * 1024 / 16000)
    assert layout.centers[-1] == pytest.approx(512)


def test_magnitudes_at_band_centres_follow_decay():
    cfg = OperatorConfig(n_frames=6)
    p = RirParams.initial(cfg)
    p.weights_db = torch.linspace(0, 20, cfg.n_bands, dtype=torch.float64)
    p.decays = torch.linspace(0.5, 3, cfg.n_bands, dtype=torch.float64)
    A = magnitude_from_params(p, cfg)
    for b, c in enumerate(cfg.band_layout.centers):
        if float(c).is_integer():
            k = int(c)
            expect = 10 ** (p.weights_db[b] / 20) * torch.exp(-p.decays[b] * torch.arange(6.0, dtype=torch.float64))
            torch.testing.assert_close(A[:, k], expect, rtol=1e-12, atol=0)


def test_edge_bins_copy_nearest_band():
    cfg = OperatorConfig(n_frames=3)
    p = RirParams.initial(cfg, weight_db=6.0, decay=1.0)
    A = magnitude_from_params(p, cfg)
    torch.testing.assert_close(A[:, 0], A[:, 8])


def test_block_subbands_give_exact_convolution():
    rng = np.random.default_rng(2)
    h = rng.standard_normal(CFG.rir_length) * np.exp(-np.arange(CFG.rir_length) / 800)
    x = rng.standard_normal(4000)
    y = apply_operator(torch.from_numpy(x), subbands_from_rir(torch.from_numpy(h), CFG), CFG).numpy()
    ref = fftconvolve(x, h)
    assert len(y) == operator_output_length(4000, CFG)
    n = min(len(y), len(ref))
    assert np.max(np.abs(y[:n] - ref[:n])) / np.max(np.abs(ref)) < 1e-10


def test_rir_transform_round_trip_and_impulse_response():
    h = torch.randn(CFG.rir_length, dtype=torch.float64)
    H = subbands_from_rir(h, CFG)
    torch.testing.assert_close(rir_from_subbands(H, CFG), h, atol=1e-12, rtol=0)
    torch.testing.assert_close(impulse_response(H, CFG), h, atol=1e-10, rtol=0)


def test_min_phase_reflects_zero_inside_unit_circle():
    # 0.5 + z^-1 has its zero at -2; the minimum-phase equivalent is 1 + 0.5 z^-1.
    h = torch.zeros(64, dtype=torch.float64)
    h[:2] = torch.tensor([0.5, 1.0])
    m = min_phase_project(h)
    expect = torch.zeros(64, dtype=torch.float64)
    expect[:2] = torch.tensor([1.0, 0.5])
    torch.testing.assert_close(m, expect, atol=1e-9, rtol=0)


def test_min_phase_keeps_magnitude_and_is_front_loaded():
    h = torch.randn(512, dtype=torch.float64) * torch.exp(-torch.arange(512.0, dtype=torch.float64) / 60)
    m = min_phase_project(h)
    torch.testing.assert_close(torch.fft.fft(m).abs(), torch.fft.fft(h).abs(), rtol=1e-6, atol=1e-9)
    # Minimum phase maximises partial energy at every delay. The cepstral
    # construction aliases on a finite grid, so check on an 8x grid.
    m8 = min_phase_project(h, n_fft=8 * 512)
    h8 = torch.nn.functional.pad(h, (0, 7 * 512))
    slack = 1e-4 * h.pow(2).sum()
    assert torch.all(torch.cumsum(m8**2, 0) >= torch.cumsum(h8**2, 0) - slack)


@pytest.mark.parametrize("bad", [torch.zeros(0), torch.zeros(10)])
def test_min_phase_rejects_degenerate_input(bad):
    with pytest.raises(ValueError):
        min_phase_project(bad)


def test_projection_unit_direct_path_and_idempotent():
    p = RirParams.initial(CFG, weight_db=3.0, decay=1.5, seed=4)
    H1 = apply_projection(assemble_rir(p, CFG), CFG)
    h1 = rir_from_subbands(H1, CFG)
    assert h1[0].item() == pytest.approx(1.0, abs=1e-12)
    H2 = apply_projection(H1, CFG)
    assert (torch.linalg.norm(H2 - H1) / torch.linalg.norm(H1)).item() < 1e-6


def test_projected_operator_is_lti():
    p = RirParams.initial(CFG, weight_db=2.0, decay=1.0, seed=9)
    H = apply_projection(assemble_rir(p, CFG), CFG)
    h = impulse_response(H, CFG).numpy()
    x = np.random.default_rng(3).standard_normal(3000)
    y = apply_operator(torch.from_numpy(x), H, CFG).numpy()
    ref = fftconvolve(x, h)[: len(y)]
    assert np.max(np.abs(y - ref)) / np.max(np.abs(ref)) < 1e-10


def test_gradients_finite_when_magnitudes_underflow():
    p = RirParams.initial(CFG, weight_db=0.0, decay=28.0)
    x = torch.randn(2000, dtype=torch.float64)
    out_len = operator_output_length(2000, CFG)
    gx, gp = operator_gradients(x, p, CFG, torch.randn(out_len, dtype=torch.float64))
    for t in (gx, *gp.tensors()):
        assert torch.isfinite(t).all()


def test_operator_gradients_match_finite_differences():
    cfg = OperatorConfig(n_frames=4)
    p = RirParams.initial(cfg, weight_db=1.0, decay=0.7, seed=1)
    x = torch.randn(700, dtype=torch.float64)
    u = torch.randn(operator_output_length(700, cfg), dtype=torch.float64)
    gx, gp = operator_gradients(x, p, cfg, u)

    def f(xx, pp):
        return float(apply_operator(xx, assemble_rir(pp, cfg), cfg) @ u)

    eps = 1e-6
    for i in (0, 350, 699):
        d = torch.zeros_like(x)
        d[i] = eps
        fd = (f(x + d, p) - f(x - d, p)) / (2 * eps)
        assert gx[i].item() == pytest.approx(fd, rel=1e-5, abs=1e-8)
    for name, idx in (("weights_db", (3,)), ("decays", (10,)), ("phases", (1, 40))):
        plus, minus = p.clone(), p.clone()
        getattr(plus, name)[idx] += eps
        getattr(minus, name)[idx] -= eps
        fd = (f(x, plus) - f(x, minus)) / (2 * eps)
        assert getattr(gp, name)[idx].item() == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_params_validation():
    p = RirParams.initial(CFG)
    p.validate(CFG)
    p.decays = torch.tensor([math.nan] * CFG.n_bands, dtype=torch.float64)
    with pytest.raises(ValueError, match="non-finite"):
        p.validate(CFG)
    with pytest.raises(ValueError):
        RirParams.initial(OperatorConfig(n_frames=5)).validate(CFG)


def test_identity_and_delay_kernels():
    X = torch.randn(6, 5, dtype=torch.complex128)
    H = torch.zeros(3, 5, dtype=torch.complex128)
    H[0] = 1
    Y = subband_convolve(X, H)
    torch.testing.assert_close(Y[:6], X)
    assert torch.all(Y[6:].abs() < 1e-14)
    H = torch.zeros(3, 5, dtype=torch.complex128)
    H[2] = 1
    torch.testing.assert_close(subband_convolve(X, H)[2:8], X)


def test_two_band_log_linear_interpolation():
    cfg = OperatorConfig(n_frames=4, band_layout=BandLayout((0.0, 512.0)))
    p = RirParams(
        weights_db=torch.tensor([0.0, 20 * 2 / math.log(10)], dtype=torch.float64),  # w = (1, e^2)
        decays=torch.tensor([1.0, 1.0], dtype=torch.float64),
        phases=torch.zeros(4, 513, dtype=torch.float64),
    )
    A = magnitude_from_params(p, cfg)
    n = torch.arange(4.0, dtype=torch.float64)
    torch.testing.assert_close(A[:, 256], torch.exp(1 - n), rtol=1e-12, atol=0)


def test_identity_params_pass_signal_through():
    cfg = OperatorConfig(n_frames=5)
    p = RirParams.initial(cfg, weight_db=0.0, decay=28.0)
    p.phases = torch.zeros_like(p.phases)
    x = torch.randn(3000, dtype=torch.float64)
    y = apply_operator(x, p, cfg)
    assert (torch.linalg.norm(y[:3000] - x) / torch.linalg.norm(x)).item() < 1e-4


def test_assembled_magnitude_and_phase():
    p = RirParams.initial(CFG, weight_db=5.0, decay=0.8, seed=3)
    H = assemble_rir(p, CFG)
    torch.testing.assert_close(H.abs(), magnitude_from_params(p, CFG), rtol=1e-12, atol=1e-300)
    p.phases = torch.full_like(p.phases, math.pi)
    torch.testing.assert_close(assemble_rir(p, CFG).real, -magnitude_from_params(p, CFG))


def test_projection_keeps_impulse():
    H = subbands_from_rir(torch.tensor([1.0], dtype=torch.float64), CFG)
    torch.testing.assert_close(apply_projection(H, CFG), H, atol=1e-6, rtol=0)


def test_pinning_sets_only_the_first_sample():
    cfg = OperatorConfig(n_frames=8)
    h = torch.randn(cfg.rir_length, dtype=torch.float64)
    got = rir_from_subbands(pin_direct_path(subbands_from_rir(h, cfg), cfg), cfg)
    assert got[0].item() == pytest.approx(1.0, abs=1e-12)
    torch.testing.assert_close(got[1:], h[1:], atol=1e-12, rtol=0)


def test_surrogate_with_offset_reproduces_projection():
    cfg = OperatorConfig(n_frames=8)
    p = RirParams.initial(cfg, weight_db=6.0, decay=1.0, seed=4)
    torch.testing.assert_close(surrogate_subbands(p, cfg), assemble_rir(p, cfg))
    H_bar = apply_projection(assemble_rir(p, cfg), cfg)
    offset = H_bar - pin_direct_path(assemble_rir(p, cfg), cfg)
    torch.testing.assert_close(surrogate_subbands(p, cfg, offset), H_bar, atol=1e-12, rtol=0)
    # A uniform gain cannot move the pinned direct path.
    q = p.clone().requires_grad_()
    first = rir_from_subbands(surrogate_subbands(q, cfg, offset), cfg)[0]
    (g,) = torch.autograd.grad(first, [q.weights_db])
    assert g.abs().max().item() < 1e-12
