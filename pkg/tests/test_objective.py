import math

import pytest
import torch

from blindderev.objective import (
    CompressionConfig,
    RegularizerSchedule,
    compress,
    constant_weight,
    cost,
    likelihood_weight,
    noise_regularizer,
    sigma_prime,
)
from blindderev.operator import OperatorConfig, RirParams
from blindderev.signal import StftConfig, num_frames

OP = OperatorConfig(n_frames=8)


def test_compress_examples():
    S = torch.tensor([8.0 + 0j, -8.0 + 0j, 0j, 3 + 4j], dtype=torch.complex128)
    out = compress(S, 2 / 3)
    torch.testing.assert_close(out[:2], torch.tensor([4.0 + 0j, -4.0 + 0j], dtype=torch.complex128))
    assert out[2] == 0
    assert out[3].abs().item() == pytest.approx(5 ** (2 / 3))
    assert torch.angle(out[3]).item() == pytest.approx(math.atan2(4, 3))
    torch.testing.assert_close(compress(S, 1.0), S)


def test_compression_exponent_range():
    for bad in (0.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            CompressionConfig(exponent=bad)


def test_cost_of_impulse_against_silence():
    L = 512
    y = torch.zeros(L, dtype=torch.float64)
    y[0] = 1
    # The impulse lands in four frames at Hann positions 384, 256, 128, 0.
    w = [0.5, 1.0, 0.5, 0.0]
    for e in (1.0, 2 / 3):
        expect = 513 * sum(v ** (2 * e) for v in w) / num_frames(L, StftConfig())
        assert cost(y, torch.zeros_like(y), CompressionConfig(exponent=e)).item() == pytest.approx(expect, rel=1e-12)


def test_cost_basic_properties():
    a, b = torch.randn(2, 3000, dtype=torch.float64)
    assert cost(a, a).item() == 0
    assert cost(a, b).item() == pytest.approx(cost(b, a).item(), rel=1e-12)
    assert cost(a, b).item() > 0
    # The shorter signal is zero padded.
    assert cost(a, a[:2000]).item() == pytest.approx(cost(a, torch.cat([a[:2000], torch.zeros(1000, dtype=torch.float64)])).item())


def test_cost_gradient_matches_finite_differences():
    y, x = torch.randn(2, 1500, dtype=torch.float64)
    x.requires_grad_(True)
    (g,) = torch.autograd.grad(cost(y, x), x)
    eps = 1e-6
    for i in (3, 700, 1499):
        d = torch.zeros(1500, dtype=torch.float64)
        d[i] = eps
        with torch.no_grad():
            fd = (cost(y, x + d) - cost(y, x - d)).item() / (2 * eps)
        assert g[i].item() == pytest.approx(fd, rel=1e-5)


def test_likelihood_weight_examples():
    n = 400
    assert likelihood_weight(math.sqrt(n), n) == pytest.approx(0.5, rel=1e-8)
    assert math.isfinite(likelihood_weight(0.0, n))
    assert likelihood_weight(0.0, n) == pytest.approx(0.5 * 20 / 1e-8)
    assert likelihood_weight(6.0, n) == pytest.approx(likelihood_weight(3.0, n) / 2, rel=1e-8)
    with pytest.raises(ValueError):
        likelihood_weight(-1.0, n)
    assert constant_weight(0.1) == pytest.approx(50.0)
    # Halving the noise level doubles the weight.
    assert likelihood_weight(3.0, n, sigma=0.05) == pytest.approx(2 * likelihood_weight(3.0, n, sigma=0.1), rel=1e-12)
    with pytest.raises(ValueError):
        likelihood_weight(3.0, n, sigma=0.0)


@pytest.mark.parametrize("sigma,expect", [(0.5, 1e-2), (1e-4, 5e-4), (5e-3, 5e-3)])
def test_sigma_prime(sigma, expect):
    assert sigma_prime(sigma) == expect


def test_regularizer_schedule_validation():
    with pytest.raises(ValueError):
        RegularizerSchedule(sigma_min=1e-2, sigma_max=1e-3)
    with pytest.raises(ValueError):
        RegularizerSchedule(sigma_min=0.0)


def test_regularizer_zero_noise_and_determinism():
    p = RirParams.initial(OP, weight_db=2.0, decay=1.0).requires_grad_()
    r0 = noise_regularizer(p, 0.0, OP)
    assert r0.item() == 0
    grads = torch.autograd.grad(r0, p.tensors(), allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)
    a = noise_regularizer(p, 1e-2, OP, seed=3).item()
    b = noise_regularizer(p, 1e-2, OP, seed=3).item()
    assert a == b


def test_regularizer_grows_with_sigma():
    p = RirParams.initial(OP, weight_db=2.0, decay=1.0)
    gen = torch.Generator().manual_seed(0)
    means = []
    for s in (5e-4, 2e-3, 1e-2):
        vals = [noise_regularizer(p, s, OP, generator=gen).item() for _ in range(40)]
        means.append(sum(vals) / len(vals))
    assert means[0] < means[1] < means[2]


def test_regularizer_gradient_with_frozen_noise():
    p = RirParams.initial(OP, weight_db=2.0, decay=1.0, seed=2)
    q = p.clone().requires_grad_()
    r = noise_regularizer(q, 1e-2, OP, seed=11)
    gw, ga, gp = torch.autograd.grad(r, q.tensors())

    # With frozen noise the target is fixed; freeze it explicitly by evaluating
    # the first term against the same target the analytic pass used.
    from blindderev.objective import compress as comp
    from blindderev.operator import assemble_rir, impulse_response
    from blindderev.signal import stft

    h0 = impulse_response(assemble_rir(p, OP), OP)
    v = torch.randn(h0.shape, generator=torch.Generator().manual_seed(11), dtype=torch.float64)
    B = comp(stft(h0 + 1e-2 * v, StftConfig()).data, 2 / 3)

    def frozen(pp):
        A = comp(stft(impulse_response(assemble_rir(pp, OP), OP), StftConfig()).data, 2 / 3)
        return ((A - B).abs() ** 2).sum().item() / OP.n_frames

    eps = 1e-6
    for name, idx, g in (("weights_db", 4, gw), ("decays", 7, ga), ("phases", (0, 30), gp)):
        plus, minus = p.clone(), p.clone()
        getattr(plus, name)[idx] += eps
        getattr(minus, name)[idx] -= eps
        fd = (frozen(plus) - frozen(minus)) / (2 * eps)
        assert g[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-9)
