import numpy as np
import pytest
import torch

from blindderev.harness import SyntheticRirSpec, generate_rir, lsd, reverberate, si_sdr, speech_proxy
from blindderev.signal import SizingError, StftConfig, stft
from blindderev.wpe import WpeConfig, wpe_dereverb, wpe_spectrogram


def test_zero_input_gives_zero_output():
    out = wpe_dereverb(torch.zeros(16000, dtype=torch.float64))
    assert out.shape == (16000,) and torch.all(out == 0)


@pytest.mark.parametrize("n", [8000, 12345])
def test_output_length_matches_input(n):
    assert wpe_dereverb(speech_proxy(n, seed=1)).shape == (n,)


def test_too_short_for_filter():
    with pytest.raises(SizingError):
        wpe_dereverb(torch.randn(3000, dtype=torch.float64))


def test_config_validation():
    for kw in (dict(taps=0), dict(delay=-1), dict(iterations=-1)):
        with pytest.raises(ValueError):
            WpeConfig(**kw)


def test_anechoic_input_keeps_waveform():
    x = speech_proxy(64000, seed=4)
    assert si_sdr(wpe_dereverb(x), x) > 20.0


@pytest.mark.xfail(
    strict=True,
    reason="50 taps fitted per bin on a few hundred frames remove a random share of each bin's energy; "
    "per-bin log ratios stay above 1 dB even at 20 s",
)
def test_anechoic_lsd_below_one_db():
    x = speech_proxy(64000, seed=4)
    assert lsd(wpe_dereverb(x), x) < 1.0


def test_bins_are_processed_independently():
    y = reverberate(speech_proxy(16000, seed=2), generate_rir(SyntheticRirSpec(seed=3, decay=(0.5, 0.6)))[0])
    Y = stft(y, StftConfig()).data
    Y[:, 40] = 0
    out = wpe_spectrogram(Y)
    assert torch.all(out[:, 40] == 0)
    ref = wpe_spectrogram(stft(y, StftConfig()).data)
    torch.testing.assert_close(out[:, 41], ref[:, 41])


def test_iterations_do_not_raise_objective():
    for seed in range(3):
        y = reverberate(speech_proxy(16000, seed=seed), generate_rir(SyntheticRirSpec(seed=10 + seed, decay=(0.5, 0.6)))[0])
        _, obj = wpe_spectrogram(stft(y, StftConfig()).data, WpeConfig(iterations=6), return_objective=True)
        assert len(obj) == 6
        assert all(b <= a + 1e-6 * abs(a) for a, b in zip(obj, obj[1:]))


def test_rank_one_statistics_do_not_crash():
    # A pure tone makes every correlation matrix rank one.
    t = np.arange(16000)
    y = torch.from_numpy(0.1 * np.sin(2 * np.pi * 1000 * t / 16000))
    out = wpe_dereverb(y)
    assert torch.isfinite(out).all()


def test_wpe_reduces_late_reverberation():
    x = speech_proxy(32000, seed=7)
    y = reverberate(x, generate_rir(SyntheticRirSpec(seed=8, decay=(0.5, 0.6)))[0])
    assert lsd(wpe_dereverb(y), x) < lsd(y, x)
