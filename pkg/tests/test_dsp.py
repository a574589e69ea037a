import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probpit import dsp
from probpit.dsp import (
    MagSpectrogram,
    SignalBuffer,
    SourceKind,
    Spectrogram,
    StftConfig,
    istft,
    mix_at_sir,
    reconstruct_with_mixture_phase,
    stft,
    synth_source,
)
from probpit.errors import ConfigError, DataError, DegenerateInputError, ShapeError
from probpit.metrics import sdr_sir_sar


def _interior(cfg, n):
    return slice(cfg.frame_len, n - cfg.frame_len)


# ---------------------------------------------------------------------------
# types and configuration
# ---------------------------------------------------------------------------


class TestTypes:
    def test_signal_rejects_nan(self):
        with pytest.raises(DataError):
            SignalBuffer([0.0, np.nan])

    def test_signal_rejects_empty(self):
        with pytest.raises(DataError):
            SignalBuffer([])

    def test_signal_rejects_bad_rate(self):
        with pytest.raises(ConfigError):
            SignalBuffer([0.0], sample_rate=0)

    def test_hop_must_be_half_frame(self):
        with pytest.raises(ConfigError, match="half"):
            StftConfig(frame_len=256, hop=64, fft_size=256)

    def test_fft_size_power_of_two(self):
        with pytest.raises(ConfigError):
            StftConfig(frame_len=200, hop=100, fft_size=300)

    def test_window_positive(self):
        assert np.all(StftConfig().window > 0)
        assert StftConfig().window.size == 256

    def test_wideband_config(self):
        cfg = StftConfig.wideband(16000)
        assert (cfg.frame_len, cfg.hop, cfg.fft_size, cfg.n_bins) == (512, 256, 512, 257)

    def test_magnitude_rejects_negative(self):
        with pytest.raises(DataError):
            MagSpectrogram(-np.ones((3, 2)))


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


class TestStft:
    @pytest.mark.parametrize("frame, bins", [(512, 257), (256, 129)])
    def test_bin_count(self, frame, bins, rng):
        cfg = StftConfig(frame_len=frame, hop=frame // 2, fft_size=frame)
        spec = stft(SignalBuffer(rng.standard_normal(16000)), cfg)
        assert spec.shape[0] == bins

    @pytest.mark.parametrize("n", [256, 257, 383, 384, 1000, 16000])
    def test_frame_count(self, n):
        cfg = StftConfig()
        spec = stft(SignalBuffer(np.ones(n)), cfg)
        assert spec.shape == (129, (n - 256) // 128 + 1)

    def test_zero_signal(self):
        spec = stft(SignalBuffer(np.zeros(1000)))
        assert np.all(spec.bins == 0)

    def test_too_short(self):
        with pytest.raises(DataError, match="shorter than one frame"):
            stft(SignalBuffer(np.ones(255)))

    def test_rate_mismatch(self):
        with pytest.raises(ConfigError):
            stft(SignalBuffer(np.ones(1000), 8000), StftConfig())

    def test_frames_match_naive_dft(self, rng):
        cfg = StftConfig(frame_len=16, hop=8, fft_size=32, sample_rate=1000)
        x = rng.standard_normal(40)
        spec = stft(SignalBuffer(x, 1000), cfg).bins
        w = cfg.window
        for m in range(spec.shape[1]):
            frame = x[m * 8 : m * 8 + 16] * w
            for k in range(cfg.n_bins):
                naive = sum(frame[j] * cmath.exp(-2j * math.pi * k * j / 32) for j in range(16))
                assert abs(spec[k, m] - naive) < 1e-12

    def test_bin_centred_sinusoid_leakage(self):
        cfg = StftConfig()
        k0 = 20
        n = np.arange(4096)
        x = np.cos(2 * np.pi * k0 * n / cfg.fft_size)
        power = np.abs(stft(SignalBuffer(x), cfg).bins) ** 2
        peak = power.max(axis=0)
        assert np.all(power.argmax(axis=0) == k0)
        off = np.delete(power, [k0 - 1, k0, k0 + 1], axis=0).max(axis=0)
        assert np.all(10 * np.log10(off / peak + 1e-300) < -30)

        # leakage oracle: the window's own DFT by direct summation, shifted to k0
        w = cfg.window
        win_dft = np.array([abs(sum(w[j] * cmath.exp(-2j * math.pi * d * j / 256) for j in range(256))) for d in range(-5, 6)])
        assert np.allclose(np.sqrt(power[k0 - 5 : k0 + 6, 3]), 0.5 * win_dft, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(
        a=st.floats(-10, 10),
        b=st.floats(-10, 10),
        seed=st.integers(0, 2**31),
    )
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(900)
        y = rng.standard_normal(900)
        lhs = stft(SignalBuffer(a * x + b * y)).bins
        rhs = a * stft(SignalBuffer(x)).bins + b * stft(SignalBuffer(y)).bins
        scale = max(np.abs(rhs).max(), 1e-300)
        assert np.abs(lhs - rhs).max() <= 1e-9 * scale


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


class TestIstft:
    def test_sinusoid_round_trip(self):
        x = np.sin(2 * np.pi * 440 * np.arange(8000) / 16000)
        y = istft(stft(SignalBuffer(x))).samples
        cfg = StftConfig()
        inner = _interior(cfg, y.size)
        assert np.abs(y[inner] - x[inner]).max() < 1e-6

    def test_gaussian_three_seconds(self, rng):
        x = rng.standard_normal(48000)
        y = istft(stft(SignalBuffer(x)), length=x.size).samples
        cfg = StftConfig()
        covered = cfg.n_samples(cfg.n_frames(x.size))
        inner = _interior(cfg, covered)
        err = np.linalg.norm(y[inner] - x[inner]) / np.linalg.norm(x[inner])
        assert err < 1e-6

    def test_zero_spectrogram(self):
        out = istft(Spectrogram(np.zeros((129, 10), complex)))
        assert np.all(out.samples == 0) and len(out) == 9 * 128 + 256

    def test_length_argument(self, rng):
        x = rng.standard_normal(1000)
        spec = stft(SignalBuffer(x))
        assert len(istft(spec, length=1000)) == 1000
        assert len(istft(spec, length=500)) == 500

    def test_inconsistent_config(self):
        with pytest.raises(ConfigError):
            istft(Spectrogram(np.zeros((100, 3), complex), StftConfig()))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), frames=st.integers(4, 40))
    def test_round_trip_property(self, seed, frames):
        cfg = StftConfig()
        x = np.random.default_rng(seed).uniform(-1, 1, cfg.n_samples(frames))
        y = istft(stft(SignalBuffer(x), cfg)).samples
        inner = _interior(cfg, x.size)
        assert np.linalg.norm(y[inner] - x[inner]) <= 1e-6 * np.linalg.norm(x[inner])


class TestMixturePhase:
    def test_identity_magnitude_returns_mixture(self, rng):
        x = rng.standard_normal(4000)
        spec = stft(SignalBuffer(x))
        y = reconstruct_with_mixture_phase(spec.magnitude(), spec, length=x.size).samples
        inner = _interior(spec.config, spec.config.n_samples(spec.shape[1]))
        assert np.abs(y[inner] - x[inner]).max() < 1e-9

    def test_zero_magnitude_is_silence(self, rng):
        spec = stft(SignalBuffer(rng.standard_normal(4000)))
        y = reconstruct_with_mixture_phase(MagSpectrogram(np.zeros(spec.shape)), spec)
        assert np.all(y.samples == 0)

    def test_shape_mismatch(self, rng):
        spec = stft(SignalBuffer(rng.standard_normal(4000)))
        with pytest.raises(ShapeError):
            reconstruct_with_mixture_phase(MagSpectrogram(np.zeros((129, 3))), spec)

    def test_oracle_magnitude_beats_mixture(self):
        x1 = synth_source("harmonic", 1.0, 1)
        x2 = synth_source("chirp", 1.0, 2)
        mixture, (s1, s2) = mix_at_sir(x1, x2, 10.0)
        spec = stft(mixture)
        est = reconstruct_with_mixture_phase(stft(s1).magnitude(), spec, length=len(mixture))
        improved = sdr_sir_sar(est, [s1, s2], 0).sdr_db
        raw = sdr_sir_sar(mixture, [s1, s2], 0).sdr_db
        assert improved > raw


class TestMixAtSir:
    def test_equal_power_zero_db(self, rng):
        t = SignalBuffer(rng.standard_normal(1000))
        i = SignalBuffer(t.samples[::-1].copy())
        _, (_, scaled) = mix_at_sir(t, i, 0.0)
        np.testing.assert_allclose(scaled.samples, i.samples, rtol=1e-12)

    def test_equal_power_five_db(self, rng):
        t = SignalBuffer(rng.standard_normal(1000))
        i = SignalBuffer(t.samples[::-1].copy())
        _, (_, scaled) = mix_at_sir(t, i, 5.0)
        assert scaled.power / i.power == pytest.approx(10 ** (-0.5), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        sir=st.floats(-20, 20),
        seed=st.integers(0, 2**31),
        n_t=st.integers(1, 400),
        n_i=st.integers(1, 400),
        gain=st.floats(1e-3, 1e3),
    )
    def test_measured_sir(self, sir, seed, n_t, n_i, gain):
        rng = np.random.default_rng(seed)
        t = SignalBuffer(rng.standard_normal(n_t))
        i = SignalBuffer(gain * rng.standard_normal(n_i))
        mixture, (st_, si) = mix_at_sir(t, i, sir)
        assert len(mixture) == max(n_t, n_i)
        assert abs(dsp.sir_db(st_.samples, si.samples) - sir) < 1e-9
        assert np.array_equal(mixture.samples, st_.samples + si.samples)

    def test_zero_padding_of_shorter(self):
        _, (t, i) = mix_at_sir(SignalBuffer(np.ones(10)), SignalBuffer(np.ones(4)), 0.0)
        assert len(t) == len(i) == 10
        assert np.all(i.samples[4:] == 0)

    def test_zero_power_interferer(self):
        with pytest.raises(DegenerateInputError, match="zero power"):
            mix_at_sir(SignalBuffer(np.ones(10)), SignalBuffer(np.zeros(10)), 0.0)

    def test_nan_sir(self):
        with pytest.raises(DataError):
            mix_at_sir(SignalBuffer(np.ones(10)), SignalBuffer(np.ones(10)), float("nan"))

    def test_rate_mismatch(self):
        with pytest.raises(ConfigError):
            mix_at_sir(SignalBuffer(np.ones(10), 8000), SignalBuffer(np.ones(10), 16000), 0.0)


def _max_normalised_xcorr(a, b):
    n = a.size + b.size
    c = np.fft.irfft(np.fft.rfft(a, n) * np.conj(np.fft.rfft(b, n)), n)
    return np.abs(c).max() / (np.linalg.norm(a) * np.linalg.norm(b))


class TestSynthSource:
    @pytest.mark.parametrize("kind", list(SourceKind))
    def test_deterministic(self, kind):
        a = synth_source(kind, 0.5, 7)
        b = synth_source(kind, 0.5, 7)
        assert a.samples.tobytes() == b.samples.tobytes()

    @pytest.mark.parametrize("kind", list(SourceKind))
    @pytest.mark.parametrize("seed", [0, 1, 99])
    def test_rms(self, kind, seed):
        x = synth_source(kind, 0.7, seed).samples
        assert abs(np.sqrt(np.mean(x**2)) - 0.1) < 1e-9

    @pytest.mark.parametrize("kind", list(SourceKind))
    def test_distinct_seeds_decorrelated(self, kind):
        for s in range(4):
            a = synth_source(kind, 1.0, s).samples
            b = synth_source(kind, 1.0, s + 100).samples
            assert _max_normalised_xcorr(a, b) < 0.5

    def test_nonpositive_duration(self):
        with pytest.raises(ValueError):
            synth_source("chirp", 0.0, 1)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth_source("speech", 1.0, 1)


class TestWav:
    def test_round_trip(self, tmp_path):
        x = synth_source("am_noise", 0.25, 3)
        dsp.write_wav(tmp_path / "a.wav", x)
        y = dsp.read_wav(tmp_path / "a.wav")
        assert y.sample_rate == 16000
        assert np.array_equal(y.samples, dsp.quantize_pcm16(x.samples))

    def test_header_rate(self, tmp_path):
        dsp.write_wav(tmp_path / "b.wav", SignalBuffer(np.zeros(10), 8000))
        assert dsp.read_wav(tmp_path / "b.wav").sample_rate == 8000

    def test_little_endian_pcm(self, tmp_path):
        dsp.write_wav(tmp_path / "c.wav", SignalBuffer([0.5, -0.25]))
        raw = (tmp_path / "c.wav").read_bytes()[-4:]
        assert raw == np.array([16384, -8192], dtype="<i2").tobytes()

    def test_clipping_rejected(self, tmp_path):
        with pytest.raises(DataError):
            dsp.write_wav(tmp_path / "d.wav", SignalBuffer([1.5]))

    def test_garbage_file(self, tmp_path):
        (tmp_path / "e.wav").write_bytes(b"not a wav")
        with pytest.raises(DataError):
            dsp.read_wav(tmp_path / "e.wav")
