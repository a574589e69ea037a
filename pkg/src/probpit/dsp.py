"""Time-frequency front end and controlled-SIR mixture construction.

Analysis uses a periodic Hamming window at 50% overlap. Hamming at 50% is
not constant-overlap-add, so synthesis is weighted overlap-add normalised
per sample by the overlapped sum of squared windows; this reconstructs
any covered sample exactly (up to float rounding).
"""

from __future__ import annotations

import enum
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, ShapeError

DEFAULT_SAMPLE_RATE = 16000
TARGET_RMS = 0.1
PCM16_SCALE = 32768.0


@dataclass(frozen=True, eq=False)
class SignalBuffer:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if x.size < 1:
            raise DataError("signal must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise DataError("signal contains NaN or Inf samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be a positive integer, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    def __array__(self, dtype=None, copy=None):
        return self.samples if dtype is None else self.samples.astype(dtype)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2))


def periodic_hamming(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters. The default gives 129 frequency bins."""

    frame_len: int = 256
    hop: int = 128
    fft_size: int = 256
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.frame_len < 2 or self.hop < 1:
            raise ConfigError("frame_len must be >= 2 and hop >= 1")
        if 2 * self.hop != self.frame_len:
            raise ConfigError(f"hop must be half the frame length, got frame {self.frame_len}, hop {self.hop}")
        n = self.fft_size
        if n < self.frame_len or n & (n - 1):
            raise ConfigError(f"fft_size must be a power of two >= frame_len, got {n}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")

    @classmethod
    def wideband(cls, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "StftConfig":
        """32 ms frames / 16 ms shift at ``sample_rate`` (257 bins at 16 kHz)."""
        frame = int(round(0.032 * sample_rate))
        n_fft = 1 << (frame - 1).bit_length()
        return cls(frame_len=frame, hop=frame // 2, fft_size=n_fft, sample_rate=sample_rate)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return periodic_hamming(self.frame_len)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise DataError(f"signal of {n_samples} samples is shorter than one frame ({self.frame_len})")
        return (n_samples - self.frame_len) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.frame_len


@dataclass(frozen=True, eq=False)
class Spectrogram:
    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.complex128)
        if b.ndim != 2 or b.shape[1] < 1:
            raise ShapeError(f"spectrogram must be (bins, frames) with >= 1 frame, got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise DataError("spectrogram contains non-finite entries")
        object.__setattr__(self, "bins", b)

    @property
    def shape(self):
        return self.bins.shape

    def magnitude(self) -> "MagSpectrogram":
        return MagSpectrogram(np.abs(self.bins))


@dataclass(frozen=True, eq=False)
class MagSpectrogram:
    mags: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mags, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError(f"magnitude spectrogram must be 2-D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataError("magnitude spectrogram contains non-finite entries")
        if np.any(m < 0):
            raise DataError("magnitude spectrogram has negative entries")
        object.__setattr__(self, "mags", m)

    @property
    def shape(self):
        return self.mags.shape

    def __array__(self, dtype=None, copy=None):
        return self.mags if dtype is None else self.mags.astype(dtype)


def stft(signal: SignalBuffer, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig(sample_rate=signal.sample_rate)
    if signal.sample_rate != cfg.sample_rate:
        raise ConfigError(f"signal rate {signal.sample_rate} Hz does not match config rate {cfg.sample_rate} Hz")
    x = signal.samples
    n_frames = cfg.n_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[:: cfg.hop][:n_frames]
    spec = np.fft.rfft(frames * cfg.window, n=cfg.fft_size, axis=1)
    return Spectrogram(spec.T, cfg)


def istft(spec: Spectrogram, length: int | None = None) -> SignalBuffer:
    """Weighted overlap-add synthesis.

    ``length`` pads with zeros or truncates the output; by default the output
    covers exactly the framed region, ``(M - 1) * hop + frame_len`` samples.
    """
    cfg = spec.config
    n_bins, n_frames = spec.bins.shape
    if n_bins != cfg.n_bins:
        raise ConfigError(f"spectrogram has {n_bins} bins but config implies {cfg.n_bins}")
    win = cfg.window
    frames = np.fft.irfft(spec.bins.T, n=cfg.fft_size, axis=1)[:, : cfg.frame_len] * win
    n_out = cfg.n_samples(n_frames)
    out = np.zeros(n_out)
    norm = np.zeros(n_out)
    w2 = win**2
    for m in range(n_frames):
        start = m * cfg.hop
        out[start : start + cfg.frame_len] += frames[m]
        norm[start : start + cfg.frame_len] += w2
    covered = norm > 1e-12
    out[covered] /= norm[covered]
    if length is not None:
        out = out[:length] if length <= n_out else np.pad(out, (0, length - n_out))
    return SignalBuffer(out, cfg.sample_rate)


def reconstruct_with_mixture_phase(
    est_mag: MagSpectrogram, mixture: Spectrogram, length: int | None = None
) -> SignalBuffer:
    mags = np.asarray(est_mag, dtype=np.float64)
    if mags.shape != mixture.bins.shape:
        raise ShapeError(f"estimate shape {mags.shape} != mixture shape {mixture.bins.shape}")
    phase = np.exp(1j * np.angle(mixture.bins))
    return istft(Spectrogram(mags * phase, mixture.config), length=length)


def _pad_to(x: np.ndarray, n: int) -> np.ndarray:
    return x if x.size == n else np.pad(x, (0, n - x.size))


def sir_db(target: np.ndarray, interferer: np.ndarray) -> float:
    return float(10.0 * np.log10(np.mean(np.square(target)) / np.mean(np.square(interferer))))


def mix_at_sir(
    target: SignalBuffer, interferer: SignalBuffer, sir_db: float
) -> tuple[SignalBuffer, tuple[SignalBuffer, SignalBuffer]]:
    """Scale ``interferer`` so that target/interferer power is ``sir_db`` and sum.

    The shorter buffer is zero-padded to the longer one first. Returns the
    mixture and the (target, scaled interferer) pair used as supervision.
    """
    if target.sample_rate != interferer.sample_rate:
        raise ConfigError("target and interferer sample rates differ")
    if not np.isfinite(sir_db):
        raise DataError(f"SIR must be finite, got {sir_db}")
    n = max(len(target), len(interferer))
    t = _pad_to(target.samples, n)
    i = _pad_to(interferer.samples, n)
    p_t = np.mean(t**2)
    p_i = np.mean(i**2)
    if p_i == 0.0:
        raise DegenerateInputError("interferer has zero power; SIR scaling would divide by zero")
    if p_t == 0.0:
        raise DegenerateInputError("target has zero power; SIR is undefined")
    scale = np.sqrt(p_t / (p_i * 10.0 ** (sir_db / 10.0)))
    i = i * scale
    sr = target.sample_rate
    return SignalBuffer(t + i, sr), (SignalBuffer(t, sr), SignalBuffer(i, sr))


class SourceKind(str, enum.Enum):
    HARMONIC = "harmonic"
    AM_NOISE = "am_noise"
    CHIRP = "chirp"


def _slow_modulation(rng, t, n_terms=3, lo=0.3, hi=3.0):
    """Sum of a few random low-frequency sinusoids, unit peak amplitude."""
    freqs = rng.uniform(lo, hi, n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    amps = rng.uniform(0.5, 1.0, n_terms)
    mod = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    return mod / amps.sum()


def _syllable_envelope(rng, t):
    rate = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.2 + 0.8 * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + phase)) ** 2


def _harmonic(rng, t, sr):
    f0 = rng.uniform(90.0, 260.0) * np.exp(0.15 * _slow_modulation(rng, t))
    n_harm = int(min(30, (0.45 * sr) // f0.max()))
    tilt = rng.uniform(0.6, 1.2)
    formant = rng.uniform(400.0, 2500.0)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    x = np.zeros_like(t)
    for k in range(1, n_harm + 1):
        emphasis = 1.0 + 2.0 * np.exp(-0.5 * ((k * f0 - formant) / 300.0) ** 2)
        x += emphasis * k**-tilt * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return x * _syllable_envelope(rng, t)


def _am_noise(rng, t, sr):
    n = t.size
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    centre = rng.uniform(300.0, 3000.0)
    width = rng.uniform(100.0, 800.0)
    spec *= np.exp(-0.5 * ((freqs - centre) / width) ** 2)
    x = np.fft.irfft(spec, n=n)
    rate = rng.uniform(1.0, 6.0)
    env = 0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return x * (0.1 + env)


def _chirp(rng, t, sr):
    period = rng.uniform(0.3, 1.0)
    f_lo, f_hi = np.sort(rng.uniform(200.0, 3500.0, 2))
    if rng.random() < 0.5:
        f_lo, f_hi = f_hi, f_lo
    frac = np.mod(t + rng.uniform(0, period), period) / period
    inst = f_lo * (f_hi / f_lo) ** frac
    phase = 2 * np.pi * np.cumsum(inst) / sr
    x = np.sin(phase) + 0.3 * np.sin(2 * phase + rng.uniform(0, 2 * np.pi))
    return x * _syllable_envelope(rng, t)


_SYNTHS = {SourceKind.HARMONIC: _harmonic, SourceKind.AM_NOISE: _am_noise, SourceKind.CHIRP: _chirp}


def synth_source(
    kind: SourceKind | str, duration_s: float, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> SignalBuffer:
    """Deterministic synthetic stand-in for a speech utterance, RMS-normalised to 0.1."""
    kind = SourceKind(kind)
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    n = max(1, int(round(duration_s * sample_rate)))
    rng = np.random.default_rng([int(seed), list(SourceKind).index(kind)])
    t = np.arange(n) / sample_rate
    x = _SYNTHS[kind](rng, t, sample_rate)
    rms = np.sqrt(np.mean(x**2))
    if rms == 0.0:
        raise DegenerateInputError(f"synthesised {kind.value} source is silent")
    return SignalBuffer(x * (TARGET_RMS / rms), sample_rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    q = np.round(x * PCM16_SCALE)
    if np.any(q > 32767) or np.any(q < -32768):
        raise DataError("signal exceeds the 16-bit PCM range")
    return q.astype("<i2")


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """The float values a 16-bit PCM file holding ``samples`` reads back as."""
    return to_pcm16(samples).astype(np.float64) / PCM16_SCALE


def write_wav(path: str | Path, signal: SignalBuffer) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = to_pcm16(signal.samples)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> SignalBuffer:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit mono PCM")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM16_SCALE
    return SignalBuffer(x, sr)
