"""Waveforms, WAV I/O, band-limited resampling and probe signals."""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

__all__ = [
    "PIPELINE_RATES",
    "Waveform",
    "read_wav",
    "write_wav",
    "resample",
    "resampling_filter",
    "bandlimited_noise",
]

PIPELINE_RATES = (8000, 16000, 24000, 48000)

# Kaiser windowed sinc, 64 zero crossings per side
ZERO_CROSSINGS = 64
KAISER_BETA = 8.6


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


def read_wav(path) -> Waveform:
    """Load PCM16, PCM24 or float32 audio, keeping only the first channel."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"{path}: unreadable WAV file ({exc})") from exc
    if data.ndim == 2:
        data = data[:, 0]
    if data.shape[0] == 0:
        raise ValueError(f"{path}: zero-length audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-aligns 24-bit PCM into int32
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    x = np.clip(w.samples, -1.0, 1.0)
    if encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, w.sample_rate_hz, data)


def resampling_filter(up: int, down: int) -> np.ndarray:
    """Lowpass prototype for the up-sampled grid, cutoff at the lower Nyquist."""
    max_rate = max(up, down)
    half_len = ZERO_CROSSINGS * max_rate
    return sps.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Band-limited rational resampling to ``target_hz``.

    Output length is ``round(len * target / source)``; the signal is returned
    unchanged when the rates already agree.
    """
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    source_hz = w.sample_rate_hz
    if target_hz == source_hz:
        return w
    n_out = int(round(len(w) * target_hz / source_hz))
    if len(w) == 0:
        return Waveform(np.zeros(0), target_hz)
    g = gcd(source_hz, target_hz)
    up, down = target_hz // g, source_hz // g
    y = sps.resample_poly(w.samples, up, down, window=resampling_filter(up, down))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return Waveform(y, target_hz)


def bandlimited_noise(duration_s: float, band_hz: float, rate_hz: int, seed: int,
                      rms: float = 0.1) -> Waveform:
    """Gaussian noise with its spectrum zeroed above ``band_hz``."""
    if band_hz > rate_hz / 2:
        raise ValueError(f"band {band_hz} Hz above Nyquist of {rate_hz} Hz")
    n = int(round(duration_s * rate_hz))
    if n == 0:
        return Waveform(np.zeros(0), rate_hz)
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate_hz)
    spec[freqs > band_hz] = 0.0
    x = np.fft.irfft(spec, n)
    x *= rms / max(np.sqrt(np.mean(x ** 2)), 1e-300)
    return Waveform(np.clip(x, -1.0, 1.0), rate_hz)
