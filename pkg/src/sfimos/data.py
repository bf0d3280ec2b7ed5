"""Rating manifests and a synthetic, track-shaped rating corpus."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal import Waveform, read_wav, resample, write_wav

__all__ = [
    "RatingRecord",
    "MANIFEST_COLUMNS",
    "TRACK_LAYOUT",
    "load_manifest",
    "write_manifest",
    "synth_dataset",
    "speech_like",
    "degrade",
    "load_hidden_quality",
    "WaveCache",
]

MANIFEST_COLUMNS = ("wav_path", "system_id", "listener_id", "score", "sample_rate_hz")
RATING_RATES = (16000, 24000, 48000)

# (rate, n_systems, utterances per system)
TRACK_LAYOUT = ((16000, 4, 30), (24000, 8, 30), (48000, 8, 5))
N_LISTENERS = 10
LISTENER_NOISE = 0.3
GEN_RATE = 48000


@dataclass(frozen=True)
class RatingRecord:
    wav_path: str
    system_id: str
    listener_id: int
    score: float
    sample_rate_hz: int

    def __post_init__(self):
        if not 1.0 <= self.score <= 5.0:
            raise ValueError(f"score {self.score} outside [1, 5]")
        if self.sample_rate_hz not in RATING_RATES:
            raise ValueError(f"sample rate {self.sample_rate_hz} not in {RATING_RATES}")
        if self.listener_id < 0:
            raise ValueError(f"negative listener id {self.listener_id}")


def load_manifest(path) -> list[RatingRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        records, seen = [], {}
        for row_no, row in enumerate(reader, start=2):
            try:
                rec = RatingRecord(row["wav_path"], row["system_id"], int(row["listener_id"]),
                                   float(row["score"]), int(row["sample_rate_hz"]))
            except ValueError as exc:
                raise ValueError(f"{path}, row {row_no}: {exc}") from None
            key = (rec.wav_path, rec.listener_id)
            if key in seen:
                raise ValueError(f"{path}, row {row_no}: duplicate rating for {key} (first at row {seen[key]})")
            seen[key] = row_no
            records.append(rec)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.wav_path, r.system_id, r.listener_id, repr(float(r.score)), r.sample_rate_hz])


def load_hidden_quality(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["system_id"]: float(row["true_quality"]) for row in csv.DictReader(fh)}


class WaveCache:
    """Read each WAV once, resolving paths relative to a manifest directory."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[str, Waveform] = {}

    def __call__(self, wav_path: str) -> Waveform:
        if wav_path not in self._cache:
            p = Path(wav_path)
            self._cache[wav_path] = read_wav(p if p.is_absolute() else self.root / p)
        return self._cache[wav_path]


# ---------------------------------------------------------------------------
# synthetic corpus


def speech_like(duration_s: float, rate_hz: int, rng: np.random.Generator) -> np.ndarray:
    """Voiced harmonic source through random formant resonators, syllabic envelope.

    Content stays below 7 kHz so the same utterance is representable at every
    track rate.
    """
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    f0 = rng.uniform(90, 240) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(f0) / rate_hz
    x = np.zeros(n)
    for h in range(1, 40):
        mask = h * f0 < 7000
        x += mask * np.sin(h * phase) / h
    for fc in sorted(rng.uniform([300, 900, 2000], [900, 2200, 3500])):
        bw = rng.uniform(80, 200)
        r = np.exp(-np.pi * bw / rate_hz)
        theta = 2 * np.pi * fc / rate_hz
        x = sps.lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], x)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 6.3))
    x = x * env
    return 0.1 * x / max(np.sqrt(np.mean(x ** 2)), 1e-12)


def degrade(clean: np.ndarray, quality: float, rate_hz: int, rng: np.random.Generator) -> np.ndarray:
    """Additive band-limited noise and soft clipping, both stronger at low quality."""
    a = np.clip((quality - 1.0) / 4.0, 0.0, 1.0)
    snr_db = 0.0 + 36.0 * a
    noise = rng.standard_normal(clean.size)
    b, aa = sps.butter(6, 7000 / (rate_hz / 2))
    noise = sps.lfilter(b, aa, noise)
    noise *= np.sqrt(np.mean(clean ** 2) / max(np.mean(noise ** 2), 1e-20)) * 10 ** (-snr_db / 20)
    drive = 1.0 + 6.0 * (1.0 - a) ** 2
    y = np.tanh(drive * (clean + noise) / 0.3) * 0.3 / drive
    return np.clip(y, -1.0, 1.0)


@dataclass(frozen=True)
class SynthDataset:
    root: Path
    manifest: Path
    hidden_quality: Path
    n_utterances: int
    n_ratings: int


def synth_dataset(out_dir, seed: int = 0, duration_s: float = 0.5,
                  layout=TRACK_LAYOUT, n_listeners: int = N_LISTENERS) -> SynthDataset:
    """Generate WAVs, ``manifest.csv`` and ``hidden_quality.csv`` under ``out_dir``.

    Every system has a hidden quality; each utterance is rendered at 48 kHz,
    degraded according to that quality, and resampled to the system's rate.
    Listener scores are quality + listener bias + Gaussian noise, clamped.
    """
    root = Path(out_dir)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_systems = sum(n for _, n, _ in layout)
    qualities = rng.permutation(np.linspace(1.4, 4.6, n_systems))
    biases = rng.uniform(-0.5, 0.5, size=n_listeners)
    records: list[RatingRecord] = []
    hidden = []
    sys_index = 0
    n_utts = 0
    for rate, n_sys, n_utt in layout:
        for _ in range(n_sys):
            sys_id = f"S{sys_index + 1:02d}"
            q = float(qualities[sys_index])
            hidden.append((sys_id, q))
            for u in range(n_utt):
                utt_q = q + rng.normal(0.0, 0.1)
                clean = speech_like(duration_s, GEN_RATE, rng)
                x = Waveform(degrade(clean, utt_q, GEN_RATE, rng), GEN_RATE)
                rel = f"wav/{sys_id}_u{u:03d}.wav"
                write_wav(root / rel, resample(x, rate))
                n_utts += 1
                scores = np.clip(utt_q + biases + rng.normal(0.0, LISTENER_NOISE, n_listeners), 1.0, 5.0)
                for lid, s in enumerate(scores):
                    records.append(RatingRecord(rel, sys_id, lid, float(np.round(s, 6)), rate))
            sys_index += 1
    manifest = root / "manifest.csv"
    write_manifest(manifest, records)
    hq = root / "hidden_quality.csv"
    with open(hq, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["system_id", "true_quality"])
        for sys_id, q in hidden:
            writer.writerow([sys_id, repr(q)])
    return SynthDataset(root, manifest, hq, n_utts, len(records))
