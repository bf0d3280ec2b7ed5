"""Encoders and the listener-conditioned MOS head.

The teacher is a fixed-rate convolutional trunk that only accepts 16 kHz
audio. The student shares the trunk layout but its first layer is an SFI
convolution, so it takes audio at any supported rate. The baseline keeps the
fixed-rate trunk and adds a learned embedding of the input rate instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nncore as nn
from .nncore import Parameter, Tensor
from .sfi import BASE_RATE_HZ, NafParams, SfiConvSpec, design_kernel
from .signal import PIPELINE_RATES, Waveform, resample

__all__ = [
    "EncoderConfig",
    "ConvEncoder",
    "SfiEncoder",
    "MosHead",
    "SfEmbedding",
    "BaselineEncoder",
    "teacher_features",
    "student_features",
    "predict_listener_score",
    "predict_mos",
    "baseline_features",
    "normalize_score",
    "denormalize_score",
]

TRACK_RATES = (16000, 24000, 48000)


def normalize_score(score):
    """Map a 1..5 opinion score to the training target (S - 2) / 3."""
    return (np.asarray(score, dtype=np.float64) - 2.0) / 3.0


def denormalize_score(value):
    return 3.0 * np.asarray(value, dtype=np.float64) + 2.0


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 64
    first_kernel: int = 10
    first_stride: float = 5.0
    trunk: tuple[tuple[int, int], ...] = ((3, 2), (3, 2), (3, 2))
    n_rff: int = 64
    rff_scale: float = 10.0
    naf_hidden: int = 256
    max_freq_hz: float = 24000.0

    @property
    def n_layers(self) -> int:
        return 1 + len(self.trunk)

    def sfi_spec(self) -> SfiConvSpec:
        return SfiConvSpec(1, self.channels, self.first_kernel, self.first_stride, self.max_freq_hz)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _Module:
    """Named-parameter container with flat state dicts."""

    def parameters(self) -> dict[str, Parameter]:
        raise NotImplementedError

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, arrays, prefix: str = "") -> None:
        for k, p in self.parameters().items():
            src = arrays[prefix + k]
            if src.shape != p.shape:
                raise ValueError(f"{prefix}{k}: shape {src.shape}, expected {p.shape}")
            p.data[...] = src

    def optimizer_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.parameters().items():
            out[f"{prefix}{k}/adam_m"] = p.adam_m.copy()
            out[f"{prefix}{k}/adam_v"] = p.adam_v.copy()
            out[f"{prefix}{k}/step"] = np.array(float(p.step_count))
        return out

    def load_optimizer_state(self, arrays, prefix: str = "") -> None:
        for k, p in self.parameters().items():
            p.adam_m = np.array(arrays[f"{prefix}{k}/adam_m"])
            p.adam_v = np.array(arrays[f"{prefix}{k}/adam_v"])
            p.step_count = int(arrays[f"{prefix}{k}/step"])


class ConvEncoder(_Module):
    """Fixed-rate trunk: ordinary strided convolutions with SiLU, 16 kHz only."""

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        C = config.channels
        self.weights: list[Parameter] = [Parameter(_he(rng, (C, 1, config.first_kernel), config.first_kernel))]
        self.biases: list[Parameter] = [Parameter(np.zeros(C))]
        for k, _ in config.trunk:
            self.weights.append(Parameter(_he(rng, (C, C, k), C * k)))
            self.biases.append(Parameter(np.zeros(C)))

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}/w"] = w
            out[f"conv{i}/b"] = b
        return out

    def strides(self) -> list[float]:
        return [self.config.first_stride] + [s for _, s in self.config.trunk]

    def features(self, w: Waveform) -> list[Tensor]:
        if w.sample_rate_hz != BASE_RATE_HZ:
            raise ValueError(f"fixed-rate encoder needs {BASE_RATE_HZ} Hz input, got {w.sample_rate_hz}")
        h: Tensor = Tensor(w.samples[None, :])
        stack = []
        for wt, b, s in zip(self.weights, self.biases, self.strides()):
            h = nn.silu(nn.conv(h, wt, b, stride=s))
            stack.append(h)
        return stack

    def pooled(self, w: Waveform) -> Tensor:
        return nn.mean_time(self.features(w)[-1])


class SfiEncoder(_Module):
    """Student trunk whose first layer is designed per input rate from a NAF."""

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.spec = config.sfi_spec()
        C = config.channels
        self.naf = NafParams(C, 1, n_rff=config.n_rff, rff_scale=config.rff_scale,
                             hidden=config.naf_hidden, max_freq_hz=config.max_freq_hz,
                             seed=int(rng.integers(2**31)))
        self.first_bias = Parameter(np.zeros(C))
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for k, _ in config.trunk:
            self.weights.append(Parameter(_he(rng, (C, C, k), C * k)))
            self.biases.append(Parameter(np.zeros(C)))

    @classmethod
    def from_teacher(cls, teacher: ConvEncoder, seed: int = 0) -> "SfiEncoder":
        """Student with the teacher's trunk copied and a freshly seeded NAF."""
        student = cls(teacher.config, seed=seed)
        student.first_bias.data[...] = teacher.biases[0].data
        for dst, src in zip(student.weights + student.biases, teacher.weights[1:] + teacher.biases[1:]):
            dst.data[...] = src.data
        return student

    def parameters(self):
        out = {"naf/" + k: p for k, p in self.naf.params.items()}
        out["conv0/b"] = self.first_bias
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"conv{i}/w"] = w
            out[f"conv{i}/b"] = b
        return out

    def state(self, prefix: str = ""):
        out = super().state(prefix)
        out[prefix + "naf/rff"] = np.array(self.naf.rff_matrix)
        return out

    def load_state(self, arrays, prefix: str = ""):
        super().load_state(arrays, prefix)
        if prefix + "naf/rff" in arrays:
            rff = np.array(arrays[prefix + "naf/rff"])
            rff.setflags(write=False)
            self.naf._rff = rff

    def kernel(self, rate_hz: int) -> Tensor:
        return design_kernel(self.naf, self.spec, rate_hz)

    def features(self, w: Waveform, first_kernel: Tensor | None = None) -> list[Tensor]:
        rate = w.sample_rate_hz
        if rate not in PIPELINE_RATES:
            raise ValueError(f"unsupported sampling rate {rate} Hz")
        kernel = self.kernel(rate) if first_kernel is None else first_kernel
        h = nn.silu(nn.conv(Tensor(w.samples[None, :]), kernel, self.first_bias, stride=self.spec.stride(rate)))
        stack = [h]
        for wt, b, (_, s) in zip(self.weights, self.biases, self.config.trunk):
            h = nn.silu(nn.conv(h, wt, b, stride=s))
            stack.append(h)
        return stack

    def pooled(self, w: Waveform) -> Tensor:
        return nn.mean_time(self.features(w)[-1])


class MosHead(_Module):
    """Listener embedding added to pooled features, then a D -> D -> 1 SiLU MLP."""

    def __init__(self, num_listeners: int, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.num_listeners, self.dim = num_listeners, dim
        self.listener_table = Parameter(rng.normal(0.0, 0.1, size=(num_listeners, dim)))
        self.w0 = Parameter(_he(rng, (dim, dim), dim))
        self.b0 = Parameter(np.zeros(dim))
        self.w1 = Parameter(rng.normal(0.0, np.sqrt(1.0 / dim), size=(1, dim)))
        self.b1 = Parameter(np.zeros(1))

    def parameters(self):
        return {"listener": self.listener_table, "mlp0/w": self.w0, "mlp0/b": self.b0,
                "mlp1/w": self.w1, "mlp1/b": self.b1}

    def score(self, pooled: Tensor, listener_ids) -> Tensor:
        """Normalised scores, shape (n,) for an id array or (1,) for one id."""
        ids = np.atleast_1d(np.asarray(listener_ids))
        if ids.size == 0:
            raise ValueError("no listener ids given")
        if np.any(ids < 0) or np.any(ids >= self.num_listeners):
            raise IndexError(f"listener id out of range [0, {self.num_listeners})")
        z = nn.add(nn.embedding(self.listener_table, ids), pooled)
        h = nn.silu(nn.linear(z, self.w0, self.b0))
        return nn.reshape(nn.linear(h, self.w1, self.b1), (ids.size,))


class SfEmbedding(_Module):
    """One learned row per track sampling rate (16, 24, 48 kHz)."""

    def __init__(self, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.table = Parameter(rng.normal(0.0, 0.1, size=(len(TRACK_RATES), dim)))

    def parameters(self):
        return {"table": self.table}

    def row(self, rate_hz: int) -> Tensor:
        if rate_hz not in TRACK_RATES:
            raise ValueError(f"no rate embedding for {rate_hz} Hz")
        return nn.embedding(self.table, TRACK_RATES.index(rate_hz))


class BaselineEncoder(_Module):
    """Fixed-rate encoder on 16 kHz-resampled audio plus a rate embedding."""

    def __init__(self, encoder: ConvEncoder, sf_emb: SfEmbedding):
        self.encoder, self.sf_emb = encoder, sf_emb

    def parameters(self):
        out = {"encoder/" + k: p for k, p in self.encoder.parameters().items()}
        out.update({"sfemb/" + k: p for k, p in self.sf_emb.parameters().items()})
        return out

    def pooled(self, w: Waveform) -> Tensor:
        return baseline_features(w, self.encoder, self.sf_emb)


def teacher_features(x16k: Waveform, teacher: ConvEncoder) -> list[Tensor]:
    return teacher.features(x16k)


def student_features(x: Waveform, student: SfiEncoder) -> list[Tensor]:
    return student.features(x)


def predict_listener_score(features: Sequence[Tensor], listener_id: int, head: MosHead) -> Tensor:
    """Normalised listener-specific score from the last feature layer."""
    return head.score(nn.mean_time(features[-1]), listener_id)


def baseline_features(x: Waveform, encoder: ConvEncoder, sf_emb: SfEmbedding) -> Tensor:
    rate = x.sample_rate_hz
    if rate not in TRACK_RATES:
        raise ValueError(f"baseline supports {TRACK_RATES} Hz, got {rate}")
    pooled = encoder.pooled(resample(x, BASE_RATE_HZ))
    return nn.add(pooled, sf_emb.row(rate))


@dataclass
class MosPrediction:
    mos: float
    per_model: list[float] = field(default_factory=list)


def predict_mos(x: Waveform, models, listener_ids, detail: bool = False):
    """Ensemble MOS: average listener-wise scores per model, then across models.

    ``models`` is a sequence of ``(encoder, head)`` pairs, one per fold.
    """
    models = list(models)
    ids = np.asarray(list(listener_ids), dtype=np.int64)
    if not models:
        raise ValueError("no models given")
    if ids.size == 0:
        raise ValueError("no listener ids given")
    per_model = []
    for encoder, head in models:
        scores = denormalize_score(head.score(encoder.pooled(x), ids).data)
        per_model.append(float(np.mean(scores)))
    mos = float(np.clip(np.mean(per_model), 1.0, 5.0))
    return MosPrediction(mos, per_model) if detail else mos
