"""Distillation into the SFI student, MOS fine-tuning and cross-validation."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .data import RatingRecord
from .models import ConvEncoder, MosHead, SfiEncoder, normalize_score
from .nncore import Tensor
from .sfi import BASE_RATE_HZ
from .signal import PIPELINE_RATES, Waveform, resample

__all__ = [
    "TrainConfig",
    "KdBatchPlan",
    "sample_student_rate",
    "plan_kd_item",
    "kd_loss",
    "kd_train",
    "KdResult",
    "mos_train",
    "MosResult",
    "cv_split",
    "select_checkpoint",
]

log = logging.getLogger(__name__)

STUDENT_RATES = PIPELINE_RATES
# crop starts fall on the teacher's total hop so cached teacher frames line up
_CROP_GRID_S = 1.0 / 400


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kd_batch: int = 32
    pretrain_batch: int = 64
    final_batch: int = 24
    epochs: int = 50
    kd_epochs: int = 10
    folds: int = 7
    seed: int = 0
    crop_s: float = 1.0
    freeze_encoder: bool = False

    def __post_init__(self):
        for name in ("lr", "kd_batch", "pretrain_batch", "final_batch", "crop_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.kd_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.folds < 2:
            raise ValueError("fold count must be at least 2")


# ---------------------------------------------------------------------------
# knowledge distillation


@dataclass(frozen=True)
class KdBatchPlan:
    source_rate_hz: int
    student_rate_hz: int
    crop_start_s: float
    crop_s: float
    teacher_rate_hz: int = BASE_RATE_HZ


def sample_student_rate(source_rate_hz: int, rng: np.random.Generator) -> int:
    """Uniform draw from the student rates that do not exceed the source rate."""
    allowed = [r for r in STUDENT_RATES if r <= source_rate_hz]
    if not allowed:
        raise ValueError(f"source rate {source_rate_hz} Hz below every student rate")
    return int(allowed[rng.integers(len(allowed))])


def plan_kd_item(w: Waveform, crop_s: float, rng: np.random.Generator) -> KdBatchPlan:
    rate = sample_student_rate(w.sample_rate_hz, rng)
    crop = min(crop_s, w.duration_s)
    slots = int(math.floor((w.duration_s - crop) / _CROP_GRID_S + 1e-9))
    start = _CROP_GRID_S * int(rng.integers(slots + 1))
    return KdBatchPlan(w.sample_rate_hz, rate, start, crop)


def kd_loss(h: Sequence, h_sfi: Sequence[Tensor]) -> Tensor:
    """Sum over layers of squared L2 distance, each layer cut to the shorter frame count."""
    if len(h) != len(h_sfi):
        raise ValueError(f"layer count mismatch: {len(h)} vs {len(h_sfi)}")
    terms = []
    for a, b in zip(h, h_sfi):
        a_arr = a.data if isinstance(a, Tensor) else np.asarray(a)
        n = min(a_arr.shape[1], b.shape[1])
        terms.append(nn.sq_dist(nn.crop_time(b, n), a_arr[:, :n]))
    return nn.sum_all(terms)


def _crop(w: Waveform, start_s: float, dur_s: float) -> Waveform:
    r = w.sample_rate_hz
    i0 = int(round(start_s * r))
    return Waveform(w.samples[i0:i0 + int(round(dur_s * r))], r)


class _KdSource:
    """Per-utterance caches: resampled versions and full-length teacher features."""

    def __init__(self, w: Waveform, teacher: ConvEncoder):
        self.w = w
        self._rates: dict[int, Waveform] = {w.sample_rate_hz: w}
        self.teacher = [t.data for t in teacher.features(self.at(BASE_RATE_HZ))]
        self.hops = np.cumprod([s for s in teacher.strides()])

    def at(self, rate: int) -> Waveform:
        if rate not in self._rates:
            self._rates[rate] = resample(self.w, rate)
        return self._rates[rate]

    def teacher_crop(self, start_s: float) -> list[np.ndarray]:
        out = []
        for feats, hop in zip(self.teacher, self.hops):
            first = int(round(start_s * BASE_RATE_HZ / hop))
            out.append(feats[:, first:])
        return out


@dataclass
class KdResult:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def kd_train(dataset: Sequence[Waveform], teacher: ConvEncoder, student: SfiEncoder,
             config: TrainConfig, *, epochs: int | None = None, max_steps: int | None = None,
             start_epoch: int = 0, on_epoch: Callable[[int, float, int], None] | None = None) -> KdResult:
    """Match the student's per-layer features to the frozen teacher's.

    Each item gets its own student rate and crop; the teacher sees the same
    crop resampled to 16 kHz. Only student parameters are updated. Epoch
    ``e`` draws from ``default_rng((seed, e))`` so resumed runs line up.
    ``on_epoch(epoch, mean_loss, steps_so_far)`` runs after every epoch.
    """
    if not dataset:
        raise ValueError("empty distillation dataset")
    for w in dataset:
        if w.sample_rate_hz < min(STUDENT_RATES):
            raise ValueError(f"waveform at {w.sample_rate_hz} Hz below {min(STUDENT_RATES)} Hz")
    epochs = config.kd_epochs if epochs is None else epochs
    sources = [_KdSource(w, teacher) for w in dataset]
    params = list(student.parameters().values())
    result = KdResult()
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(len(sources))
        batch_losses = []
        for b0 in range(0, len(order), config.kd_batch):
            if max_steps is not None and result.steps >= max_steps:
                break
            batch = order[b0:b0 + config.kd_batch]
            losses = []
            kernels: dict[int, Tensor] = {}
            for idx in batch:
                src = sources[idx]
                plan = plan_kd_item(src.w, config.crop_s, rng)
                rate = plan.student_rate_hz
                if rate not in kernels:
                    kernels[rate] = student.kernel(rate)
                x = _crop(src.at(rate), plan.crop_start_s, plan.crop_s)
                h_sfi = student.features(x, first_kernel=kernels[rate])
                losses.append(kd_loss(src.teacher_crop(plan.crop_start_s), h_sfi))
            total = nn.sum_all(losses)
            # mean over items keeps the step size independent of batch size
            total.backward(np.array(1.0 / len(batch)))
            nn.adam_step(params, config.lr, config.beta1, config.beta2, config.eps)
            value = float(total.data) / len(batch)
            batch_losses.append(value)
            result.step_losses.append(value)
            result.steps += 1
        if not batch_losses:
            break
        result.epoch_losses.append(float(np.mean(batch_losses)))
        log.info("kd epoch %d: loss %.6g", epoch + 1, result.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, result.epoch_losses[-1], result.steps)
    return result


# ---------------------------------------------------------------------------
# MOS fine-tuning


def _group_by_utterance(records: Sequence[RatingRecord]) -> "OrderedDict[str, list[RatingRecord]]":
    groups: OrderedDict[str, list[RatingRecord]] = OrderedDict()
    for r in records:
        groups.setdefault(r.wav_path, []).append(r)
    return groups


def _validate_records(records: Sequence[RatingRecord], head: MosHead) -> None:
    for r in records:
        if not 1.0 <= r.score <= 5.0:
            raise ValueError(f"score {r.score} outside [1, 5] for {r.wav_path}")
        if not 0 <= r.listener_id < head.num_listeners:
            raise ValueError(f"unknown listener {r.listener_id} for {r.wav_path}")


def _utterance_loss(encoder, head: MosHead, w: Waveform, recs: Sequence[RatingRecord],
                    pooled: Tensor | None = None) -> Tensor:
    """Sum of squared errors against normalised targets for one utterance's ratings."""
    if pooled is None:
        pooled = encoder.pooled(w)
    ids = np.array([r.listener_id for r in recs])
    target = normalize_score([r.score for r in recs])
    pred = head.score(pooled, ids)
    return nn.sq_dist(pred, target)


def evaluate_loss(encoder, head: MosHead, records: Sequence[RatingRecord],
                  load: Callable[[str], Waveform]) -> float:
    """Mean per-record squared error on normalised targets."""
    total = 0.0
    groups = _group_by_utterance(records)
    for path, recs in groups.items():
        total += float(_utterance_loss(encoder, head, load(path), recs).data)
    return total / max(len(records), 1)


@dataclass
class MosResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_state: dict[str, np.ndarray] = field(default_factory=dict)


def mos_train(records: Sequence[RatingRecord], encoder, head: MosHead, config: TrainConfig,
              load: Callable[[str], Waveform], *, val_records: Sequence[RatingRecord] = (),
              epochs: int | None = None, batch_size: int | None = None,
              on_epoch: Callable[[int, float, float], None] | None = None) -> MosResult:
    """Minimise MSE between listener-conditioned predictions and (S - 2) / 3.

    Mini-batches hold whole utterances (all of their ratings) up to
    ``batch_size`` ratings, so each encoder pass is shared by its listeners.
    After every epoch the validation loss (training loss when no validation
    set is given) decides which parameters are kept.
    """
    if not records:
        raise ValueError("no training records")
    _validate_records(records, head)
    _validate_records(val_records, head)
    epochs = config.epochs if epochs is None else epochs
    batch_size = config.final_batch if batch_size is None else batch_size
    groups = _group_by_utterance(records)
    paths = list(groups)
    params = list(head.parameters().values())
    frozen_pooled: dict[str, Tensor] = {}
    if config.freeze_encoder:
        for p in paths:
            frozen_pooled[p] = Tensor(encoder.pooled(load(p)).data)
    else:
        params += list(encoder.parameters().values())

    def snapshot():
        out = {"head/" + k: v for k, v in head.state().items()}
        out.update({"encoder/" + k: v for k, v in encoder.state().items()})
        return out

    result = MosResult()
    best_val = math.inf
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng((config.seed, 7919, epoch))
        order = [paths[i] for i in rng.permutation(len(paths))]
        batches, cur, n_cur = [], [], 0
        for p in order:
            n = len(groups[p])
            if cur and n_cur + n > batch_size:
                batches.append(cur)
                cur, n_cur = [], 0
            cur.append(p)
            n_cur += n
        if cur:
            batches.append(cur)
        sse = 0.0
        for batch in batches:
            n_rec = sum(len(groups[p]) for p in batch)
            losses = [_utterance_loss(encoder, head, load(p), groups[p], frozen_pooled.get(p)) for p in batch]
            total = nn.sum_all(losses)
            total.backward(np.array(1.0 / n_rec))
            nn.adam_step(params, config.lr, config.beta1, config.beta2, config.eps)
            sse += float(total.data)
        train_loss = sse / len(records)
        val_loss = evaluate_loss(encoder, head, val_records, load) if val_records else train_loss
        result.history.append((epoch, train_loss, val_loss))
        log.info("mos epoch %d: train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            result.best_epoch = epoch
            result.best_state = snapshot()
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
    if epochs == 0:
        result.best_state = snapshot()
    return result


def cv_split(records: Sequence[RatingRecord], k: int, seed: int = 0):
    """System-disjoint k-fold split; systems are shuffled then dealt round-robin."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    systems = sorted({r.system_id for r in records})
    if len(systems) < k:
        raise ValueError(f"{len(systems)} systems cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    shuffled = [systems[i] for i in rng.permutation(len(systems))]
    fold_of = {s: i % k for i, s in enumerate(shuffled)}
    folds = []
    for f in range(k):
        train = [r for r in records if fold_of[r.system_id] != f]
        val = [r for r in records if fold_of[r.system_id] == f]
        folds.append((train, val))
    return folds


def select_checkpoint(history: Sequence[tuple]) -> int:
    """Epoch with the lowest validation loss; the earliest wins ties.

    Entries are ``(epoch, val_loss)`` or ``(epoch, train_loss, val_loss)``.
    """
    if not history:
        raise ValueError("empty training history")
    best = min(history, key=lambda e: (e[-1], e[0]))
    return int(best[0])
