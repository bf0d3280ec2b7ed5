"""MSE, LCC, SRCC and KTAU at utterance and system level."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

__all__ = [
    "ScorePair",
    "UndefinedCorrelation",
    "mse",
    "lcc",
    "srcc",
    "ktau",
    "average_ranks",
    "system_aggregate",
    "evaluate_all",
    "write_report",
]

METRICS = ("mse", "lcc", "srcc", "ktau")


class UndefinedCorrelation(ValueError):
    """Raised when a correlation has zero variance on one side."""


@dataclass(frozen=True)
class ScorePair:
    truth: float
    pred: float
    utterance_id: Hashable = None
    system_id: Hashable = None

    def __post_init__(self):
        if not (np.isfinite(self.truth) and np.isfinite(self.pred)):
            raise ValueError(f"non-finite score pair {self}")


def _arrays(pairs: Sequence[ScorePair], minimum: int = 1):
    if len(pairs) < minimum:
        raise ValueError(f"need at least {minimum} pairs, got {len(pairs)}")
    truth = np.array([p.truth for p in pairs], dtype=np.float64)
    pred = np.array([p.pred for p in pairs], dtype=np.float64)
    return truth, pred


def mse(pairs: Sequence[ScorePair]) -> float:
    truth, pred = _arrays(pairs)
    return float(np.mean((truth - pred) ** 2))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = np.sqrt(np.dot(a, a)), np.sqrt(np.dot(b, b))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("correlation undefined: zero variance")
    return float(np.clip(np.dot(a, b) / (sa * sb), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_x)) + 1]
    ends = np.r_[starts[1:], x.size]
    ranks = np.empty(x.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    return ranks


def lcc(pairs: Sequence[ScorePair]) -> float:
    truth, pred = _arrays(pairs, 2)
    return _pearson(truth, pred)


def srcc(pairs: Sequence[ScorePair]) -> float:
    truth, pred = _arrays(pairs, 2)
    return _pearson(average_ranks(truth), average_ranks(pred))


def ktau(pairs: Sequence[ScorePair]) -> float:
    """Kendall tau-b."""
    truth, pred = _arrays(pairs, 2)
    st = np.sign(truth[:, None] - truth[None, :])
    sp = np.sign(pred[:, None] - pred[None, :])
    iu = np.triu_indices(truth.size, k=1)
    st, sp = st[iu], sp[iu]
    n0 = st.size
    ties_t = np.count_nonzero(st == 0)
    ties_p = np.count_nonzero(sp == 0)
    denom = np.sqrt(float(n0 - ties_t) * float(n0 - ties_p))
    if denom == 0:
        raise UndefinedCorrelation("tau-b undefined: one sequence is constant")
    return float(np.clip(np.sum(st * sp) / denom, -1.0, 1.0))


def system_aggregate(pairs: Iterable[ScorePair]) -> list[ScorePair]:
    """Per-system means of truth and prediction, in first-seen system order."""
    groups: dict = defaultdict(list)
    for p in pairs:
        groups[p.system_id].append(p)
    out = []
    for sys_id, items in groups.items():
        out.append(ScorePair(float(np.mean([p.truth for p in items])),
                             float(np.mean([p.pred for p in items])),
                             utterance_id=None, system_id=sys_id))
    return out


def evaluate_all(pairs: Sequence[ScorePair]) -> dict[str, dict[str, float]]:
    pairs = list(pairs)
    funcs = {"mse": mse, "lcc": lcc, "srcc": srcc, "ktau": ktau}
    return {
        "utterance": {name: f(pairs) for name, f in funcs.items()},
        "system": {name: f(system_aggregate(pairs)) for name, f in funcs.items()},
    }


def write_report(report: dict[str, dict[str, float]], out_dir) -> tuple[Path, Path]:
    """Write ``report.txt`` (level.metric=value lines) and ``report.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, table = out_dir / "report.txt", out_dir / "report.csv"
    with open(txt, "w") as fh:
        for level, values in report.items():
            for name, value in values.items():
                fh.write(f"{level}.{name}={value!r}\n")
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "metric", "value"])
        for level, values in report.items():
            for name, value in values.items():
                writer.writerow([level, name, repr(value)])
    return txt, table
