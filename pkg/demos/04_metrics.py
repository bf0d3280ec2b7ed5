"""
Scoring a MOS predictor
=======================

Predictions are judged at two levels. Utterance level compares every
utterance's listener-mean score with its prediction. System level first
averages both over each system's utterances. SRCC uses average ranks for
ties and KTAU is tau-b.
"""

import numpy as np

from sfimos.metrics import ScorePair, evaluate_all, srcc, system_aggregate

rng = np.random.default_rng(0)
quality = {f"S{i}": q for i, q in enumerate(np.linspace(1.5, 4.5, 6))}
pairs = []
for sys_id, q in quality.items():
    for u in range(10):
        truth = float(np.clip(q + rng.normal(0, 0.4), 1, 5))
        pred = float(np.clip(0.8 * truth + 0.6 + rng.normal(0, 0.5), 1, 5))
        pairs.append(ScorePair(truth, pred, f"{sys_id}_{u}", sys_id))

report = evaluate_all(pairs)
for level, values in report.items():
    print(level.ljust(9), "  ".join(f"{k}={v:.3f}" for k, v in values.items()))

# Averaging per system removes most utterance noise, which is why the system
# level correlations are higher.
print("systems:", [(p.system_id, round(p.truth, 2), round(p.pred, 2)) for p in system_aggregate(pairs)])

###############################################################################
# Ties share the mean of their rank positions.

tied = [ScorePair(t, p) for t, p in [(1, 1), (2, 3), (2, 2), (3, 3), (5, 4)]]
print("SRCC with ties:", srcc(tied))
