"""
From ratings to a MOS ensemble
==============================

The full pipeline on a tiny synthetic corpus:

1. generate systems with a hidden quality and ten biased listeners,
2. train one listener-conditioned model per system-disjoint fold,
3. average listener scores per model and then across models to get a MOS.

The command-line tool runs the same steps (``sfimos gen-synthetic``,
``distill``, ``train-mos``, ``predict``, ``evaluate``) with files on disk.
"""

import tempfile

import numpy as np

from sfimos.data import WaveCache, load_hidden_quality, load_manifest, synth_dataset
from sfimos.metrics import ScorePair, srcc
from sfimos.models import EncoderConfig, MosHead, SfiEncoder, predict_mos
from sfimos.training import TrainConfig, cv_split, mos_train

workdir = tempfile.mkdtemp()
layout = ((16000, 2, 4), (24000, 3, 4), (48000, 3, 4))
ds = synth_dataset(workdir, seed=0, duration_s=0.3, layout=layout)
records = load_manifest(ds.manifest)
hidden = load_hidden_quality(ds.hidden_quality)
load = WaveCache(ds.root)
print(f"{ds.n_utterances} utterances, {ds.n_ratings} ratings, {len(hidden)} systems")

config = EncoderConfig(channels=16, naf_hidden=64)
train_cfg = TrainConfig(lr=1e-3, final_batch=20)
models, oof = [], {}
for fold, (train, val) in enumerate(cv_split(records, 4, seed=0)):
    encoder, head = SfiEncoder(config, seed=fold), MosHead(10, dim=16, seed=fold)
    result = mos_train(train, encoder, head, train_cfg, load, val_records=val, epochs=6)
    encoder.load_state(result.best_state, "encoder/")
    head.load_state(result.best_state, "head/")
    models.append((encoder, head))
    for r in val:
        oof.setdefault(r.system_id, {})[r.wav_path] = predict_mos(load(r.wav_path), [(encoder, head)], range(10))
    print(f"fold {fold}: best epoch {result.best_epoch}, val loss {min(h[2] for h in result.history):.4f}")

###############################################################################
# Each system's held-out predictions are averaged and ranked against the
# hidden quality that generated its ratings.

per_system = [ScorePair(hidden[s], float(np.mean(list(u.values())))) for s, u in oof.items()]
print("held-out system SRCC vs hidden quality:", round(srcc(per_system), 3))

wav = records[0].wav_path
ensemble = predict_mos(load(wav), models, range(10), detail=True)
print(f"{wav}: ensemble MOS {ensemble.mos:.3f} from folds {np.round(ensemble.per_model, 3)}")
