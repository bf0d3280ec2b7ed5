"""
Distilling a 16 kHz teacher into a rate-free student
====================================================

The teacher is an ordinary conv trunk that only accepts 16 kHz audio. The
student keeps the trunk but swaps layer 1 for an SFI layer. Every training
item is shown to the student at a random rate no higher than its source rate,
while the teacher sees the same crop at 16 kHz. The loss is the summed squared
distance between the two feature stacks, layer by layer.

This demo uses a narrow 16-channel model so it runs in well under a minute.
"""

import numpy as np

from sfimos.data import degrade, speech_like
from sfimos.models import ConvEncoder, EncoderConfig, SfiEncoder
from sfimos.signal import Waveform, resample
from sfimos.training import TrainConfig, kd_train

rng = np.random.default_rng(0)
corpus = [Waveform(degrade(speech_like(0.5, 48000, rng), rng.uniform(1.5, 4.5), 48000, rng), 48000)
          for _ in range(16)]

config = EncoderConfig(channels=16, naf_hidden=64)
teacher = ConvEncoder(config, seed=1)
student = SfiEncoder.from_teacher(teacher, seed=2)
frozen = {k: v.copy() for k, v in teacher.state().items()}

result = kd_train(corpus, teacher, student, TrainConfig(lr=1e-3, kd_batch=8, crop_s=0.5), epochs=25)
print("epoch losses:", np.round(result.epoch_losses[::4], 2))
print(f"reduction after {result.steps} steps: {100 * (1 - result.epoch_losses[-1] / result.epoch_losses[0]):.1f}%")
print("teacher untouched:", all(np.array_equal(v, frozen[k]) for k, v in teacher.state().items()))

###############################################################################
# After distillation the student answers at any rate. Frame counts agree with
# the teacher's for the same duration, within one frame.

clip = corpus[0]
for rate in (8000, 16000, 24000, 48000):
    feats = student.features(resample(clip, rate))
    print(rate, [f.shape[1] for f in feats])
