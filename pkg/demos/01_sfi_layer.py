"""
One filter, many sampling rates
===============================

The first layer of the student encoder never stores digital taps. It stores
a neural analog filter (NAF): a small network that maps a frequency in Hz to
a complex response. Each time audio arrives at some rate, taps for that rate
are designed from the NAF by sampling its response on the DFT grid.
"""

import numpy as np

from sfimos.sfi import SfiConvSpec, NafParams, design_kernel, make_flat_naf, fit_naf_to_kernel, sfi_conv_forward
from sfimos.signal import bandlimited_noise, resample

spec = SfiConvSpec(c_in=1, c_out=4)

# The realised kernel length and hop both grow with the rate, so frames come
# out at 3.2 kHz no matter what the input rate is.
for rate in (8000, 16000, 24000, 48000):
    print(f"{rate:>6} Hz: kernel {spec.kernel_size(rate):>2} taps, stride {spec.stride(rate):>4}")

###############################################################################
# A flat response is an impulse
# -----------------------------
# With a constant response of 1 + 0j, frequency sampling yields a single
# nonzero tap. The 16000 / rate factor keeps the layer gain fixed.

flat = make_flat_naf(4, 1, 1.0)
for rate in (16000, 24000, 48000):
    taps = design_kernel(flat, spec, rate).data[0, 0]
    print(rate, np.round(taps, 12))

###############################################################################
# Same analog filter, same features
# ---------------------------------
# Fit a NAF to an ordinary 10-tap, 16 kHz kernel, then present one 2 kHz
# band-limited signal at 16 and at 48 kHz. An untrained fit only pins the
# 16 kHz grid, so this is a lower bound on how well a distilled NAF does.

rng = np.random.default_rng(0)
naf = NafParams(4, 1, seed=1)
fit_naf_to_kernel(naf, spec, rng.normal(0, 0.3, (4, 1, 10)))

probe = bandlimited_noise(1.0, 2000, 48000, seed=3)
y48 = sfi_conv_forward(probe.samples[None], naf, spec, 48000).data
y16 = sfi_conv_forward(resample(probe, 16000).samples[None], naf, spec, 16000).data
n = min(y16.shape[1], y48.shape[1])
a, b = y16[:, 20:n - 20], y48[:, 20:n - 20]
print("frames:", y16.shape[1], "at 16 kHz,", y48.shape[1], "at 48 kHz")
print("relative L2 between the two:", round(float(np.linalg.norm(a - b) / np.linalg.norm(a)), 4))
