"""
Convolution with a hop of 7.5 samples
=====================================

At 24 kHz the first layer must advance 7.5 samples per frame. Output frame
t reads input positions t * 7.5 + k, with linear interpolation between
neighbouring samples at the half-sample points.
"""

import numpy as np

from sfimos import nncore as nn
from sfimos.nncore import Parameter, Tensor

rng = np.random.default_rng(0)
x = rng.normal(size=(1, 64))
kernel = rng.normal(size=(2, 1, 15))

y = nn.conv1d(x, kernel, stride=7.5)
print("input", x.shape, "-> output", y.shape, "(floor((64 - 15) / 7.5) + 1 frames)")

# Frame 1 by hand: positions 7.5 .. 21.5, each read as the mean of two samples.
pos = 7.5 + np.arange(15)
reads = np.interp(pos, np.arange(64), x[0])
print("frame 1 by hand:", np.round(kernel[:, 0] @ reads, 10))
print("frame 1 by conv:", np.round(y[:, 1], 10))

###############################################################################
# Gradients flow through the interpolation
# ----------------------------------------
# The tape records the conv node. Backprop returns gradients for the input and
# the kernel, which we compare with central differences on one entry.

xp, kp = Parameter(x.copy()), Parameter(kernel.copy())
out = nn.conv(xp, kp, None, stride=7.5)
proj = rng.normal(size=out.shape)
out.backward(proj)

h = 1e-6
bumped = kernel.copy()
bumped[1, 0, 3] += h
lower = kernel.copy()
lower[1, 0, 3] -= h
numeric = ((nn.conv1d(x, bumped, 7.5) * proj).sum() - (nn.conv1d(x, lower, 7.5) * proj).sum()) / (2 * h)
print("d/dk[1,0,3]: backprop", kp.grad[1, 0, 3], " finite difference", numeric)
print("input gradient shape:", xp.grad.shape)

# A plain Tensor input (audio, say) is treated as a constant: no input
# gradient is computed for it, only for the kernel.
frozen = Tensor(x)
nn.conv(frozen, Parameter(kernel.copy()), None, 7.5).backward(proj)
print("constant input gradient:", frozen.grad)
