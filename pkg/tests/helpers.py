"""Independent oracles shared by the test modules."""

import numpy as np

from sfimos import nncore as nn
from sfimos.nncore import Parameter, Tensor
from sfimos.sfi import NafParams, SfiConvSpec, sfi_conv_forward
from sfimos.signal import bandlimited_noise, resample


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric):
    """Largest absolute deviation relative to the largest numeric component."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def naive_conv(x, kernel, stride):
    """Loop-based integer-stride cross-correlation."""
    c_out, c_in, K = kernel.shape
    T = x.shape[1]
    n_out = (T - K) // stride + 1
    out = np.zeros((c_out, n_out))
    for o in range(c_out):
        for t in range(n_out):
            acc = 0.0
            for c in range(c_in):
                for k in range(K):
                    acc += kernel[o, c, k] * x[c, t * stride + k]
            out[o, t] = acc
    return out


def naive_conv_grads(g, x, kernel, stride):
    """Textbook transposed-convolution gradients for integer stride."""
    c_out, c_in, K = kernel.shape
    gx = np.zeros_like(x)
    gk = np.zeros_like(kernel)
    for o in range(c_out):
        for t in range(g.shape[1]):
            for c in range(c_in):
                for k in range(K):
                    gx[c, t * stride + k] += kernel[o, c, k] * g[o, t]
                    gk[o, c, k] += g[o, t] * x[c, t * stride + k]
    return gx, gk


def upsample2(x):
    """Linear interpolation onto the half-sample grid, length 2T - 1."""
    T = x.shape[1]
    out = np.zeros((x.shape[0], 2 * T - 1))
    out[:, ::2] = x
    out[:, 1::2] = 0.5 * (x[:, :-1] + x[:, 1:])
    return out


def spread2(kernel):
    """Place taps on every second position of a 2K - 1 grid."""
    c_out, c_in, K = kernel.shape
    out = np.zeros((c_out, c_in, 2 * K - 1))
    out[:, :, ::2] = kernel
    return out


def brute_ranks(x):
    x = list(x)
    ranks = []
    for v in x:
        less = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        ranks.append(less + (equal + 1) / 2)
    return np.array(ranks)


def brute_pearson(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((a[i] - ma) * (b[i] - mb) for i in range(n))
    va = sum((a[i] - ma) ** 2 for i in range(n))
    vb = sum((b[i] - mb) ** 2 for i in range(n))
    return cov / (va * vb) ** 0.5


def brute_tau_b(a, b):
    n = len(a)
    conc = disc = tie_a = tie_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                tie_a += 1
                tie_b += 1
            elif da == 0:
                tie_a += 1
            elif db == 0:
                tie_b += 1
            elif da * db > 0:
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) / 2
    return (conc - disc) / ((n0 - tie_a) * (n0 - tie_b)) ** 0.5


def op_grad_error(build, arrays, seed):
    """Worst relative error between backprop and central differences.

    ``build`` receives one Parameter per array and returns a tensor; the
    scalar checked is its inner product with a fixed random projection.
    """
    rng = np.random.default_rng(seed)
    params = [Parameter(a) for a in arrays]
    out = build(*params)
    proj = rng.normal(size=out.shape)

    def f():
        return float((build(*[Tensor(p.data) for p in params]).data * proj).sum())

    out.backward(proj)
    return max(rel_err(p.grad, numeric_grad(f, p.data)) for p in params)


def distilled_naf(seed, channels=16, steps=300):
    """NAF trained so its 16/24/48 kHz layers all imitate a random 16 kHz kernel."""
    spec = SfiConvSpec(1, channels)
    rng = np.random.default_rng(seed)
    target_kernel = rng.normal(0, np.sqrt(1 / 10), (channels, 1, 10))
    naf = NafParams(channels, 1, seed=seed)
    data = [bandlimited_noise(0.25, 20000, 48000, 50 * seed + i) for i in range(8)]
    targets = [nn.conv1d(resample(d, 16000).samples[None], target_kernel, 5) for d in data]
    params = list(naf.params.values())
    for step in range(steps):
        i = step % len(data)
        rate = (16000, 24000, 48000)[step % 3]
        y = sfi_conv_forward(resample(data[i], rate).samples[None], naf, spec, rate)
        n = min(y.shape[1], targets[i].shape[1])
        nn.sq_dist(nn.crop_time(y, n), targets[i][:, :n]).backward()
        nn.adam_step(params, lr=1e-3)
    return naf, spec
