"""Sampling-frequency-independent convolution.

A neural analog filter maps a continuous frequency to a complex response per
(output, input) channel pair. For every sampling rate, a digital kernel is
designed by frequency sampling: the response is evaluated on the DFT grid of
the realised kernel length, completed conjugate-symmetrically and inverted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .nncore import Parameter, Tensor

__all__ = [
    "BASE_RATE_HZ",
    "SfiConvSpec",
    "NafParams",
    "rff_transform",
    "naf_response",
    "design_kernel",
    "design_kernel_reference",
    "synthesis_matrix",
    "grid_frequencies",
    "sfi_conv_forward",
    "fit_naf_to_kernel",
    "make_flat_naf",
]

BASE_RATE_HZ = 16000


@dataclass(frozen=True)
class SfiConvSpec:
    c_in: int
    c_out: int
    base_kernel: int = 10
    base_stride: float = 5.0
    max_freq_hz: float = 24000.0

    def kernel_size(self, rate_hz: int) -> int:
        return int(round(self.base_kernel * rate_hz / BASE_RATE_HZ))

    def stride(self, rate_hz: int) -> float:
        return self.base_stride * rate_hz / BASE_RATE_HZ

    @property
    def frame_rate_hz(self) -> float:
        return BASE_RATE_HZ / self.base_stride


class NafParams:
    """Random-Fourier-feature MLP giving a complex response per channel pair.

    ``rff_matrix`` is fixed at construction; the three dense layers are
    trainable. The output row holds all real parts followed by all
    imaginary parts, each in (c_out, c_in) row-major order.
    """

    def __init__(self, c_out: int, c_in: int, *, n_rff: int = 64, rff_scale: float = 10.0,
                 hidden: int = 256, max_freq_hz: float = 24000.0, seed: int = 0,
                 out_scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.c_out, self.c_in = c_out, c_in
        self.max_freq_hz = float(max_freq_hz)
        rff = rng.normal(0.0, rff_scale, size=(n_rff, 1))
        rff.setflags(write=False)
        self._rff = rff
        n_out = 2 * c_out * c_in
        self.params: dict[str, Parameter] = {
            "w0": Parameter(rng.normal(0, np.sqrt(1 / (2 * n_rff)), (hidden, 2 * n_rff))),
            "b0": Parameter(np.zeros(hidden)),
            "w1": Parameter(rng.normal(0, np.sqrt(1 / hidden), (hidden, hidden))),
            "b1": Parameter(np.zeros(hidden)),
            "w2": Parameter(rng.normal(0, out_scale * np.sqrt(1 / hidden), (n_out, hidden))),
            "b2": Parameter(np.zeros(n_out)),
        }

    @property
    def rff_matrix(self) -> np.ndarray:
        return self._rff

    @property
    def n_pairs(self) -> int:
        return self.c_out * self.c_in

    def state(self, prefix: str = "naf/") -> dict[str, np.ndarray]:
        out = {prefix + "rff": np.array(self._rff)}
        out.update({prefix + k: p.data for k, p in self.params.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "naf/") -> None:
        rff = np.array(arrays[prefix + "rff"])
        rff.setflags(write=False)
        self._rff = rff
        for k, p in self.params.items():
            src = arrays[prefix + k]
            if src.shape != p.shape:
                raise ValueError(f"{prefix}{k}: shape {src.shape}, expected {p.shape}")
            p.data[...] = src

    def features(self, freqs_hz) -> np.ndarray:
        freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        if np.any(freqs < 0) or np.any(freqs > self.max_freq_hz):
            raise ValueError(f"frequency outside [0, {self.max_freq_hz}] Hz")
        phase = 2 * np.pi * (freqs / self.max_freq_hz)[:, None] * self._rff[:, 0][None, :]
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)

    def hidden(self, feats) -> Tensor:
        p = self.params
        h = nn.silu(nn.linear(feats, p["w0"], p["b0"]))
        return nn.silu(nn.linear(h, p["w1"], p["b1"]))

    def forward(self, freqs_hz) -> Tensor:
        """Raw outputs, shape (n_freqs, 2 * n_pairs)."""
        p = self.params
        return nn.linear(self.hidden(self.features(freqs_hz)), p["w2"], p["b2"])


def rff_transform(freq_hz: float, naf: NafParams) -> np.ndarray:
    return naf.features(freq_hz)[0]


def naf_response(freq_hz: float, naf: NafParams) -> np.ndarray:
    """Complex response matrix (c_out, c_in) at one frequency."""
    out = naf.forward(freq_hz).data[0]
    P = naf.n_pairs
    return (out[:P] + 1j * out[P:]).reshape(naf.c_out, naf.c_in)


def grid_frequencies(kernel_size: int, rate_hz: int) -> np.ndarray:
    """Non-negative DFT bin frequencies up to Nyquist for a kernel of this length."""
    return np.arange(kernel_size // 2 + 1) * rate_hz / kernel_size


def synthesis_matrix(kernel_size: int, n_bins: int, scale: float) -> np.ndarray:
    """Map stacked (real; imaginary) grid responses to taps, shape (K, 2 * n_bins).

    Implements the real part of an unnormalised inverse DFT of the
    conjugate-symmetric completion; the sine terms vanish at DC and
    Nyquist, so their imaginary parts drop out automatically.
    """
    K = kernel_size
    k = np.arange(n_bins)
    weight = np.where((k == 0) | (2 * k == K), 1.0, 2.0)
    angle = 2 * np.pi * np.outer(np.arange(K), k) / K
    re = scale * weight * np.cos(angle)
    im = -scale * weight * np.sin(angle)
    return np.concatenate([re, im], axis=1)


def design_kernel(naf: NafParams, spec: SfiConvSpec, rate_hz: int,
                  energy_scale: bool = True) -> Tensor:
    """Digital kernel (c_out, c_in, K) realised from the NAF at ``rate_hz``."""
    K = spec.kernel_size(rate_hz)
    if K < 1:
        raise ValueError(f"rate {rate_hz} Hz gives an empty kernel")
    freqs = grid_frequencies(K, rate_hz)
    keep = freqs <= min(rate_hz / 2, naf.max_freq_hz) + 1e-9
    freqs = freqs[keep]
    n_bins = freqs.shape[0]
    P = naf.n_pairs
    scale = BASE_RATE_HZ / rate_hz if energy_scale else 1.0
    mat = synthesis_matrix(K, n_bins, scale)
    out = naf.forward(freqs)                              # (n_bins, 2P): [re..., im...]
    stacked = nn.reshape(nn.transpose(nn.reshape(out, (n_bins, 2, P)), (1, 0, 2)), (2 * n_bins, P))
    taps = nn.matmul_const(mat, stacked)                  # (K, P)
    return nn.transpose(nn.reshape(taps, (K, naf.c_out, naf.c_in)), (1, 2, 0))


def design_kernel_reference(naf: NafParams, spec: SfiConvSpec, rate_hz: int,
                            energy_scale: bool = True) -> tuple[np.ndarray, float]:
    """Same kernel via a complex FFT of the full completed spectrum.

    Returns the real taps and the largest imaginary residue.
    """
    K = spec.kernel_size(rate_hz)
    freqs = grid_frequencies(K, rate_hz)
    keep = freqs <= min(rate_hz / 2, naf.max_freq_hz) + 1e-9
    half = np.zeros((K // 2 + 1, naf.c_out, naf.c_in), dtype=complex)
    half[keep] = np.stack([naf_response(f, naf) for f in freqs[keep]])
    full = np.zeros((K, naf.c_out, naf.c_in), dtype=complex)
    full[: K // 2 + 1] = half
    full[0] = full[0].real
    if K % 2 == 0:
        full[K // 2] = full[K // 2].real
    for k in range(K // 2 + 1, K):
        full[k] = np.conj(full[K - k])
    scale = BASE_RATE_HZ / rate_hz if energy_scale else 1.0
    taps = np.fft.ifft(full, axis=0) * K * scale
    return np.moveaxis(taps.real, 0, -1), float(np.abs(taps.imag).max())


def sfi_conv_forward(x, naf: NafParams, spec: SfiConvSpec, rate_hz: int,
                     bias: Tensor | None = None) -> Tensor:
    """SF-adaptive convolution of a (c_in, T) input sampled at ``rate_hz``."""
    kernel = design_kernel(naf, spec, rate_hz)
    return nn.conv(x, kernel, bias, stride=spec.stride(rate_hz))


def fit_naf_to_kernel(naf: NafParams, spec: SfiConvSpec, kernel: np.ndarray,
                      rate_hz: int = BASE_RATE_HZ) -> None:
    """Solve the NAF output layer so ``design_kernel`` at ``rate_hz`` reproduces ``kernel``.

    Minimum-norm least squares on the final affine layer; exact while the
    number of grid bins does not exceed the hidden width.
    """
    K = spec.kernel_size(rate_hz)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (naf.c_out, naf.c_in, K):
        raise ValueError(f"kernel shape {kernel.shape}, expected {(naf.c_out, naf.c_in, K)}")
    scale = BASE_RATE_HZ / rate_hz
    spectrum = np.fft.fft(kernel, axis=-1)[..., : K // 2 + 1] / (K * scale)  # (Co, Ci, nb)
    target = np.concatenate([spectrum.real.reshape(naf.n_pairs, -1),
                             spectrum.imag.reshape(naf.n_pairs, -1)], axis=0).T
    feats = naf.hidden(naf.features(grid_frequencies(K, rate_hz))).data
    design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(design, target, rcond=None)
    naf.params["w2"].data[...] = sol[:-1].T
    naf.params["b2"].data[...] = sol[-1]


def make_flat_naf(c_out: int, c_in: int, value: complex = 1.0, **kwargs) -> NafParams:
    """NAF whose response equals ``value`` at every frequency."""
    naf = NafParams(c_out, c_in, **kwargs)
    P = naf.n_pairs
    naf.params["w2"].data[...] = 0.0
    naf.params["b2"].data[:P] = np.real(value)
    naf.params["b2"].data[P:] = np.imag(value)
    return naf
