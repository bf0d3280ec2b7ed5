import numpy as np
import pytest

from sfimos import nncore as nn
from sfimos.sfi import (
    NafParams, SfiConvSpec, design_kernel, design_kernel_reference, fit_naf_to_kernel,
    make_flat_naf, naf_response, rff_transform, sfi_conv_forward,
)
from sfimos.signal import bandlimited_noise, resample

from helpers import distilled_naf, numeric_grad, rel_err

RATES = (16000, 24000, 48000)


def small_naf(seed=0, c_out=2, c_in=1):
    return NafParams(c_out, c_in, n_rff=8, hidden=16, seed=seed, out_scale=1.0)


def test_rff_at_zero():
    naf = NafParams(4, 1, seed=0)
    f = rff_transform(0.0, naf)
    assert f.shape == (128,)
    np.testing.assert_array_equal(f[:64], 1.0)
    np.testing.assert_array_equal(f[64:], 0.0)


def test_rff_deterministic_and_bounded():
    a = rff_transform(1234.5, NafParams(2, 1, seed=3))
    b = rff_transform(1234.5, NafParams(2, 1, seed=3))
    assert np.array_equal(a, b)
    feats = NafParams(2, 1, seed=3).features(np.linspace(0, 24000, 500))
    assert np.all(np.abs(feats) <= 1.0)


def test_rff_domain():
    naf = NafParams(2, 1)
    with pytest.raises(ValueError):
        rff_transform(-1.0, naf)
    with pytest.raises(ValueError):
        naf_response(24000.5, naf)


def test_rff_matrix_is_read_only():
    naf = NafParams(2, 1)
    with pytest.raises(ValueError):
        naf.rff_matrix[0, 0] = 1.0


def test_naf_output_layout_and_finiteness():
    naf = NafParams(3, 2, seed=1)
    assert naf.forward([0.0]).shape == (1, 2 * 3 * 2)
    freqs = np.random.default_rng(0).uniform(0, 24000, 1000)
    assert np.all(np.isfinite(naf.forward(freqs).data))
    assert naf_response(1000.0, naf).shape == (3, 2)


@pytest.mark.parametrize("seed", range(5))
def test_naf_response_continuity(seed):
    naf = NafParams(2, 1, seed=seed, out_scale=1.0)
    for f in np.random.default_rng(seed).uniform(0, 23999, 20):
        assert np.abs(naf_response(f, naf) - naf_response(f + 1e-3, naf)).max() < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_naf_gradient(seed):
    naf = small_naf(seed)
    freqs = np.random.default_rng(seed).uniform(0, 24000, 4)
    proj = np.random.default_rng(100 + seed).normal(size=(4, 4))
    out = naf.forward(freqs)
    out.backward(proj)
    for name, p in naf.params.items():
        f = lambda: float((naf.forward(freqs).data * proj).sum())
        assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-5, name


def test_kernel_sizes_follow_rate():
    spec = SfiConvSpec(1, 4, base_kernel=10, base_stride=5)
    assert [spec.kernel_size(r) for r in RATES] == [10, 15, 30]
    assert [spec.stride(r) for r in RATES] == [5, 7.5, 15]
    naf = NafParams(4, 1)
    assert [design_kernel(naf, spec, r).shape for r in RATES] == [(4, 1, 10), (4, 1, 15), (4, 1, 30)]


@pytest.mark.parametrize("rate", [8000, 16000, 24000, 48000])
def test_flat_response_gives_impulse(rate):
    spec = SfiConvSpec(1, 3)
    naf = make_flat_naf(3, 1, 1.0)
    raw = design_kernel(naf, spec, rate, energy_scale=False).data
    K = spec.kernel_size(rate)
    np.testing.assert_allclose(raw[..., 0], K, rtol=1e-12)
    assert np.abs(raw[..., 1:]).max() < 1e-10
    scaled = design_kernel(naf, spec, rate).data
    np.testing.assert_allclose(scaled[..., 0], K * 16000 / rate, rtol=1e-12)


@pytest.mark.parametrize("rate", RATES + (8000,))
def test_design_matches_fft_reference_and_is_real(rate):
    naf = NafParams(5, 2, seed=4)
    spec = SfiConvSpec(2, 5)
    ref, residue = design_kernel_reference(naf, spec, rate)
    assert residue < 1e-10
    np.testing.assert_allclose(design_kernel(naf, spec, rate).data, ref, atol=1e-12)


def test_design_deterministic():
    spec = SfiConvSpec(1, 4)
    for r in RATES:
        a = design_kernel(NafParams(4, 1, seed=9), spec, r).data
        b = design_kernel(NafParams(4, 1, seed=9), spec, r).data
        assert np.array_equal(a, b)


def test_fit_naf_reproduces_kernel():
    spec = SfiConvSpec(1, 6)
    target = np.random.default_rng(0).normal(size=(6, 1, 10))
    naf = NafParams(6, 1, seed=2)
    fit_naf_to_kernel(naf, spec, target)
    np.testing.assert_allclose(design_kernel(naf, spec, 16000).data, target, atol=1e-9)


def test_frame_rate_invariance():
    spec = SfiConvSpec(1, 2)
    naf = NafParams(2, 1)
    counts = []
    for r in (8000,) + RATES:
        counts.append(sfi_conv_forward(np.zeros((1, r)), naf, spec, r).shape[1])
    assert max(counts) - min(counts) <= 1


def test_rate_16k_is_ordinary_conv():
    spec = SfiConvSpec(1, 3)
    naf = NafParams(3, 1, seed=5)
    x = np.random.default_rng(0).normal(size=(1, 400))
    k = design_kernel(naf, spec, 16000).data
    np.testing.assert_array_equal(sfi_conv_forward(x, naf, spec, 16000).data, nn.conv1d(x, k, 5))


def test_input_shorter_than_kernel():
    with pytest.raises(ValueError):
        sfi_conv_forward(np.zeros((1, 20)), NafParams(2, 1), SfiConvSpec(1, 2), 48000)


@pytest.mark.parametrize("rate", [16000, 24000, 48000])
def test_sfi_conv_gradient_reaches_naf(rate):
    spec = SfiConvSpec(1, 2)
    naf = small_naf(rate)
    x = np.random.default_rng(1).normal(size=(1, spec.kernel_size(rate) * 3))
    out = sfi_conv_forward(x, naf, spec, rate)
    proj = np.random.default_rng(2).normal(size=out.shape)
    out.backward(proj)
    for name, p in naf.params.items():
        f = lambda: float((sfi_conv_forward(x, naf, spec, rate).data * proj).sum())
        assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-5, name


def test_trained_naf_cross_rate_consistency():
    naf, spec = distilled_naf(seed=3)
    probe = bandlimited_noise(1.0, 2000, 48000, seed=77)
    y48 = sfi_conv_forward(probe.samples[None], naf, spec, 48000).data
    y16 = sfi_conv_forward(resample(probe, 16000).samples[None], naf, spec, 16000).data
    n = min(y16.shape[1], y48.shape[1])
    a, b = y16[:, 20:n - 20], y48[:, 20:n - 20]
    assert np.linalg.norm(a - b) / np.linalg.norm(a) <= 0.2
