import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fadpnet.freqsep import (
    BAND_CSV_HEADER,
    BandSpec,
    DegenerateInputError,
    LowPassSpec,
    band_energy_ratios,
    band_masks,
    format_band_row,
    lowpass,
    split_frequency,
)


def test_constant_map_is_all_low():
    x = torch.full((1, 2, 8, 8), 0.7, dtype=torch.float64)
    low, high = split_frequency(x)
    assert torch.allclose(low, x, atol=1e-15)
    assert torch.allclose(high, torch.zeros_like(x), atol=1e-15)


def test_impulse_box_blur():
    x = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    x[0, 0, 4, 4] = 1
    low, high = split_frequency(x)
    want = torch.zeros(8, 8, dtype=torch.float64)
    want[3:6, 3:6] = 1 / 9
    assert torch.allclose(low[0, 0], want, atol=1e-15)
    assert torch.allclose(high[0, 0], x[0, 0] - want, atol=1e-15)


def test_lowpass_matches_loop_convolution(rng):
    x = rng.standard_normal((5, 6))
    spec = LowPassSpec("gaussian-blur", 5, 1.0)
    k = spec.kernel(torch.float64).numpy()
    pad = np.pad(x, 2, mode="reflect")
    want = np.zeros_like(x)
    for i in range(5):
        for j in range(6):
            want[i, j] = (pad[i:i + 5, j:j + 5] * k).sum()
    got = lowpass(torch.from_numpy(x)[None, None], spec)[0, 0].numpy()
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("spec", [LowPassSpec(), LowPassSpec("gaussian-blur", 5, 0.8)])
def test_kernel_normalized(spec):
    k = spec.kernel(torch.float64)
    assert (k >= 0).all() and abs(k.sum().item() - 1) < 1e-12


def test_bad_lowpass_specs():
    with pytest.raises(ValueError):
        LowPassSpec(kernel_size=4)
    with pytest.raises(ValueError):
        LowPassSpec("median")
    with pytest.raises(ValueError):
        LowPassSpec("gaussian-blur", 3, 0.0)


def test_map_smaller_than_kernel_rejected():
    with pytest.raises(ValueError):
        split_frequency(torch.zeros(1, 1, 2, 8))


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(0, 2 ** 31 - 1))
def test_split_is_additive(h, w, seed):
    x = torch.from_numpy(np.random.default_rng(seed).standard_normal((2, 3, h, w)) * 10)
    low, high = split_frequency(x)
    # high is defined as x - low, so the sum differs from x by one rounding at most
    assert torch.allclose(low + high, x, rtol=0, atol=4 * torch.finfo(x.dtype).eps * x.abs().max())


def test_split_is_linear(rng):
    f = torch.from_numpy(rng.standard_normal((1, 2, 9, 7)))
    g = torch.from_numpy(rng.standard_normal((1, 2, 9, 7)))
    a, b = 1.7, -0.4
    lo, hi = split_frequency(a * f + b * g)
    lf, hf = split_frequency(f)
    lg, hg = split_frequency(g)
    assert torch.allclose(lo, a * lf + b * lg, rtol=1e-6, atol=1e-12)
    assert torch.allclose(hi, a * hf + b * hg, rtol=1e-6, atol=1e-12)


def test_band_spec_validation():
    with pytest.raises(ValueError):
        BandSpec(0.3, 0.2)
    with pytest.raises(ValueError):
        BandSpec(0.0, 0.2)
    with pytest.raises(ValueError):
        BandSpec(0.1, 0.6)


def test_masks_partition_non_dc_bins():
    low, mid, high = band_masks(16, 12)
    total = low.astype(int) + mid + high
    assert total[0, 0] == 0
    assert (total.reshape(-1)[1:] == 1).all()


def test_sinusoid_lands_in_low_band():
    n = 60
    yy, xx = np.mgrid[0:n, 0:n]
    x = np.cos(2 * math.pi * 3 * xx / n)  # 3/60 = 0.05 cycles/pixel
    r = band_energy_ratios(x)
    np.testing.assert_allclose(r, (1.0, 0.0, 0.0), atol=1e-6)


def test_dc_only_rejected():
    with pytest.raises(DegenerateInputError):
        band_energy_ratios(np.full((8, 8), 3.0))
    with pytest.raises(DegenerateInputError):
        band_energy_ratios(np.zeros((8, 8)))


def test_tiny_map_rejected():
    with pytest.raises(ValueError):
        band_energy_ratios(np.ones((3, 8)))


def _bin_fractions_loop(h, w, cut_low, cut_mid):
    counts = [0, 0, 0]
    for u in range(h):
        for v in range(w):
            if u == 0 and v == 0:
                continue
            fu = min(u, h - u) / h
            fv = min(v, w - v) / w
            r = math.hypot(fu, fv)
            counts[0 if r < cut_low else 1 if r < cut_mid else 2] += 1
    n = sum(counts)
    return [c / n for c in counts]


def test_white_noise_matches_bin_counts():
    x = np.random.default_rng(7).standard_normal((32, 1, 64, 64))
    got = band_energy_ratios(x)
    want = _bin_fractions_loop(64, 64, 1 / 6, 1 / 3)
    np.testing.assert_allclose(got, want, atol=0.01)


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 20), st.integers(4, 20), st.integers(0, 2 ** 31 - 1))
def test_ratios_normalized(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, 2, h, w))
    r = band_energy_ratios(x)
    assert abs(sum(r) - 1) < 1e-6
    assert all(0 <= v <= 1 for v in r)


def test_more_blur_never_adds_high_band():
    # Past sigma ~1.25 the periodic-boundary leakage of the reflect-padded map
    # dominates the high band, so the sweep stays below that.
    gen = np.random.default_rng(3)
    for _ in range(32):
        x = torch.from_numpy(gen.standard_normal((1, 1, 32, 32)))
        highs = [band_energy_ratios(lowpass(x, LowPassSpec("gaussian-blur", 2 * math.ceil(3 * s) + 1, s)))[2]
                 for s in (0.3, 0.5, 0.75, 1.0, 1.25)]
        assert all(b <= a + 1e-12 for a, b in zip(highs, highs[1:]))


def test_csv_row_format():
    assert BAND_CSV_HEADER == "source,band_low,band_mid,band_high"
    assert format_band_row("lfeb", (0.5, 0.25, 0.25)) == "lfeb,0.500000,0.250000,0.250000"
