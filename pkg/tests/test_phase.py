import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmdkit.core import DimensionError, EmptyFieldError
from pmdkit.phase import (ValidityMask, default_hp_sigma, highpass, highpass_gradients, retrieve_phase,
                          unwrap_single_period, unwrap_two_freq, validity_mask, wrap)


def synth(A, B, phi):
    return [A + B * np.cos(phi - (m - 1) * np.pi / 2) for m in (1, 2, 3, 4)]


def random_pixels(rng, n):
    A = rng.uniform(0.2, 0.8, n)
    B = rng.uniform(0.05, 1, n) * np.minimum(A, 1 - A)
    B = np.maximum(B, 0.05)
    phi = rng.uniform(-np.pi, np.pi, n)
    return A, B, phi


def test_worked_pixels():
    r = retrieve_phase(*[np.array([v]) for v in (0.75, 0.5, 0.25, 0.5)])
    assert r.phase[0] == pytest.approx(0.0, abs=1e-15)
    assert r.bias[0] == pytest.approx(0.5)
    assert r.modulation[0] == pytest.approx(0.25)
    r = retrieve_phase(*[np.array([v]) for v in (0.5, 0.75, 0.5, 0.25)])
    assert r.phase[0] == pytest.approx(np.pi / 2)
    assert r.modulation[0] == pytest.approx(0.25)


def test_exact_recovery_random_pixels(rng):
    A, B, phi = random_pixels(rng, 10_000)
    r = retrieve_phase(*synth(A, B, phi))
    assert np.abs(wrap(r.phase - phi)).max() < 1e-9
    assert np.abs(r.bias - A).max() < 1e-9
    assert np.abs(r.modulation - B).max() < 1e-9


def test_phase_range_includes_pi_not_minus_pi():
    r = retrieve_phase(*[np.array([v]) for v in (0.25, 0.5, 0.75, 0.5)])
    assert r.phase[0] == np.pi
    r = retrieve_phase(*[np.array([v]) for v in (0.25, 0.5 - 1e-17, 0.75, 0.5)])
    assert -np.pi < r.phase[0] <= np.pi


def test_size_mismatch():
    with pytest.raises(DimensionError):
        retrieve_phase(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-0.2, 0.2), g=st.floats(0.5, 2.0), seed=st.integers(0, 2**32 - 1))
def test_bias_and_gain_invariance(c, g, seed):
    A, B, phi = random_pixels(np.random.default_rng(seed), 200)
    imgs = synth(A, B, phi)
    base = retrieve_phase(*imgs)
    shifted = retrieve_phase(*[i + c for i in imgs])
    scaled = retrieve_phase(*[i * g for i in imgs])
    assert np.abs(shifted.phase - base.phase).max() < 1e-9
    assert np.abs(shifted.modulation - base.modulation).max() < 1e-9
    np.testing.assert_allclose(shifted.bias, base.bias + c, atol=1e-12)
    assert np.abs(scaled.phase - base.phase).max() < 1e-9
    np.testing.assert_allclose(scaled.modulation, g * base.modulation, rtol=1e-9)
    np.testing.assert_allclose(scaled.bias, g * base.bias, rtol=1e-12)


def test_quadratic_nonlinearity_insensitive(rng):
    A, B, phi = random_pixels(rng, 1000)
    imgs = [i + 0.1 * (i - A) ** 2 for i in synth(A, B, phi)]
    assert np.abs(wrap(retrieve_phase(*imgs).phase - phi)).max() < 1e-9


def test_validity_mask():
    assert not validity_mask(np.zeros((3, 3)), 0.02).mask.any()
    m = validity_mask(np.full((3, 3), 0.25), 0.02)
    assert m.mask.all() and m.threshold == 0.02 and m.count == 9
    assert validity_mask(np.array([0.02, 0.0199]), 0.02).mask.tolist() == [True, False]
    with pytest.raises(ValueError):
        validity_mask(np.zeros(3), -1)


def test_unwrap_single_period_moves_cut_to_edge():
    W = 100
    true = 2 * np.pi * np.arange(W) / W
    np.testing.assert_allclose(unwrap_single_period(wrap(true), W), true, atol=1e-12)


def test_unwrap_two_freq_ramp():
    W, k = 1000, 4
    lo = wrap(np.arange(W) / W * 2 * np.pi - np.pi)
    hi = wrap(k * lo)
    np.testing.assert_allclose(unwrap_two_freq(lo, hi, k), k * lo, atol=1e-9)


def test_unwrap_two_freq_already_unwrapped():
    lo = np.linspace(-0.7, 0.7, 50)
    hi = 4 * lo
    assert np.array_equal(unwrap_two_freq(lo, hi, 4), hi)


def test_unwrap_two_freq_noise_order_errors_match_brute_force(rng):
    k = 4
    true_lo = rng.uniform(-np.pi / k, np.pi / k, 20_000) + rng.integers(-1, 2, 20_000) * 0.5
    hi = wrap(k * true_lo)
    noise = rng.normal(0, 0.3, true_lo.shape)
    out = unwrap_two_freq(true_lo + noise, hi, k)
    wrong = np.abs(out - k * true_lo) > 1e-6
    brute = np.array([abs(round((k * (a + n) - h) / (2 * np.pi)) - round((k * a - h) / (2 * np.pi))) > 0
                      for a, n, h in zip(true_lo, noise, hi)])
    assert wrong.any()
    assert np.array_equal(wrong, brute)
    assert np.all(np.abs(noise[wrong]) > np.pi / k - 1e-12)


def test_unwrap_two_freq_errors_and_nan():
    with pytest.raises(ValueError):
        unwrap_two_freq(np.zeros(3), np.zeros(3), 1)
    out = unwrap_two_freq(np.array([np.nan, 0.1]), np.array([0.2, 0.4]), 4)
    assert np.isnan(out[0]) and np.isfinite(out[1])


def test_highpass_constant_removed():
    m = ValidityMask(np.ones((40, 50), bool), 0.02)
    g = highpass_gradients(np.full((40, 50), 3.7), np.full((40, 50), -1.0), m, sigma=5)
    assert np.abs(g.gx).max() < 1e-9 and np.abs(g.gy).max() < 1e-9


def _corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


def test_highpass_separates_scales():
    n, sigma = 512, 16.0
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    quad = 2.0 * ((xx - n / 2) ** 2 + 0.5 * (yy - n / 3) ** 2) / n ** 2
    sine = 0.05 * np.sin(2 * np.pi * xx / (sigma / 2))
    mask = np.ones((n, n), bool)
    out = highpass(quad + sine, mask, sigma)
    assert _corr(out, sine) > 0.99
    assert abs(_corr(out, quad)) < 0.05


def test_highpass_ignores_masked_data(rng):
    n, sigma = 128, 4.0
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    phase = 0.01 * xx + 0.3 * np.sin(xx / 9.0) * np.cos(yy / 13.0)
    mask = np.ones((n, n), bool)
    mask[50:70, 50:70] = False
    a = phase.copy()
    a[~mask] = 1e3
    b = phase.copy()
    b[~mask] = rng.normal(0, 50, (~mask).sum())
    ha, hb = highpass(a, mask, sigma), highpass(b, mask, sigma)
    far = np.ones((n, n), bool)
    far[50 - 12:70 + 12, 50 - 12:70 + 12] = False
    assert np.abs(ha - hb)[far].max() < 1e-3
    assert np.isnan(ha[~mask]).all()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_highpass_dc_free_and_nan_outside(seed):
    rng = np.random.default_rng(seed)
    phase = rng.normal(size=(60, 70)).cumsum(axis=1)
    mask = np.zeros((60, 70), bool)
    mask[5:55, 8:60] = True
    g = highpass_gradients(phase, phase * 0.5, ValidityMask(mask, 0.02), 6.0)
    assert abs(np.nanmean(g.gx)) < 1e-6 and abs(np.nanmean(g.gy)) < 1e-6
    assert np.array_equal(np.isnan(g.gx), ~mask)
    full = highpass(phase, np.ones_like(mask), 6.0)
    assert abs(full.mean()) < 1e-6


def test_highpass_errors():
    with pytest.raises(EmptyFieldError):
        highpass_gradients(np.zeros((5, 5)), np.zeros((5, 5)), ValidityMask(np.zeros((5, 5), bool), 0.02), 2)
    with pytest.raises(ValueError):
        highpass_gradients(np.zeros((5, 5)), np.zeros((5, 5)), ValidityMask(np.ones((5, 5), bool), 0.02), 0)


def test_default_sigma_is_eighth_of_diagonal():
    m = np.zeros((100, 100), bool)
    m[10:40, 20:60] = True
    assert default_hp_sigma(m) == pytest.approx(np.hypot(30, 40) / 8)
