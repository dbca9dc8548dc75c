import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmdkit.core import EmptyFieldError, ScreenGeometry
from pmdkit.normals import integrate_frankot_chellappa, normals_from_gradients, phase_to_slope_scale
from pmdkit.phase import GradientMap, ValidityMask


def gmap(gx, gy, mask=None, scale=(1.0, 1.0)):
    gx = np.atleast_2d(np.asarray(gx, float))
    gy = np.atleast_2d(np.asarray(gy, float))
    if mask is None:
        mask = np.ones(gx.shape, bool)
    return GradientMap(gx, gy, ValidityMask(mask, 0.02), scale)


@pytest.mark.parametrize("g,expect", [
    ((0, 0), (0, 0, -1)),
    ((1, 0), (1 / np.sqrt(2), 0, -1 / np.sqrt(2))),
    ((1, 1), (1 / np.sqrt(3), 1 / np.sqrt(3), -1 / np.sqrt(3))),
])
def test_worked_normals(g, expect):
    n = normals_from_gradients(gmap(g[0], g[1]))
    np.testing.assert_allclose([n.nx[0, 0], n.ny[0, 0], n.nz[0, 0]], expect, atol=1e-12)


def test_unit_norm_and_roundtrip_random(rng):
    gx = rng.normal(0, 2, (100, 1000))
    gy = rng.normal(0, 2, (100, 1000))
    n = normals_from_gradients(gmap(gx, gy, scale=(0.3, 0.7)))
    norm = np.sqrt(n.nx ** 2 + n.ny ** 2 + n.nz ** 2)
    assert np.abs(norm - 1).max() < 1e-9
    assert (n.nz < 0).all()
    sx, sy = n.slopes()
    np.testing.assert_allclose(sx, 0.3 * gx, atol=1e-9)
    np.testing.assert_allclose(sy, 0.7 * gy, atol=1e-9)


def test_mask_propagates_as_nan():
    mask = np.array([[True, False]])
    n = normals_from_gradients(gmap([[0.1, 0.2]], [[0.0, 0.0]], mask))
    assert np.isfinite(n.nz[0, 0]) and np.isnan(n.nx[0, 1]) and np.isnan(n.nz[0, 1])


def test_slope_scale():
    assert phase_to_slope_scale(120.0, 200.0, 1) == pytest.approx(120 / (4 * np.pi * 200))
    assert phase_to_slope_scale(120.0, 200.0, 1) == pytest.approx(0.04775, abs=1e-5)
    assert phase_to_slope_scale(120.0, 200.0, 2) == pytest.approx(phase_to_slope_scale(120.0, 200.0, 1) / 2)
    s = ScreenGeometry.centered((0, 0, -200), 2048, 1536, 0.1)
    assert phase_to_slope_scale(s, 200, 1, "u") == pytest.approx(204.8 / (800 * np.pi))
    assert phase_to_slope_scale(s, 200, 1, "v") == pytest.approx(153.6 / (800 * np.pi))
    with pytest.raises(ValueError):
        phase_to_slope_scale(120.0, 0.0, 1)


def test_fc_zero_gradient():
    d = integrate_frankot_chellappa(gmap(np.zeros((32, 40)), np.zeros((32, 40))))
    assert np.abs(d.z).max() == 0.0


def test_fc_periodic_sinusoid():
    n = 512
    x = np.arange(n)[None, :] * np.ones((n, 1))
    z = np.sin(2 * np.pi * x / n)
    gx = 2 * np.pi / n * np.cos(2 * np.pi * x / n)
    d = integrate_frankot_chellappa(gmap(gx, np.zeros_like(gx)))
    err = d.z - (z - z.mean())
    assert np.sqrt(np.mean(err ** 2)) < 0.01 * np.ptp(z)


def test_fc_gaussian_bump():
    n, s = 512, 40.0
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    z = 5.0 * np.exp(-((xx - 260) ** 2 + (yy - 240) ** 2) / (2 * s * s))
    gx = -(xx - 260) / s ** 2 * z
    gy = -(yy - 240) / s ** 2 * z
    d = integrate_frankot_chellappa(gmap(gx, gy))
    err = d.z - (z - z.mean())
    assert np.sqrt(np.mean(err ** 2)) < 0.02 * z.max()


def test_fc_linear(rng):
    shape = (48, 64)
    mask = np.ones(shape, bool)
    mask[10:20, 30:40] = False
    g1 = (rng.normal(size=shape), rng.normal(size=shape))
    g2 = (rng.normal(size=shape), rng.normal(size=shape))
    a, b = 1.7, -0.4
    z1 = integrate_frankot_chellappa(gmap(*g1, mask)).z
    z2 = integrate_frankot_chellappa(gmap(*g2, mask)).z
    z12 = integrate_frankot_chellappa(gmap(a * g1[0] + b * g2[0], a * g1[1] + b * g2[1], mask)).z
    np.testing.assert_allclose(z12[mask], (a * z1 + b * z2)[mask], atol=1e-6)
    assert np.isnan(z12[~mask]).all()
    assert abs(z12[mask].mean()) < 1e-12


@settings(max_examples=10, deadline=None)
@given(kx=st.integers(1, 4), ky=st.integers(1, 4), phase=st.floats(0, 6.28))
def test_fc_numerical_gradient_correlates(kx, ky, phase):
    n = 128
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    ax, ay = 2 * np.pi * kx / 200, 2 * np.pi * ky / 170
    z = np.sin(ax * xx + phase) * np.cos(ay * yy)
    gx = ax * np.cos(ax * xx + phase) * np.cos(ay * yy)
    gy = -ay * np.sin(ax * xx + phase) * np.sin(ay * yy)
    d = integrate_frankot_chellappa(gmap(gx, gy)).z
    ngy, ngx = np.gradient(d)
    num = np.concatenate([ngx[1:-1, 1:-1].ravel(), ngy[1:-1, 1:-1].ravel()])
    ref = np.concatenate([gx[1:-1, 1:-1].ravel(), gy[1:-1, 1:-1].ravel()])
    assert np.corrcoef(num, ref)[0, 1] >= 0.98


def test_fc_empty_field():
    with pytest.raises(EmptyFieldError):
        integrate_frankot_chellappa(gmap(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool)))
