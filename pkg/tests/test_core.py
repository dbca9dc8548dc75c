import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmdkit.core import (CameraIntrinsics, CaptureBundle, DimensionError, ScreenGeometry, as_grid,
                         bilinear_sample, distort_normalized, undistort_normalized)


def _scalar_bilinear(img, x, y):
    h, w = img.shape
    x0 = min(int(np.floor(x)), w - 2)
    y0 = min(int(np.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x0 + 1]
            + (1 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])


def test_bilinear_midpoint():
    assert bilinear_sample(np.array([[0.0, 1.0], [0.0, 1.0]]), 0.5, 0.5) == pytest.approx(0.5)


def test_bilinear_integer_pixels_identity(rng):
    img = rng.random((6, 9))
    yy, xx = np.mgrid[0:6, 0:9]
    np.testing.assert_array_equal(bilinear_sample(img, xx.astype(float), yy.astype(float)), img)


def test_bilinear_matches_scalar_formula(rng):
    img = rng.random((8, 8))
    x = rng.uniform(0, 7, 100)
    y = rng.uniform(0, 7, 100)
    expect = np.array([_scalar_bilinear(img, a, b) for a, b in zip(x, y)])
    np.testing.assert_allclose(bilinear_sample(img, x, y), expect, atol=1e-12)


def test_bilinear_outside_is_nan():
    img = np.ones((4, 5))
    out = bilinear_sample(img, np.array([-0.01, 4.01, 2.0, 4.0]), np.array([1.0, 1.0, 3.5, 3.0]))
    assert np.isnan(out[0]) and np.isnan(out[1]) and np.isnan(out[2])
    assert out[3] == 1.0


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
       x=st.floats(0, 11), y=st.floats(0, 6))
def test_bilinear_exact_on_planes(a, b, c, x, y):
    rows, cols = np.mgrid[0:7, 0:12]
    img = a * rows + b * cols + c
    assert bilinear_sample(img, x, y) == pytest.approx(a * y + b * x + c, abs=1e-9)


def test_as_grid_rejects_nan_in_intensity():
    with pytest.raises(ValueError):
        as_grid(np.array([[0.0, np.nan]]), "capture")
    assert np.isnan(as_grid(np.array([[0.0, np.nan]]), "phase", allow_nan=True)).any()


def test_as_grid_rejects_bad_shape():
    with pytest.raises(DimensionError):
        as_grid(np.zeros(5))
    with pytest.raises(DimensionError):
        as_grid(np.zeros((0, 3)))


def test_intrinsics_validation_and_roundtrip():
    K = CameraIntrinsics(600, 610, 255.5, 250.0, 0.1, 0.01)
    assert K.has_distortion
    assert CameraIntrinsics.from_dict(K.to_dict()) == K
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 600, 1, 1)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-0.5, 0.5), y=st.floats(-0.5, 0.5))
def test_undistort_inverts_distort(x, y):
    xd, yd = distort_normalized(x, y, 0.1, 0.01)
    xu, yu = undistort_normalized(xd, yd, 0.1, 0.01)
    assert xu == pytest.approx(x, abs=1e-9) and yu == pytest.approx(y, abs=1e-9)


def test_screen_geometry():
    s = ScreenGeometry.centered((0, 0, -200), 2048, 1536, 0.1)
    assert s.width_mm == pytest.approx(204.8) and s.height_mm == pytest.approx(153.6)
    np.testing.assert_allclose(np.abs(s.normal), [0, 0, 1])
    assert ScreenGeometry.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        ScreenGeometry((0, 0, 0), (1, 0, 0), (2, 0, 0), 10, 10)


def test_capture_bundle_validation():
    imgs = [np.zeros((4, 5)) for _ in range(8)]
    b = CaptureBundle(imgs, white_image=np.zeros((4, 5)))
    assert b.shape == (4, 5)
    with pytest.raises(ValueError):
        CaptureBundle(imgs[:7])
    with pytest.raises(DimensionError, match="view 3"):
        CaptureBundle(imgs[:7] + [np.zeros((4, 6))], name="view 3")
    with pytest.raises(DimensionError):
        CaptureBundle(imgs, white_image=np.zeros((5, 5)))
    with pytest.raises(ValueError):
        CaptureBundle(imgs, frequency=0)
