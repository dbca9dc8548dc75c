"""Four-step phase retrieval, validity masking, unwrapping and high-pass filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .core import EmptyFieldError, as_grid, check_same_shape

DEFAULT_MOD_THRESHOLD = 0.02


@dataclass
class PhaseRetrievalResult:
    phase: np.ndarray
    bias: np.ndarray
    modulation: np.ndarray


@dataclass
class ValidityMask:
    mask: np.ndarray
    threshold: float

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def __and__(self, other: "ValidityMask") -> "ValidityMask":
        return ValidityMask(self.mask & other.mask, max(self.threshold, other.threshold))


@dataclass
class GradientMap:
    """High-pass filtered phase maps standing in for surface slopes.

    ``scale`` converts radians to slope per axis as ``(sx, sy)``; it is
    ``(1, 1)`` in uncalibrated mode.
    """

    gx: np.ndarray
    gy: np.ndarray
    mask: ValidityMask
    scale: tuple[float, float] = (1.0, 1.0)

    def scaled(self) -> tuple[np.ndarray, np.ndarray]:
        return self.gx * self.scale[0], self.gy * self.scale[1]


def retrieve_phase(i1, i2, i3, i4) -> PhaseRetrievalResult:
    """Wrapped phase, bias and modulation from four 90-degree shifted images.

    Uses ``atan2(I2 - I4, I1 - I3)`` so the full ``(-pi, pi]`` range is kept.
    """
    imgs = [np.asarray(i, dtype=np.float64) for i in (i1, i2, i3, i4)]
    check_same_shape(imgs, "phase-shift images")
    i1, i2, i3, i4 = imgs
    s = i2 - i4
    c = i1 - i3
    phase = np.arctan2(s, c)
    # atan2 returns -pi for (-0.0, negative); fold onto +pi
    phase = np.where(phase == -np.pi, np.pi, phase)
    modulation = 0.5 * np.hypot(s, c)
    bias = (i1 + i2 + i3 + i4) / 4.0
    return PhaseRetrievalResult(phase, bias, modulation)


def validity_mask(modulation, threshold: float = DEFAULT_MOD_THRESHOLD) -> ValidityMask:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    b = np.asarray(modulation, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return ValidityMask(b >= threshold, float(threshold))


def wrap(phase):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(phase) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def unwrap_single_period(phase, screen_extent_px: float | None = None):
    """Move the atan2 branch cut of a one-period phase map to the screen edge.

    With one fringe period across the screen the true phase runs over
    ``[0, 2 pi (W-1)/W]``; mapping into that interval (with the cut half a
    screen pixel beyond the last column) makes the map single valued.
    """
    margin = np.pi / screen_extent_px if screen_extent_px else 1e-6
    return np.mod(np.asarray(phase) + margin, 2 * np.pi) - margin


def unwrap_two_freq(phase_lo, phase_hi, k: int):
    """Temporal unwrapping of a frequency-``k`` phase map using a frequency-1 map."""
    if int(k) != k or k < 2:
        raise ValueError(f"frequency ratio must be an integer >= 2, got {k}")
    lo = np.asarray(phase_lo, dtype=np.float64)
    hi = np.asarray(phase_hi, dtype=np.float64)
    check_same_shape([lo, hi], "phase maps")
    order = np.round((k * lo - hi) / (2 * np.pi))
    return hi + 2 * np.pi * order


def default_hp_sigma(mask) -> float:
    """One eighth of the diagonal of the valid region's bounding box, in pixels."""
    m = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyFieldError("no valid pixels")
    diag = np.hypot(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1)
    return float(diag / 8.0)


def _moment_kernels(sigma: float, radius: int):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    return g, t * g, t * t * g


def _correlate(img, ky, kx):
    # fftconvolve flips the kernel; flip it back to get a correlation
    k = np.outer(ky, kx)[::-1, ::-1]
    return fftconvolve(img, k, mode="same")


def masked_lowpass(values, mask, sigma: float, order: int = 1) -> np.ndarray:
    """Gaussian normalized convolution that ignores masked-out pixels.

    ``order=0`` is the classic ratio ``blur(f*m) / blur(m)``. ``order=1``
    fits a Gaussian-weighted local plane instead, which reproduces affine
    fields exactly, also at the border of the valid region.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    m = np.asarray(mask, dtype=bool)
    f = np.where(m, np.asarray(values, dtype=np.float64), 0.0)
    w = m.astype(np.float64)
    radius = int(min(np.ceil(4 * sigma), max(m.shape)))
    g0, g1, g2 = _moment_kernels(sigma, radius)

    s0 = _correlate(w, g0, g0)
    f0 = _correlate(f, g0, g0)
    tiny = 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        fbar = f0 / s0
        if order == 0:
            return np.where(s0 > tiny, fbar, np.nan)

        mx = _correlate(w, g0, g1) / s0
        my = _correlate(w, g1, g0) / s0
        cxx = _correlate(w, g0, g2) / s0 - mx * mx
        cyy = _correlate(w, g2, g0) / s0 - my * my
        cxy = _correlate(w, g1, g1) / s0 - mx * my
        sx = _correlate(f, g0, g1) / s0 - mx * fbar
        sy = _correlate(f, g1, g0) / s0 - my * fbar
        det = cxx * cyy - cxy * cxy
        ok = det > (1e-3 * sigma * sigma) ** 2
        safe = np.where(ok, det, 1.0)
        c1 = (cyy * sx - cxy * sy) / safe
        c2 = (cxx * sy - cxy * sx) / safe
        planar = fbar - c1 * mx - c2 * my
        out = np.where(ok, planar, fbar)
    return np.where(s0 > tiny, out, np.nan)


def highpass(values, mask, sigma: float) -> np.ndarray:
    """Remove the smooth offset of one phase map; NaN outside ``mask``."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyFieldError("no valid pixels")
    v = np.asarray(values, dtype=np.float64)
    out = v - masked_lowpass(v, m, sigma)
    out = np.where(m, out, np.nan)
    out -= np.mean(out[m])
    return out


def highpass_gradients(phase_x, phase_y, mask: ValidityMask, sigma: float | None = None,
                       scale: tuple[float, float] = (1.0, 1.0)) -> GradientMap:
    px = as_grid(phase_x, "phase_x", allow_nan=True)
    py = as_grid(phase_y, "phase_y", allow_nan=True)
    check_same_shape([px, py, mask.mask], "phase maps and mask")
    m = mask.mask & np.isfinite(px) & np.isfinite(py)
    if not m.any():
        raise EmptyFieldError("no valid pixels")
    if sigma is None:
        sigma = default_hp_sigma(m)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    vm = ValidityMask(m, mask.threshold)
    return GradientMap(highpass(px, m, sigma), highpass(py, m, sigma), vm, tuple(scale))
