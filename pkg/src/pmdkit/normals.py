"""Normal maps from gradient maps, and Frankot-Chellappa depth integration.

Normals follow the camera-facing convention ``n = (gx, gy, -1) / norm``:
``x`` to the right, ``y`` down the image, ``z`` away from the camera.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmptyFieldError, ScreenGeometry
from .phase import GradientMap, ValidityMask


@dataclass
class NormalMap:
    nx: np.ndarray
    ny: np.ndarray
    nz: np.ndarray
    mask: ValidityMask

    @property
    def shape(self) -> tuple[int, int]:
        return self.nx.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.nx, self.ny, self.nz], axis=-1)

    def slopes(self) -> tuple[np.ndarray, np.ndarray]:
        """Invert the normal construction back to ``(gx, gy)``."""
        return self.nx / -self.nz, self.ny / -self.nz


@dataclass
class DepthMap:
    z: np.ndarray
    mask: ValidityMask


def normals_from_gradients(g: GradientMap) -> NormalMap:
    gx, gy = g.scaled()
    inv = 1.0 / np.sqrt(gx * gx + gy * gy + 1.0)
    m = g.mask.mask
    nx = np.where(m, gx * inv, np.nan)
    ny = np.where(m, gy * inv, np.nan)
    nz = np.where(m, -inv, np.nan)
    return NormalMap(nx, ny, nz, g.mask)


def phase_to_slope_scale(geometry: ScreenGeometry | float, standoff_mm: float, frequency: int,
                         axis: str = "u") -> float:
    """Small-angle slope per radian of phase, ``W / (4 pi nu d)``.

    A slope change ``ds`` tilts the reflected ray by ``2 ds`` and moves its
    screen hit by about ``2 d ds``. ``geometry`` may be the screen or the
    screen extent ``W`` in mm along the modulated ``axis``.
    """
    if isinstance(geometry, ScreenGeometry):
        extent = geometry.width_mm if axis == "u" else geometry.height_mm
    else:
        extent = float(geometry)
    if standoff_mm <= 0 or extent <= 0:
        raise ValueError("standoff and screen extent must be positive")
    return extent / (4 * np.pi * frequency * standoff_mm)


def _mirror_pad(gx: np.ndarray, gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # even extension of z: gx is odd across vertical folds, gy across horizontal ones
    fx = np.fliplr(gx)
    fy = np.fliplr(gy)
    top_x = np.hstack([gx, -fx])
    top_y = np.hstack([gy, fy])
    px = np.vstack([top_x, np.flipud(top_x)])
    py = np.vstack([top_y, -np.flipud(top_y)])
    return px, py


def frankot_chellappa(gx, gy, pad: bool = True) -> np.ndarray:
    """Least-squares integrable surface for a dense gradient field."""
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    h, w = gx.shape
    if pad:
        gx, gy = _mirror_pad(gx, gy)
    rows, cols = gx.shape
    wx = 2 * np.pi * np.fft.fftfreq(cols)[None, :]
    wy = 2 * np.pi * np.fft.fftfreq(rows)[:, None]
    Gx = np.fft.fft2(gx)
    Gy = np.fft.fft2(gy)
    denom = wx * wx + wy * wy
    denom[0, 0] = 1.0
    Z = -1j * (wx * Gx + wy * Gy) / denom
    Z[0, 0] = 0.0
    z = np.real(np.fft.ifft2(Z))
    return z[:h, :w]


def integrate_frankot_chellappa(g: GradientMap) -> DepthMap:
    """Integrate a gradient map to relative depth.

    Invalid pixels are treated as zero gradient; there is no inpainting.
    """
    m = g.mask.mask
    if not m.any():
        raise EmptyFieldError("no valid pixels")
    gx, gy = g.scaled()
    gx = np.where(m & np.isfinite(gx), gx, 0.0)
    gy = np.where(m & np.isfinite(gy), gy, 0.0)
    z = frankot_chellappa(gx, gy)
    z -= z[m].mean()
    return DepthMap(np.where(m, z, np.nan), g.mask)
