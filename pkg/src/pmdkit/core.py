"""Shared raster, geometry and capture types.

Images are plain 2-D ``float64`` numpy arrays indexed ``[row, col]``, i.e.
``[y, x]`` with the origin at the top-left pixel. Intensities are linear and
nominally in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class PMDError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(PMDError, ValueError):
    pass


class InvalidFrequencyError(PMDError, ValueError):
    pass


class EmptyFieldError(PMDError):
    pass


def as_grid(data, name: str = "image", allow_nan: bool = False) -> np.ndarray:
    """Validate and convert ``data`` to a 2-D float64 image grid."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D grid, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name}: empty grid")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values in intensity grid")
    return arr


def check_same_shape(grids: Sequence[np.ndarray], what: str = "images") -> tuple[int, int]:
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise DimensionError(f"{what} differ in size: {sorted(shapes)}")
    return shapes.pop()


def bilinear_sample(img: np.ndarray, x, y):
    """Bilinearly interpolate ``img`` at column ``x`` and row ``y``.

    ``x`` and ``y`` may be scalars or broadcastable arrays. Points outside
    ``[0, width-1] x [0, height-1]`` return NaN, which is the "outside"
    sentinel; callers must not rely on clamping.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    # last row/column: step back one cell so x == w-1 interpolates with weight 1
    x0 = np.minimum(x0, max(w - 2, 0))
    y0 = np.minimum(y0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0

    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bottom = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bottom * fy
    # exact-pixel lookups must return the stored value even next to NaN
    exact = (fx == 0) & (fy == 0)
    out = np.where(exact, v00, out)
    out = np.where(inside, out, np.nan)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "k1": self.k1, "k2": self.k2}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   float(d.get("k1", 0.0)), float(d.get("k2", 0.0)))


def distort_normalized(xu, yu, k1: float, k2: float):
    """Forward radial model ``x_d = x_u (1 + k1 r^2 + k2 r^4)``."""
    r2 = xu * xu + yu * yu
    f = 1.0 + k1 * r2 + k2 * r2 * r2
    return xu * f, yu * f


def undistort_normalized(xd, yd, k1: float, k2: float, iterations: int = 10):
    """Invert :func:`distort_normalized` by fixed-point iteration."""
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    xu, yu = xd.copy(), yd.copy()
    if k1 == 0.0 and k2 == 0.0:
        return xu, yu
    for _ in range(iterations):
        r2 = xu * xu + yu * yu
        f = 1.0 + k1 * r2 + k2 * r2 * r2
        xu = xd / f
        yu = yd / f
    return xu, yu


def _vec3(v) -> tuple[float, float, float]:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return (float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ScreenGeometry:
    """A flat display in world coordinates (mm).

    Screen pixel ``(u, v)`` sits at ``origin + u * u_axis + v * v_axis``.
    """

    origin: tuple[float, float, float]
    u_axis: tuple[float, float, float]
    v_axis: tuple[float, float, float]
    width_px: int
    height_px: int

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "u_axis", _vec3(self.u_axis))
        object.__setattr__(self, "v_axis", _vec3(self.v_axis))
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("screen resolution must be at least 1x1")
        if np.linalg.norm(np.cross(self.u_axis, self.v_axis)) < 1e-12:
            raise ValueError("screen axes are linearly dependent")

    @property
    def width_mm(self) -> float:
        return self.width_px * float(np.linalg.norm(self.u_axis))

    @property
    def height_mm(self) -> float:
        return self.height_px * float(np.linalg.norm(self.v_axis))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u_axis, self.v_axis)
        return n / np.linalg.norm(n)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "u_axis": list(self.u_axis),
                "v_axis": list(self.v_axis), "width_px": self.width_px,
                "height_px": self.height_px}

    @classmethod
    def from_dict(cls, d: dict) -> "ScreenGeometry":
        return cls(d["origin"], d["u_axis"], d["v_axis"], int(d["width_px"]), int(d["height_px"]))

    @classmethod
    def centered(cls, center, width_px: int = 2048, height_px: int = 1536,
                 pitch_mm: float = 0.1) -> "ScreenGeometry":
        """Screen parallel to the z=const plane, axes along world +x/+y."""
        c = np.asarray(center, dtype=np.float64)
        origin = c - np.array([width_px * pitch_mm / 2, height_px * pitch_mm / 2, 0.0])
        return cls(origin, (pitch_mm, 0.0, 0.0), (0.0, pitch_mm, 0.0), width_px, height_px)


@dataclass(frozen=True)
class CameraPose:
    """Camera center and world-from-camera rotation (columns are camera axes)."""

    position: tuple[float, float, float]
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", tuple(tuple(float(v) for v in row) for row in r))

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation)

    def to_dict(self) -> dict:
        return {"position": list(self.position), "rotation": [list(r) for r in self.rotation]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(d["position"], d.get("rotation", ((1, 0, 0), (0, 1, 0), (0, 0, 1))))


@dataclass(frozen=True)
class CaptureGeometry:
    """Screen placement, camera pose and nominal standoff of one capture."""

    screen: ScreenGeometry
    pose: Optional[CameraPose] = None
    standoff_mm: float = 200.0

    def to_dict(self) -> dict:
        d = {"screen": self.screen.to_dict(), "standoff_mm": self.standoff_mm}
        if self.pose is not None:
            d["pose"] = self.pose.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CaptureGeometry":
        pose = CameraPose.from_dict(d["pose"]) if d.get("pose") else None
        return cls(ScreenGeometry.from_dict(d["screen"]), pose, float(d.get("standoff_mm", 200.0)))


@dataclass
class CaptureBundle:
    """All images captured from one viewpoint.

    ``fringe_images`` holds 8 grids ordered horizontal m=1..4 then vertical
    m=1..4. ``reference_images`` optionally holds the same 8-image sequence
    at frequency 1, used for temporal unwrapping when ``frequency > 1``.
    """

    fringe_images: list
    frequency: int = 1
    white_image: Optional[np.ndarray] = None
    intrinsics: Optional[CameraIntrinsics] = None
    geometry: Optional[CaptureGeometry] = None
    reference_images: Optional[list] = None
    name: str = "view"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.fringe_images) != 8:
            raise DimensionError(f"{self.name}: expected 8 fringe images, got {len(self.fringe_images)}")
        if int(self.frequency) < 1:
            raise InvalidFrequencyError(f"{self.name}: frequency must be >= 1")
        self.fringe_images = [as_grid(g, f"{self.name} fringe {i + 1}")
                              for i, g in enumerate(self.fringe_images)]
        grids = list(self.fringe_images)
        if self.white_image is not None:
            self.white_image = as_grid(self.white_image, f"{self.name} white")
            grids.append(self.white_image)
        if self.reference_images is not None:
            if len(self.reference_images) != 8:
                raise DimensionError(f"{self.name}: expected 8 reference images")
            self.reference_images = [as_grid(g, f"{self.name} reference {i + 1}")
                                     for i, g in enumerate(self.reference_images)]
            grids.extend(self.reference_images)
        try:
            check_same_shape(grids)
        except DimensionError as exc:
            raise DimensionError(f"{self.name}: {exc}") from None

    @property
    def shape(self) -> tuple[int, int]:
        return self.fringe_images[0].shape
