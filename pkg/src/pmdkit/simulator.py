"""Forward renderer for deflectometry captures of analytic specular heightfields.

World frame: ``x`` right, ``y`` down, ``z`` pointing from the device towards
the object. The object surface lies near ``z = 0`` and is described as a
depth offset ``z = h(x, y)``; device (camera and screen) sit at
``z = -standoff``. With this frame the camera-facing normal of the surface is
``(h_x, h_y, -1) / norm``, the same convention the reconstruction uses.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import (CameraIntrinsics, CameraPose, CaptureBundle, CaptureGeometry, ScreenGeometry,
                   bilinear_sample, undistort_normalized)
from .normals import NormalMap
from .patterns import HORIZONTAL, PatternSpec, build_sequence, gen_fringe
from .phase import ValidityMask

MARCH_STEP_MM = 0.1
BISECTION_ITERS = 40


# -- surfaces -----------------------------------------------------------------

@dataclass(frozen=True)
class Albedo:
    """Diffuse reflectance texture over object coordinates in mm."""

    kind: str = "uniform"
    value: float = 1.0
    low: float = 0.2
    high: float = 1.0
    cell_mm: float = 1.0
    seed: int = 0
    extent_mm: float = 400.0

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "uniform":
            return np.full(np.broadcast(x, y).shape, float(self.value))
        if self.kind == "checker":
            parity = (np.floor(x / self.cell_mm) + np.floor(y / self.cell_mm)) % 2
            return np.where(parity == 0, self.high, self.low)
        if self.kind == "noise":
            tex = _noise_texture(self.seed, self.extent_mm, self.cell_mm, self.low, self.high)
            half = self.extent_mm / 2
            cx = (x + half) / self.cell_mm
            cy = (y + half) / self.cell_mm
            coords = np.stack([np.ravel(cy), np.ravel(cx)])
            vals = map_coordinates(tex, coords, order=1, mode="nearest")
            return vals.reshape(np.broadcast(x, y).shape)
        raise ValueError(f"unknown albedo kind {self.kind!r}")


@lru_cache(maxsize=8)
def _noise_texture(seed: int, extent_mm: float, cell_mm: float, low: float, high: float) -> np.ndarray:
    n = int(np.ceil(extent_mm / cell_mm)) + 1
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.random((n, n)), 1.0)
    lo, hi = np.percentile(tex, [1, 99])
    tex = np.clip((tex - lo) / (hi - lo), 0.0, 1.0)
    return low + (high - low) * tex


@dataclass(frozen=True)
class HeightField:
    """Analytic depth relief ``h(x, y)`` in mm with exact gradients.

    ``kind`` is one of ``flat``, ``sinusoid`` or ``gaussian_bumps``.
    ``bumps`` holds ``(x0, y0, height)`` triples for the latter.
    """

    kind: str = "flat"
    amp: float = 0.0
    period: float = 20.0
    axis: str = "x"
    sigma: float = 5.0
    bumps: tuple = ()
    extent: tuple[float, float] = (400.0, 400.0)
    albedo: Albedo = Albedo()

    @property
    def bound(self) -> float:
        """Upper bound on ``|h|``."""
        if self.kind == "gaussian_bumps":
            return float(sum(abs(b[2]) for b in self.bumps))
        return abs(self.amp)

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "flat":
            return np.zeros(np.broadcast(x, y).shape)
        if self.kind == "sinusoid":
            k = 2 * np.pi / self.period
            if self.axis == "x":
                return self.amp * np.sin(k * x) + 0.0 * y
            if self.axis == "y":
                return self.amp * np.sin(k * y) + 0.0 * x
            return self.amp * np.sin(k * x) * np.cos(k * y)
        if self.kind == "gaussian_bumps":
            z = np.zeros(np.broadcast(x, y).shape)
            for x0, y0, a in self.bumps:
                z = z + a * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * self.sigma ** 2))
            return z
        raise ValueError(f"unknown surface kind {self.kind!r}")

    def gradient(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        shape = np.broadcast(x, y).shape
        if self.kind == "flat":
            return np.zeros(shape), np.zeros(shape)
        if self.kind == "sinusoid":
            k = 2 * np.pi / self.period
            zero = np.zeros(shape)
            if self.axis == "x":
                return self.amp * k * np.cos(k * x) + zero, zero
            if self.axis == "y":
                return zero, self.amp * k * np.cos(k * y) + zero
            return (self.amp * k * np.cos(k * x) * np.cos(k * y),
                    -self.amp * k * np.sin(k * x) * np.sin(k * y))
        if self.kind == "gaussian_bumps":
            gx = np.zeros(shape)
            gy = np.zeros(shape)
            s2 = self.sigma ** 2
            for x0, y0, a in self.bumps:
                e = a * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * s2))
                gx = gx - (x - x0) / s2 * e
                gy = gy - (y - y0) / s2 * e
            return gx, gy
        raise ValueError(f"unknown surface kind {self.kind!r}")

    def contains(self, x, y):
        return (np.abs(x) <= self.extent[0] / 2) & (np.abs(y) <= self.extent[1] / 2)


def make_analytic_surface(kind: str = "flat", *, amp: float = 0.1, period: float = 20.0,
                          axis: str = "x", seed: int = 0, sigma: float = 5.0, count: int = 12,
                          spread_mm: float = 50.0, extent=(400.0, 400.0),
                          albedo: Albedo | None = None) -> HeightField:
    """Test-surface factory for shallow relief (``amp <= 1 mm``)."""
    if abs(amp) > 1.0:
        raise ValueError("amplitude must be at most 1 mm (shallow relief)")
    albedo = albedo or Albedo()
    extent = (float(extent[0]), float(extent[1]))
    if kind == "flat":
        return HeightField("flat", 0.0, extent=extent, albedo=albedo)
    if kind == "sinusoid":
        if axis not in ("x", "y", "xy"):
            raise ValueError(f"unknown sinusoid axis {axis!r}")
        return HeightField("sinusoid", float(amp), float(period), axis, extent=extent, albedo=albedo)
    if kind == "gaussian_bumps":
        rng = np.random.default_rng(seed)
        xy = rng.uniform(-spread_mm, spread_mm, size=(count, 2))
        heights = rng.uniform(-amp, amp, size=count)
        bumps = tuple((float(a), float(b), float(c)) for (a, b), c in zip(xy, heights))
        return HeightField("gaussian_bumps", float(amp), sigma=float(sigma), bumps=bumps,
                           extent=extent, albedo=albedo)
    raise ValueError(f"unknown surface kind {kind!r}")


# -- scene --------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticScene:
    surface: HeightField
    screen: ScreenGeometry
    intrinsics: CameraIntrinsics
    pose: CameraPose
    width: int = 512
    height: int = 512
    ambient: float = 0.05
    diffuse: float = 0.0
    specular_fraction: float = 0.9
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pose.position[2] >= -self.surface.bound:
            raise ValueError("camera must be in front of the surface (negative z)")
        if self.screen.origin[2] >= -self.surface.bound:
            raise ValueError("screen must be in front of the surface (negative z)")

    @property
    def standoff_mm(self) -> float:
        return -self.pose.position[2]

    @property
    def geometry(self) -> CaptureGeometry:
        return CaptureGeometry(self.screen, self.pose, self.standoff_mm)

    def shifted(self, dx: float, dy: float) -> "SyntheticScene":
        """Move camera and screen together parallel to the object plane."""
        p = np.array(self.pose.position) + [dx, dy, 0.0]
        o = np.array(self.screen.origin) + [dx, dy, 0.0]
        return dataclasses.replace(self, pose=dataclasses.replace(self.pose, position=tuple(p)),
                                   screen=dataclasses.replace(self.screen, origin=tuple(o)))


def make_scene(surface: HeightField | None = None, *, width: int = 512, height: int = 512,
               standoff_mm: float = 200.0, focal_px: float = 600.0, camera_xy=(0.0, 0.0),
               screen_px=(2048, 1536), pitch_mm: float = 0.1, screen_offset=(0.0, 0.0),
               k1: float = 0.0, k2: float = 0.0, **kw) -> SyntheticScene:
    """Tablet-like scene: camera looking down +z, screen coplanar and centered on it."""
    surface = surface or make_analytic_surface("flat")
    cam = np.array([camera_xy[0], camera_xy[1], -standoff_mm], dtype=np.float64)
    screen = ScreenGeometry.centered(cam + [screen_offset[0], screen_offset[1], 0.0],
                                     screen_px[0], screen_px[1], pitch_mm)
    intr = CameraIntrinsics(focal_px, focal_px, (width - 1) / 2, (height - 1) / 2, k1, k2)
    return SyntheticScene(surface, screen, intr, CameraPose(tuple(cam)), width, height, **kw)


# -- tracing ------------------------------------------------------------------

def reflect_ray(d, n):
    """Mirror ``d`` about the plane with unit normal ``n``: ``d - 2 (d.n) n``."""
    d = np.asarray(d, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if (np.any(np.abs(np.linalg.norm(d, axis=-1) - 1) > 1e-9)
            or np.any(np.abs(np.linalg.norm(n, axis=-1) - 1) > 1e-9)):
        raise ValueError("reflect_ray needs unit vectors")
    return d - 2 * np.sum(d * n, axis=-1, keepdims=True) * n


@dataclass
class TraceResult:
    hit: np.ndarray          # ray reached the surface inside its extent
    points: np.ndarray       # (H, W, 3) surface points, NaN on miss
    normals: np.ndarray      # (H, W, 3) camera-facing unit normals
    screen_u: np.ndarray     # continuous screen column, NaN off-screen
    screen_v: np.ndarray
    on_screen: np.ndarray    # reflected ray lands inside the screen


def camera_rays(scene: SyntheticScene) -> np.ndarray:
    """Unit world-space ray directions for every pixel, shape (H, W, 3)."""
    K = scene.intrinsics
    py, px = np.mgrid[0:scene.height, 0:scene.width].astype(np.float64)
    xd = (px - K.cx) / K.fx
    yd = (py - K.cy) / K.fy
    xu, yu = undistort_normalized(xd, yd, K.k1, K.k2)
    d = np.stack([xu, yu, np.ones_like(xu)], axis=-1)
    d = d @ scene.pose.R.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def intersect_heightfield(surface: HeightField, origin: np.ndarray, dirs: np.ndarray):
    """Ray march with a fixed step, then refine by bisection.

    Returns ``(t, hit)`` for rays ``origin + t * dirs`` (``dirs`` of shape (N, 3)).
    """
    o = np.asarray(origin, dtype=np.float64)
    dz = dirs[:, 2]
    n = dirs.shape[0]
    t_hit = np.full(n, np.nan)
    forward = dz > 1e-9
    margin = surface.bound + MARCH_STEP_MM

    def gap(t, idx):
        p = o + t[:, None] * dirs[idx]
        return p[:, 2] - surface.height(p[:, 0], p[:, 1])

    idx = np.flatnonzero(forward)
    t = (-margin - o[2]) / dz[idx]
    t_end = (margin - o[2]) / dz[idx]
    lo = t.copy()
    hi = np.full(idx.size, np.nan)
    active = np.ones(idx.size, dtype=bool)
    while active.any():
        a = np.flatnonzero(active)
        t_next = t[a] + MARCH_STEP_MM
        crossed = gap(t_next, idx[a]) >= 0
        done = a[crossed]
        lo[done] = t[done]
        hi[done] = t_next[crossed]
        t[a] = t_next
        active[done] = False
        active[a[~crossed & (t_next > t_end[a])]] = False

    found = np.isfinite(hi)
    fi = np.flatnonzero(found)
    a, b = lo[fi], hi[fi]
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (a + b)
        above = gap(mid, idx[fi]) < 0
        a = np.where(above, mid, a)
        b = np.where(above, b, mid)
    t_hit[idx[fi]] = 0.5 * (a + b)
    return t_hit, np.isfinite(t_hit)


def intersect_screen(screen: ScreenGeometry, points: np.ndarray, dirs: np.ndarray):
    """Continuous screen pixel coordinates hit by rays; NaN where off-screen."""
    O = np.array(screen.origin)
    U = np.array(screen.u_axis)
    V = np.array(screen.v_axis)
    N = screen.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = dirs @ N
        t = ((O - points) @ N) / denom
        q = points + t[:, None] * dirs - O
    gram = np.array([[U @ U, U @ V], [U @ V, V @ V]])
    uv = np.linalg.solve(gram, np.stack([q @ U, q @ V]))
    u, v = uv
    ok = (np.abs(denom) > 1e-12) & (t > 0)
    ok &= (u >= 0) & (u <= screen.width_px - 1) & (v >= 0) & (v <= screen.height_px - 1)
    return np.where(ok, u, np.nan), np.where(ok, v, np.nan), ok


@lru_cache(maxsize=16)
def trace_scene(scene: SyntheticScene) -> TraceResult:
    """Per-pixel camera -> surface -> screen light paths (shared by all patterns)."""
    h, w = scene.height, scene.width
    dirs = camera_rays(scene).reshape(-1, 3)
    origin = np.array(scene.pose.position)
    t, hit = intersect_heightfield(scene.surface, origin, dirs)
    pts = origin + np.where(hit, t, 0.0)[:, None] * dirs
    hit &= scene.surface.contains(pts[:, 0], pts[:, 1])

    gx, gy = scene.surface.gradient(pts[:, 0], pts[:, 1])
    nrm = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    refl = reflect_ray(dirs, nrm)
    u, v, on = intersect_screen(scene.screen, pts, refl)
    on &= hit

    nan3 = np.full(3, np.nan)
    pts = np.where(hit[:, None], pts, nan3)
    nrm = np.where(hit[:, None], nrm, nan3)
    return TraceResult(hit.reshape(h, w), pts.reshape(h, w, 3), nrm.reshape(h, w, 3),
                       np.where(on, u, np.nan).reshape(h, w), np.where(on, v, np.nan).reshape(h, w),
                       on.reshape(h, w))


# -- rendering ----------------------------------------------------------------

@lru_cache(maxsize=32)
def _pattern(spec: PatternSpec, screen: ScreenGeometry) -> np.ndarray:
    return gen_fringe(spec, screen)


def _spec_code(spec: PatternSpec) -> int:
    return (0 if spec.orientation == HORIZONTAL else 4) + spec.phase_index + 8 * spec.frequency


def _add_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    if sigma > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        img = img + sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _diffuse_base(scene: SyntheticScene, tr: TraceResult) -> np.ndarray:
    base = np.full(tr.hit.shape, float(scene.ambient))
    if scene.diffuse:
        alb = scene.surface.albedo(tr.points[..., 0][tr.hit], tr.points[..., 1][tr.hit])
        base[tr.hit] += scene.diffuse * alb
    return base


def render_pattern_image(scene: SyntheticScene, spec: PatternSpec,
                         noise_seed: Optional[int] = None) -> np.ndarray:
    """Camera image of the screen showing ``spec``, reflected off the surface.

    ``noise_seed`` selects the sensor-noise realisation; by default it is
    derived from the scene seed and the pattern.
    """
    tr = trace_scene(scene)
    img = _diffuse_base(scene, tr)
    s = bilinear_sample(_pattern(spec, scene.screen), tr.screen_u[tr.on_screen], tr.screen_v[tr.on_screen])
    img[tr.on_screen] += scene.specular_fraction * s
    seed = noise_seed if noise_seed is not None else (scene.seed, _spec_code(spec))
    return _add_noise(img, scene.noise_sigma, seed)


def render_white_image(scene: SyntheticScene, noise_seed: Optional[int] = None) -> np.ndarray:
    """Diffuse-only view under room light: ``ambient * albedo`` on the surface."""
    tr = trace_scene(scene)
    img = np.zeros(tr.hit.shape)
    img[tr.hit] = scene.ambient * scene.surface.albedo(tr.points[..., 0][tr.hit], tr.points[..., 1][tr.hit])
    seed = noise_seed if noise_seed is not None else (scene.seed, 0)
    return _add_noise(img, scene.noise_sigma, seed)


def render_bundle(scene: SyntheticScene, frequency: int = 1, with_reference: bool | None = None,
                  name: str = "view") -> CaptureBundle:
    fringes = [render_pattern_image(scene, s) for s in build_sequence(frequency)]
    ref = None
    if with_reference or (with_reference is None and frequency > 1):
        ref = [render_pattern_image(scene, s) for s in build_sequence(1)]
    return CaptureBundle(fringes, frequency, render_white_image(scene), scene.intrinsics,
                         scene.geometry, ref, name)


def ground_truth_normals(scene: SyntheticScene, valid_only: bool = True) -> NormalMap:
    """Exact surface normals seen by each pixel; masked to the screen-lit field by default."""
    tr = trace_scene(scene)
    m = tr.on_screen if valid_only else tr.hit
    n = np.where(m[..., None], tr.normals, np.nan)
    return NormalMap(n[..., 0], n[..., 1], n[..., 2], ValidityMask(m.copy(), 0.0))


def screen_footprint(scene: SyntheticScene) -> np.ndarray:
    return trace_scene(scene).on_screen.copy()


def clear_caches() -> None:
    """Drop memoized traces, screen patterns and albedo textures."""
    trace_scene.cache_clear()
    _pattern.cache_clear()
    _noise_texture.cache_clear()
