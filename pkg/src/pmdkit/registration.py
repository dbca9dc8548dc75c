"""Multi-view registration: undistortion, feature matching, RANSAC homographies,
normal-map warping and blending."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np

from .core import (CameraIntrinsics, PMDError, bilinear_sample, distort_normalized,
                   undistort_normalized)
from .normals import NormalMap
from .phase import ValidityMask

log = logging.getLogger(__name__)

RATIO = 0.8
DEFAULT_INLIER_TOL = 2.0
DEFAULT_MAX_ITERS = 2000


class InsufficientFeaturesError(PMDError):
    pass


class RegistrationError(PMDError):
    pass


# -- distortion ---------------------------------------------------------------

def undistort_points(pts, K: CameraIntrinsics, iterations: int = 10) -> np.ndarray:
    """Map distorted pixel coordinates (N, 2) to ideal pinhole pixel coordinates."""
    pts = np.asarray(pts, dtype=np.float64)
    xd = (pts[..., 0] - K.cx) / K.fx
    yd = (pts[..., 1] - K.cy) / K.fy
    xu, yu = undistort_normalized(xd, yd, K.k1, K.k2, iterations)
    return np.stack([xu * K.fx + K.cx, yu * K.fy + K.cy], axis=-1)


def distort_points(pts, K: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    xu = (pts[..., 0] - K.cx) / K.fx
    yu = (pts[..., 1] - K.cy) / K.fy
    xd, yd = distort_normalized(xu, yu, K.k1, K.k2)
    return np.stack([xd * K.fx + K.cx, yd * K.fy + K.cy], axis=-1)


def _undistort_lookup(shape, K: CameraIntrinsics):
    h, w = shape
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    src = distort_points(np.stack([px, py], axis=-1), K)
    return src[..., 0], src[..., 1]


def undistort_image(img, K: CameraIntrinsics, fill: float = 0.0) -> np.ndarray:
    """Resample ``img`` onto the distortion-free pinhole grid of the same size."""
    img = np.asarray(img, dtype=np.float64)
    if not K.has_distortion:
        return img.copy()
    sx, sy = _undistort_lookup(img.shape, K)
    out = bilinear_sample(img, sx, sy)
    return np.where(np.isfinite(out), out, fill)


def distort_image(img, K: CameraIntrinsics, fill: float = 0.0) -> np.ndarray:
    """Inverse of :func:`undistort_image` (used to synthesize lens distortion)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    src = undistort_points(np.stack([px, py], axis=-1), K)
    out = bilinear_sample(img, src[..., 0], src[..., 1])
    return np.where(np.isfinite(out), out, fill)


def _resample_normals(nm: NormalMap, sx, sy) -> NormalMap:
    h, w = nm.shape
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    rx = np.clip(np.floor(sx + 0.5).astype(np.intp), 0, w - 1)
    ry = np.clip(np.floor(sy + 0.5).astype(np.intp), 0, h - 1)
    mask = inside & nm.mask.mask[ry, rx]
    chans = []
    for c in (nm.nx, nm.ny, nm.nz):
        filled = np.where(nm.mask.mask & np.isfinite(c), c, 0.0)
        chans.append(bilinear_sample(filled, sx, sy))
    v = np.stack(chans, axis=-1)
    norm = np.linalg.norm(np.where(mask[..., None], v, 0.0), axis=-1)
    mask &= norm > 1e-12
    # exact samples of unit vectors are left untouched
    norm = np.where(np.abs(norm - 1.0) < 1e-12, 1.0, norm)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = v / norm[..., None]
    v = np.where(mask[..., None], v, np.nan)
    return NormalMap(v[..., 0], v[..., 1], v[..., 2], ValidityMask(mask, nm.mask.threshold))


def undistort_normal_map(nm: NormalMap, K: CameraIntrinsics) -> NormalMap:
    if not K.has_distortion:
        return nm
    sx, sy = _undistort_lookup(nm.shape, K)
    return _resample_normals(nm, sx, sy)


# -- features -----------------------------------------------------------------

@dataclass
class MatchSet:
    """Point correspondences ``pts_a[i] <-> pts_b[i]`` with descriptor distances."""

    pts_a: np.ndarray
    pts_b: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.distances)


def _to_uint8(img) -> np.ndarray:
    a = np.nan_to_num(np.asarray(img, dtype=np.float64))
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-9:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.floor((a - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)


def detect_features(img) -> tuple[np.ndarray, np.ndarray]:
    """Scale-space extrema with orientation-normalized gradient descriptors (SIFT).

    Returns ``(points (N, 2), descriptors (N, 128))`` in a deterministic order.
    """
    sift = cv2.SIFT_create()
    kps, desc = sift.detectAndCompute(_to_uint8(img), None)
    if not kps:
        return np.zeros((0, 2)), np.zeros((0, 128), dtype=np.float32)
    pts = np.array([k.pt for k in kps], dtype=np.float64)
    order = np.lexsort((desc.sum(axis=1), pts[:, 0], pts[:, 1]))
    return pts[order], desc[order]


def match_descriptors(da: np.ndarray, db: np.ndarray, ratio: float = RATIO):
    """Mutual nearest neighbours that also pass the distance-ratio test.

    Returns index pairs ``(ia, ib)`` and distances.
    """
    if len(da) < 2 or len(db) < 2:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    a = da.astype(np.float64)
    b = db.astype(np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    d = np.sqrt(np.maximum(d2, 0.0))
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    two = np.partition(d, 1, axis=1)[:, :2]
    ia = np.arange(len(a))
    keep = (nn_ba[nn_ab] == ia) & (two[:, 0] <= ratio * two[:, 1])
    ia = ia[keep]
    ib = nn_ab[keep]
    return ia, ib, d[ia, ib]


def detect_and_match(white_a, white_b, min_matches: int = 4) -> MatchSet:
    pa, da = detect_features(white_a)
    pb, db = detect_features(white_b)
    ia, ib, dist = match_descriptors(da, db)
    log.debug("features %d / %d, matches %d", len(pa), len(pb), len(ia))
    if len(ia) < min_matches:
        raise InsufficientFeaturesError(
            f"only {len(ia)} matches ({len(pa)} and {len(pb)} features detected)")
    return MatchSet(pa[ia], pb[ib], dist)


# -- homographies -------------------------------------------------------------

def _hartley(pts):
    c = pts.mean(axis=0)
    s = np.sqrt(2) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _dlt_rows(a, b):
    # a, b: (..., n, 2) -> (..., 2n, 9)
    x, y = a[..., 0], a[..., 1]
    u, v = b[..., 0], b[..., 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _apply(T, pts):
    return pts @ T[:2, :2].T + T[:2, 2]


def apply_homography(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    ph = pts @ H[:, :2].T + H[:, 2]
    return ph[..., :2] / ph[..., 2:3]


def normalize_homography(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    return H / H[2, 2]


def dlt_homography(src, dst) -> np.ndarray:
    """Normalized DLT least-squares homography mapping ``src`` to ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise ValueError("need at least 4 correspondences")
    Ta, Tb = _hartley(src), _hartley(dst)
    A = _dlt_rows(_apply(Ta, src), _apply(Tb, dst))
    h = np.linalg.svd(A)[2][-1].reshape(3, 3)
    return normalize_homography(np.linalg.inv(Tb) @ h @ Ta)


def transfer_errors(H, pts_a, pts_b) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward transfer distances in pixels."""
    fwd = np.linalg.norm(apply_homography(H, pts_a) - pts_b, axis=-1)
    bwd = np.linalg.norm(apply_homography(np.linalg.inv(H), pts_b) - pts_a, axis=-1)
    return fwd, bwd


def _symmetric_error(H, a, b):
    fwd, bwd = transfer_errors(H, a, b)
    return np.sqrt(0.5 * (fwd ** 2 + bwd ** 2))


def estimate_homography_ransac(matches: MatchSet, inlier_tol: float = DEFAULT_INLIER_TOL,
                               max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0,
                               min_inliers: int = 10, min_inlier_ratio: float = 0.5):
    """Robust homography ``H`` with ``pts_b ~ H pts_a``.

    Hypotheses come from random 4-point samples; the one with most inliers
    (RMS symmetric transfer error below ``inlier_tol``) is refined by normalized
    DLT on its inliers. Matches are put in a canonical order before sampling,
    so the result does not depend on input order.
    """
    n = len(matches)
    if n < 4:
        raise RegistrationError(f"need at least 4 matches, got {n}")
    a_in = np.asarray(matches.pts_a, dtype=np.float64)
    b_in = np.asarray(matches.pts_b, dtype=np.float64)
    order = np.lexsort((b_in[:, 1], b_in[:, 0], a_in[:, 1], a_in[:, 0]))
    a, b = a_in[order], b_in[order]

    Ta, Tb = _hartley(a), _hartley(b)
    an, bn = _apply(Ta, a), _apply(Tb, b)
    Tb_inv = np.linalg.inv(Tb)
    rng = np.random.default_rng(seed)
    samples = np.array([rng.choice(n, 4, replace=False) for _ in range(max_iters)])

    best_count, best_cost, best_mask = -1, np.inf, None
    for chunk in np.array_split(samples, max(1, max_iters // 250)):
        A = _dlt_rows(an[chunk], bn[chunk])
        h = np.linalg.svd(A)[2][:, -1].reshape(-1, 3, 3)
        Hs = Tb_inv @ h @ Ta
        det = np.linalg.det(Hs)
        scale = np.abs(Hs).max(axis=(1, 2)) ** 3
        good = np.abs(det) > 1e-12 * scale
        for H in Hs[good]:
            with np.errstate(all="ignore"):
                err = _symmetric_error(H / H[2, 2], a, b)
            inl = err < inlier_tol
            count = int(inl.sum())
            if count < best_count or count == 0:
                continue
            cost = float(err[inl].sum())
            if count > best_count or cost < best_cost:
                best_count, best_cost, best_mask = count, cost, inl
    if best_mask is None:
        raise RegistrationError("no non-degenerate homography hypothesis")

    mask = best_mask
    H = dlt_homography(a[mask], b[mask])
    for _ in range(10):
        new = _symmetric_error(H, a, b) < inlier_tol
        if new.sum() < 4 or np.array_equal(new, mask):
            break
        mask = new
        H = dlt_homography(a[mask], b[mask])

    count = int(mask.sum())
    if count < min_inliers or count < min_inlier_ratio * n:
        raise RegistrationError(f"registration failed: {count} inliers of {n} matches")
    if abs(np.linalg.det(H)) <= 1e-12:
        raise RegistrationError("registration failed: singular homography")
    flags = np.zeros(n, dtype=bool)
    flags[order] = mask
    return H, flags


# -- warping and blending -----------------------------------------------------

def _snap(v, tol: float = 1e-9):
    r = np.round(v)
    return np.where(np.abs(v - r) < tol, r, v)


def warp_normal_map(nm: NormalMap, H, target_size: tuple[int, int]) -> NormalMap:
    """Inverse-warp a normal map into a ``(height, width)`` target frame.

    ``H`` maps source pixels to target pixels. Vector components are
    interpolated and renormalized, not rotated.
    """
    H = normalize_homography(H)
    if abs(np.linalg.det(H)) <= 1e-12:
        raise ValueError("homography is not invertible")
    th, tw = target_size
    ty, tx = np.mgrid[0:th, 0:tw].astype(np.float64)
    src = apply_homography(np.linalg.inv(H), np.stack([tx, ty], axis=-1))
    return _resample_normals(nm, _snap(src[..., 0]), _snap(src[..., 1]))


@dataclass
class StitchResult:
    normals: NormalMap
    offset: tuple[int, int]                 # canvas pixel (0, 0) in reference-view pixels (x, y)
    homographies: list                      # view -> canvas
    coverage: list                          # valid pixel count per warped view
    stitched_coverage: int
    disagreement: dict
    inlier_counts: list = field(default_factory=list)
    reprojection_errors: list = field(default_factory=list)


def _canvas(views):
    corners = []
    for nm, H in views:
        h, w = nm.shape
        c = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
        corners.append(apply_homography(normalize_homography(H), c))
    c = np.vstack(corners)
    x0, y0 = np.floor(c.min(axis=0) + 1e-6).astype(int)
    x1, y1 = np.ceil(c.max(axis=0) - 1e-6).astype(int)
    return (x0, y0), (y1 - y0 + 1, x1 - x0 + 1)


def blend_stitch(views) -> StitchResult:
    """Average all valid contributions per pixel on a canvas covering every view.

    ``views`` is a list of ``(NormalMap, H)`` with ``H`` mapping the view into
    the reference frame. Overlap disagreement is the mean pairwise angle
    between contributing normals, in degrees.
    """
    if not views:
        raise ValueError("need at least one view")
    (x0, y0), size = _canvas(views)
    shift = np.array([[1, 0, -x0], [0, 1, -y0], [0, 0, 1.0]])
    warped, homs = [], []
    for nm, H in views:
        Hc = shift @ normalize_homography(H)
        homs.append(Hc)
        warped.append(warp_normal_map(nm, Hc, size))

    acc = np.zeros(size + (3,))
    count = np.zeros(size, dtype=int)
    for w in warped:
        m = w.mask.mask
        acc[m] += w.stack()[m]
        count += m
    valid = count > 0
    norm = np.linalg.norm(acc, axis=-1)
    valid &= norm > 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(valid[..., None], acc / norm[..., None], np.nan)

    angles = []
    for i in range(len(warped)):
        for j in range(i + 1, len(warped)):
            both = warped[i].mask.mask & warped[j].mask.mask
            if both.any():
                dot = np.sum(warped[i].stack()[both] * warped[j].stack()[both], axis=-1)
                angles.append(np.degrees(np.arccos(np.clip(dot, -1.0, 1.0))))
    if angles:
        ang = np.concatenate(angles)
        stats = {"overlap_pixels": int(ang.size), "mean_deg": float(ang.mean()),
                 "median_deg": float(np.median(ang)), "max_deg": float(ang.max())}
    else:
        stats = {"overlap_pixels": 0, "mean_deg": 0.0, "median_deg": 0.0, "max_deg": 0.0}

    thr = max(v[0].mask.threshold for v in views)
    stitched = NormalMap(out[..., 0], out[..., 1], out[..., 2], ValidityMask(valid, thr))
    return StitchResult(stitched, (int(x0), int(y0)), homs, [w.mask.count for w in warped],
                        int(valid.sum()), stats)
