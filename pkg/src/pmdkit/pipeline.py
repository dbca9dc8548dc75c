"""Bundle manifests, the single- and multi-view pipelines, and product encoding."""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CameraIntrinsics, CaptureBundle, CaptureGeometry, PMDError
from .fileio import read_image, shade, write_normals_png, write_pfm, write_png
from .normals import (DepthMap, NormalMap, integrate_frankot_chellappa, normals_from_gradients,
                      phase_to_slope_scale)
from .patterns import build_sequence
from .phase import (GradientMap, ValidityMask, default_hp_sigma, highpass_gradients, retrieve_phase,
                    unwrap_single_period, unwrap_two_freq, validity_mask)
from .registration import (InsufficientFeaturesError, RegistrationError, StitchResult,
                           blend_stitch, detect_and_match, estimate_homography_ransac,
                           transfer_errors, undistort_image, undistort_normal_map)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ALL_FORMATS = ("png16", "pfm", "preview")


class ManifestError(PMDError, ValueError):
    pass


class BundleLoadError(PMDError, OSError):
    pass


class PipelineError(PMDError):
    pass


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class Config:
    hp_sigma: Optional[float] = None
    mod_threshold: float = 0.02
    scale: str = "none"
    seed: int = 0
    ransac_tol: float = 2.0
    ransac_iters: int = 2000
    jobs: int = 1
    debug_intermediates: bool = False
    formats: tuple = ALL_FORMATS

    def __post_init__(self):
        if self.scale not in ("none", "geometric"):
            raise ValueError(f"scale must be 'none' or 'geometric', got {self.scale!r}")
        bad = set(self.formats) - set(ALL_FORMATS)
        if bad:
            raise ValueError(f"unknown output formats: {sorted(bad)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["formats"] = list(self.formats)
        return d


def resolve_config(manifest_defaults: dict | None = None, overrides: dict | None = None) -> Config:
    """Merge settings: explicit override > manifest default > built-in default.

    ``None`` values in ``overrides`` mean "not given".
    """
    names = {f.name for f in dataclasses.fields(Config)}
    merged = {}
    for source in (manifest_defaults or {}, overrides or {}):
        for k, v in source.items():
            if k not in names:
                raise ValueError(f"unknown setting {k!r}")
            if v is not None:
                merged[k] = v
    if "formats" in merged:
        f = merged["formats"]
        merged["formats"] = tuple(f.split(",") if isinstance(f, str) else f)
    return Config(**merged)


# -- manifests ----------------------------------------------------------------

@dataclass
class ViewEntry:
    directory: str
    fringes: list
    white: Optional[str] = None
    reference_fringes: Optional[list] = None
    geometry: Optional[dict] = None
    name: str = ""


@dataclass
class Manifest:
    root: Path
    views: list
    frequency: int = 1
    intrinsics: Optional[dict] = None
    geometry: Optional[dict] = None
    defaults: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        views = []
        for v in self.views:
            e = {"directory": v.directory, "fringes": list(v.fringes)}
            if v.white:
                e["white"] = v.white
            if v.reference_fringes:
                e["reference_fringes"] = list(v.reference_fringes)
            if v.geometry:
                e["geometry"] = v.geometry
            views.append(e)
        d = {"schema_version": self.schema_version, "frequency": self.frequency, "views": views}
        if self.intrinsics:
            d["intrinsics"] = self.intrinsics
        if self.geometry:
            d["geometry"] = self.geometry
        if self.defaults:
            d["defaults"] = self.defaults
        return d


def parse_manifest(data: dict, root: Path) -> Manifest:
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    raw_views = data.get("views")
    if not isinstance(raw_views, list) or not raw_views:
        raise ManifestError("manifest lists no views")
    freq = data.get("frequency", 1)
    if not isinstance(freq, int) or freq < 1:
        raise ManifestError(f"frequency must be a positive integer, got {freq!r}")
    views = []
    for i, v in enumerate(raw_views, start=1):
        name = f"view {i}"
        if not isinstance(v, dict) or "fringes" not in v:
            raise ManifestError(f"{name}: missing fringe list")
        fr = v["fringes"]
        if not isinstance(fr, list) or len(fr) != 8:
            n = len(fr) if isinstance(fr, list) else "no"
            raise ManifestError(f"{name}: expected 8 fringe images, got {n}")
        ref = v.get("reference_fringes")
        if ref is not None and (not isinstance(ref, list) or len(ref) != 8):
            raise ManifestError(f"{name}: expected 8 reference fringe images")
        for rel in [v.get("directory", "."), *fr, *(ref or []), v.get("white") or "."]:
            if not isinstance(rel, str) or Path(rel).is_absolute() or ".." in Path(rel).parts:
                raise ManifestError(f"{name}: file references must be relative paths inside the bundle")
        views.append(ViewEntry(str(v.get("directory", ".")), [str(f) for f in fr], v.get("white"),
                               ref, v.get("geometry"), name))
    defaults = data.get("defaults") or {}
    try:
        resolve_config(defaults)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"bad processing defaults: {exc}") from None
    return Manifest(Path(root), views, freq, data.get("intrinsics"), data.get("geometry"), defaults)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    return parse_manifest(data, path.parent)


def check_manifest_files(m: Manifest, require_white: bool = False) -> None:
    for v in m.views:
        names = list(v.fringes) + list(v.reference_fringes or [])
        if v.white:
            names.append(v.white)
        elif require_white:
            raise ManifestError(f"{v.name}: white image required for multi-view processing")
        for f in names:
            p = m.root / v.directory / f
            if not p.is_file():
                raise BundleLoadError(f"{v.name}: missing file {Path(v.directory, f).as_posix()}")


def _read(path: Path) -> np.ndarray:
    try:
        return read_image(path)
    except OSError as exc:
        raise BundleLoadError(f"cannot load {path.name}: {exc}") from None


def load_bundle(manifest_path, frequency: int | None = None) -> list:
    """Decode every view of a manifest into a :class:`CaptureBundle`."""
    m = load_manifest(manifest_path)
    if frequency is not None:
        m.frequency = int(frequency)
    check_manifest_files(m)
    intr = CameraIntrinsics.from_dict(m.intrinsics) if m.intrinsics else None
    bundles = []
    for v in m.views:
        d = m.root / v.directory
        fr = [_read(d / f) for f in v.fringes]
        white = _read(d / v.white) if v.white else None
        ref = [_read(d / f) for f in v.reference_fringes] if v.reference_fringes else None
        geo = v.geometry or m.geometry
        bundles.append(CaptureBundle(fr, m.frequency, white, intr,
                                     CaptureGeometry.from_dict(geo) if geo else None, ref, v.name))
    return bundles


def write_bundle(bundles, out_dir, defaults: dict | None = None) -> Path:
    """Write bundles as 16-bit PNGs plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    seq = [f"{s.orientation[0]}{s.phase_index}" for s in build_sequence(1)]
    for i, b in enumerate(bundles, start=1):
        sub = f"view_{i:02d}"
        (out / sub).mkdir(exist_ok=True)
        names = [f"fringe_{tag}.png" for tag in seq]
        for n, img in zip(names, b.fringe_images):
            write_png(out / sub / n, img, 16)
        white = None
        if b.white_image is not None:
            white = "white.png"
            write_png(out / sub / white, b.white_image, 16)
        ref = None
        if b.reference_images is not None:
            ref = [f"reference_{tag}.png" for tag in seq]
            for n, img in zip(ref, b.reference_images):
                write_png(out / sub / n, img, 16)
        geo = b.geometry.to_dict() if b.geometry else None
        views.append(ViewEntry(sub, names, white, ref, geo))
    first = bundles[0]
    m = Manifest(out, views, int(first.frequency),
                 first.intrinsics.to_dict() if first.intrinsics else None, None, defaults or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# -- simulated bundles --------------------------------------------------------

def scenes_from_description(desc: dict, seed: int | None = None) -> list:
    """Build one :class:`SyntheticScene` per entry of ``desc["views"]``."""
    from .simulator import Albedo, make_analytic_surface, make_scene

    surf = dict(desc.get("surface", {"kind": "flat"}))
    albedo = surf.pop("albedo", None)
    if isinstance(albedo, dict):
        albedo = Albedo(**albedo)
    kind = surf.pop("kind", "flat")
    if "extent" in surf:
        surf["extent"] = tuple(surf["extent"])
    surface = make_analytic_surface(kind, albedo=albedo, **surf)
    keys = ("width", "height", "standoff_mm", "focal_px", "pitch_mm", "k1", "k2", "ambient",
            "diffuse", "specular_fraction", "noise_sigma")
    kw = {k: desc[k] for k in keys if k in desc}
    if "screen_px" in desc:
        kw["screen_px"] = tuple(desc["screen_px"])
    base_seed = int(desc.get("seed", 0) if seed is None else seed)
    views = desc.get("views") or [{}]
    scenes = []
    for i, v in enumerate(views):
        scenes.append(make_scene(surface, camera_xy=tuple(v.get("camera_xy", (0.0, 0.0))),
                                 seed=base_seed + i, **kw))
    return scenes


def simulate_to_dir(desc: dict, out_dir, seed: int | None = None, frequency: int | None = None) -> Path:
    from .simulator import render_bundle

    freq = int(frequency or desc.get("frequency", 1))
    scenes = scenes_from_description(desc, seed)
    bundles = [render_bundle(s, freq, name=f"view {i}") for i, s in enumerate(scenes, start=1)]
    return write_bundle(bundles, out_dir, desc.get("defaults"))


# -- single view --------------------------------------------------------------

@dataclass
class SingleViewResult:
    normals: NormalMap
    gradients: GradientMap
    depth: DepthMap
    hp_sigma: float
    intermediates: dict = field(default_factory=dict)


def _unwrapped(fringes, ref, frequency: int, extent_px, threshold: float):
    r = retrieve_phase(*fringes)
    valid = validity_mask(r.modulation, threshold).mask
    inter = {"phase": r.phase, "modulation": r.modulation, "bias": r.bias}
    if frequency == 1:
        return unwrap_single_period(r.phase, extent_px), valid, inter
    if ref is None:
        raise PipelineError(f"frequency {frequency} needs frequency-1 reference images to unwrap")
    lo = retrieve_phase(*ref)
    valid &= validity_mask(lo.modulation, threshold).mask
    lo_phase = unwrap_single_period(lo.phase, extent_px)
    return unwrap_two_freq(lo_phase, r.phase, frequency), valid, inter


def run_single_view(bundle: CaptureBundle, config: Config = Config()) -> SingleViewResult:
    geo = bundle.geometry
    ext_u = geo.screen.width_px if geo else None
    ext_v = geo.screen.height_px if geo else None
    ref = bundle.reference_images
    thr = config.mod_threshold
    px, mx, ix = _unwrapped(bundle.fringe_images[:4], ref[:4] if ref else None,
                            bundle.frequency, ext_u, thr)
    py, my, iy = _unwrapped(bundle.fringe_images[4:], ref[4:] if ref else None,
                            bundle.frequency, ext_v, thr)
    mask = ValidityMask(mx & my, thr)
    if mask.count == 0:
        raise PipelineError(f"{bundle.name}: no valid pixels")

    scale = (1.0, 1.0)
    if config.scale == "geometric":
        if geo is None:
            raise PipelineError(f"{bundle.name}: geometric scale needs screen geometry")
        scale = (phase_to_slope_scale(geo.screen, geo.standoff_mm, bundle.frequency, "u"),
                 phase_to_slope_scale(geo.screen, geo.standoff_mm, bundle.frequency, "v"))
    sigma = config.hp_sigma or default_hp_sigma(mask.mask)
    grads = highpass_gradients(px, py, mask, sigma, scale)
    normals = normals_from_gradients(grads)
    depth = integrate_frankot_chellappa(grads)
    inter = {}
    if config.debug_intermediates:
        for tag, d, unwrapped in (("x", ix, px), ("y", iy, py)):
            for k, v in d.items():
                inter[f"{k}_{tag}"] = v
            inter[f"unwrapped_{tag}"] = unwrapped
    return SingleViewResult(normals, grads, depth, float(sigma), inter)


# -- multi view ---------------------------------------------------------------

@dataclass
class MultiViewResult:
    stitch: StitchResult
    report: dict
    views: list


def _map_views(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_multi_view(bundles, config: Config = Config()) -> MultiViewResult:
    """Single-view reconstruction per view, then sequential registration to view 1."""
    if len(bundles) < 2:
        raise PipelineError("multi-view processing needs at least 2 views")
    for b in bundles:
        if b.white_image is None:
            raise PipelineError(f"{b.name}: white image required for multi-view processing")
    singles = _map_views(lambda b: run_single_view(b, config), bundles, config.jobs)

    def prepare(pair):
        b, s = pair
        if b.intrinsics is not None and b.intrinsics.has_distortion:
            return undistort_image(b.white_image, b.intrinsics), undistort_normal_map(s.normals, b.intrinsics)
        return b.white_image, s.normals

    prepared = _map_views(prepare, list(zip(bundles, singles)), config.jobs)
    whites = [p[0] for p in prepared]
    normal_maps = [p[1] for p in prepared]

    chain = [np.eye(3)]
    pairs = []
    for i in range(1, len(bundles)):
        tag = f"({i}, {i + 1})"
        try:
            matches = detect_and_match(whites[i], whites[i - 1])
            H, inl = estimate_homography_ransac(matches, config.ransac_tol, config.ransac_iters,
                                                config.seed)
        except (InsufficientFeaturesError, RegistrationError) as exc:
            raise RegistrationError(f"registration failed for view pair {tag}: {exc}") from None
        fwd, _ = transfer_errors(H, matches.pts_a[inl], matches.pts_b[inl])
        chain.append(chain[-1] @ H)
        pairs.append({"pair": [i, i + 1], "matches": len(matches), "inliers": int(inl.sum()),
                      "mean_reprojection_px": float(fwd.mean()),
                      "homography": [[float(v) for v in row] for row in H]})

    stitch = blend_stitch(list(zip(normal_maps, chain)))
    stitch.inlier_counts = [None] + [p["inliers"] for p in pairs]
    stitch.reprojection_errors = [None] + [p["mean_reprojection_px"] for p in pairs]
    report = {
        "views": len(bundles),
        "pairs": pairs,
        "canvas_offset": list(stitch.offset),
        "canvas_size": list(stitch.normals.shape),
        "coverage": stitch.coverage,
        "stitched_coverage": stitch.stitched_coverage,
        "overlap_disagreement": stitch.disagreement,
        "chain_to_reference": [[[float(v) for v in row] for row in H] for H in chain],
    }
    return MultiViewResult(stitch, report, singles)


# -- outputs ------------------------------------------------------------------

def _write_normals(out: Path, nm: NormalMap, formats, written: list) -> None:
    m = nm.mask.mask
    if "png16" in formats:
        write_normals_png(out / "normals.png", nm.nx, nm.ny, nm.nz, m)
        written.append(out / "normals.png")
    if "pfm" in formats:
        write_pfm(out / "normals.pfm", nm.stack())
        written.append(out / "normals.pfm")
    if "preview" in formats:
        write_png(out / "preview.png", shade(nm.nx, nm.ny, nm.nz, m), 8)
        written.append(out / "preview.png")


def _write_json(path: Path, obj, written: list) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    written.append(path)


def encode_outputs(result: SingleViewResult, out_dir, formats=ALL_FORMATS) -> list:
    """Write one view's products; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    _write_normals(out, result.normals, formats, written)
    if "pfm" in formats:
        gx, gy = result.gradients.scaled()
        for name, arr in (("gradient_x", gx), ("gradient_y", gy), ("depth", result.depth.z)):
            write_pfm(out / f"{name}.pfm", arr)
            written.append(out / f"{name}.pfm")
        for name, arr in sorted(result.intermediates.items()):
            write_pfm(out / f"{name}.pfm", arr)
            written.append(out / f"{name}.pfm")
    summary = {"valid_pixels": result.normals.mask.count, "hp_sigma": result.hp_sigma,
               "scale": list(result.gradients.scale), "shape": list(result.normals.shape)}
    _write_json(out / "summary.json", summary, written)
    return written


def encode_multi_outputs(result: MultiViewResult, out_dir, formats=ALL_FORMATS) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    _write_normals(out, result.stitch.normals, formats, written)
    _write_json(out / "registration.json", result.report, written)
    return written


def process_manifest(manifest_path, out_dir, overrides: dict | None = None,
                     mode: str = "single-view", frequency: int | None = None) -> list:
    """Load, process and encode a bundle; shared by the CLI and the HTTP service."""
    manifest = load_manifest(manifest_path)
    config = resolve_config(manifest.defaults, overrides)
    bundles = load_bundle(manifest_path, frequency)
    out = Path(out_dir)
    if mode == "multi-view":
        return encode_multi_outputs(run_multi_view(bundles, config), out, config.formats)
    if mode != "single-view":
        raise ValueError(f"unknown mode {mode!r}")
    results = _map_views(lambda b: run_single_view(b, config), bundles, config.jobs)
    if len(results) == 1:
        return encode_outputs(results[0], out, config.formats)
    written = []
    for i, r in enumerate(results, start=1):
        written += encode_outputs(r, out / f"view_{i:02d}", config.formats)
    return written
