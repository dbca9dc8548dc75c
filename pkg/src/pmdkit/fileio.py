"""Image and product encodings: PFM, 8/16-bit PNG, normal-map RGB16, shaded previews."""
from __future__ import annotations

import logging
import re
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

LIGHT_DIR = np.array([-0.4, -0.5, -0.768])  # towards the light, camera side (nz < 0)


# -- PFM ----------------------------------------------------------------------

def write_pfm(path, data) -> None:
    """Little-endian PFM (scale -1.0); 2-D arrays as ``Pf``, (H, W, 3) as ``PF``."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3) data, got {a.shape}")
    h, w = a.shape[:2]
    body = np.ascontiguousarray(np.flipud(a)).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header: tag, dimensions, scale, each whitespace-terminated
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    chans = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(raw, dtype=dtype, count=w * h * chans, offset=m.end())
    a = a.reshape((h, w, chans) if chans == 3 else (h, w))
    return np.flipud(a).astype(np.float32)


# -- PNG ----------------------------------------------------------------------

def _luma(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])


def read_image(path) -> np.ndarray:
    """Load a capture as linear float gray in ``[0, 1]``.

    8/16-bit codes are divided by their maximum; colour inputs are reduced
    to luma. 8-bit inputs are accepted with a warning.
    """
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        a = read_pfm(path).astype(np.float64)
        return _luma(a) if a.ndim == 3 else a
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        log.warning("%s: 8-bit capture, phase accuracy will suffer from quantization", path.name)
        a = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        a = raw.astype(np.float64) / 65535.0
    else:
        a = raw.astype(np.float64)
    if a.ndim == 3:
        a = a[..., :3][..., ::-1]  # BGR(A) -> RGB
        a = _luma(a)
    return a


def quantize(data, bits: int = 16) -> np.ndarray:
    """Round-half-up to ``bits`` codes after clipping to ``[0, 1]``."""
    top = (1 << bits) - 1
    a = np.clip(np.nan_to_num(np.asarray(data, dtype=np.float64)), 0.0, 1.0)
    return np.floor(a * top + 0.5).astype(np.uint16 if bits > 8 else np.uint8)


def write_png(path, data, bits: int = 16) -> None:
    """Write gray (H, W) or RGB (H, W, 3) data in ``[0, 1]``."""
    q = quantize(data, bits)
    if q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"cannot write {path}")


# -- normal maps --------------------------------------------------------------

def encode_normals_rgb16(nx, ny, nz, mask) -> np.ndarray:
    """``code = round_half_up((n + 1) / 2 * 65535)``; invalid pixels are black."""
    n = np.stack([nx, ny, nz], axis=-1)
    codes = np.floor((np.nan_to_num(n) + 1.0) / 2.0 * 65535 + 0.5)
    codes = np.clip(codes, 0, 65535).astype(np.uint16)
    codes[~np.asarray(mask, dtype=bool)] = 0
    return codes


def decode_normals_rgb16(codes) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / 65535.0 * 2.0 - 1.0


def write_normals_png(path, nx, ny, nz, mask) -> None:
    codes = encode_normals_rgb16(nx, ny, nz, mask)
    if not cv2.imwrite(str(path), np.ascontiguousarray(codes[..., ::-1])):
        raise OSError(f"cannot write {path}")


def read_normals_png(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(normals (H, W, 3), mask)``; black pixels are invalid."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.ndim != 3:
        raise OSError(f"cannot read normal map {path}")
    codes = raw[..., :3][..., ::-1]
    mask = codes.any(axis=-1)
    return decode_normals_rgb16(codes), mask


def shade(nx, ny, nz, mask, light=LIGHT_DIR) -> np.ndarray:
    """Lambertian shading of a normal map for previews (0 where invalid)."""
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    s = np.nan_to_num(nx * light[0] + ny * light[1] + nz * light[2])
    return np.where(mask, np.clip(s, 0.0, 1.0), 0.0)
