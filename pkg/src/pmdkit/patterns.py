"""Phase-shifted sinusoidal screen patterns."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidFrequencyError, ScreenGeometry

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class PatternSpec:
    """One displayed sinusoid.

    ``orientation`` names the screen axis along which intensity is modulated:
    ``horizontal`` varies with the screen column ``u``, ``vertical`` with the
    screen row ``v``.
    """

    orientation: str
    frequency: int
    phase_index: int

    def __post_init__(self):
        if self.orientation not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if int(self.frequency) != self.frequency or self.frequency < 1:
            raise InvalidFrequencyError(f"frequency must be a positive integer, got {self.frequency}")
        if self.phase_index not in (1, 2, 3, 4):
            raise ValueError(f"phase index must be in 1..4, got {self.phase_index}")

    @property
    def phase_shift(self) -> float:
        return (self.phase_index - 1) * np.pi / 2


def fringe_profile(u, extent: float, frequency: int, phase_shift: float):
    """Screen intensity ``0.5 + 0.5 cos(2 pi nu u / W - phi_m)``."""
    return 0.5 + 0.5 * np.cos(2 * np.pi * frequency * np.asarray(u, dtype=np.float64) / extent - phase_shift)


def gen_fringe(spec: PatternSpec, screen: ScreenGeometry) -> np.ndarray:
    h, w = screen.height_px, screen.width_px
    if spec.orientation == HORIZONTAL:
        row = fringe_profile(np.arange(w), w, spec.frequency, spec.phase_shift)
        return np.broadcast_to(row[None, :], (h, w)).copy()
    col = fringe_profile(np.arange(h), h, spec.frequency, spec.phase_shift)
    return np.broadcast_to(col[:, None], (h, w)).copy()


def build_sequence(frequency: int) -> list[PatternSpec]:
    """The 8-pattern capture order: horizontal m=1..4, then vertical m=1..4."""
    if int(frequency) != frequency or frequency < 1:
        raise InvalidFrequencyError(f"frequency must be a positive integer, got {frequency}")
    frequency = int(frequency)
    return [PatternSpec(o, frequency, m) for o in (HORIZONTAL, VERTICAL) for m in (1, 2, 3, 4)]


def export_pattern(pattern: np.ndarray, gamma: float | None = None, bits: int = 8) -> np.ndarray:
    """Quantize a pattern for display; ``gamma`` pre-compensates a display response."""
    p = np.clip(pattern, 0.0, 1.0)
    if gamma is not None:
        p = p ** (1.0 / gamma)
    top = (1 << bits) - 1
    dtype = np.uint8 if bits <= 8 else np.uint16
    return np.floor(p * top + 0.5).astype(dtype)
