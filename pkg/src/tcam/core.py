"""Domain types shared by every stage of the pipeline.

All types are frozen dataclasses wrapping numpy arrays; constructors validate
their invariants and never copy more than needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_SIDE = 8
FLAT_EPS = 1e-8


class DomainError(ValueError):
    """Raised when an input violates a domain-type invariant."""


@dataclass(frozen=True)
class ImageDomain:
    height: int
    width: int

    def __post_init__(self):
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise DomainError(
                f"image domain must be at least {MIN_SIDE}x{MIN_SIDE}, got "
                f"{self.height}x{self.width}"
            )

    @property
    def size(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def of(cls, array: np.ndarray) -> "ImageDomain":
        return cls(int(array.shape[0]), int(array.shape[1]))


def _check_unit_range(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise DomainError(f"{name} values must lie in [0, 1]")


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    frame_index: int = 0
    shot_id: str = ""
    video_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise DomainError(f"frame pixels must be HxWx3, got {p.shape}")
        _check_unit_range(p, "frame")
        if self.frame_index < 0:
            raise DomainError("frame_index must be >= 0")
        object.__setattr__(self, "pixels", p)

    @property
    def domain(self) -> ImageDomain:
        return ImageDomain.of(self.pixels)


@dataclass(frozen=True)
class VideoLabel:
    class_id: int
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise DomainError("need at least two classes")
        if not 0 <= self.class_id < self.n_classes:
            raise DomainError(f"class_id {self.class_id} outside [0, {self.n_classes})")


@dataclass(frozen=True)
class Cam:
    values: np.ndarray
    frame_index: int = 0
    class_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise DomainError(f"cam must be 2-D, got shape {v.shape}")
        _check_unit_range(v, "cam")
        object.__setattr__(self, "values", v)

    @property
    def domain(self) -> ImageDomain:
        return ImageDomain.of(self.values)

    @property
    def is_flat(self) -> bool:
        return float(self.values.max() - self.values.min()) < FLAT_EPS


@dataclass(frozen=True)
class SoftmaxMaps:
    """Two-channel per-pixel distribution: background and foreground."""

    background: np.ndarray
    foreground: np.ndarray
    atol: float = field(default=1e-6, repr=False)

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=np.float64)
        fg = np.asarray(self.foreground, dtype=np.float64)
        if bg.shape != fg.shape or bg.ndim != 2:
            raise DomainError("background/foreground must be matching 2-D arrays")
        _check_unit_range(bg, "background")
        _check_unit_range(fg, "foreground")
        if np.abs(bg + fg - 1.0).max() > self.atol:
            raise DomainError("softmax channels must sum to 1 at every pixel")
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "foreground", fg)

    @classmethod
    def from_foreground(cls, foreground: np.ndarray) -> "SoftmaxMaps":
        fg = np.asarray(foreground, dtype=np.float64)
        return cls(1.0 - fg, fg)

    def stacked(self) -> np.ndarray:
        """Return a (2, H, W) array ordered background, foreground."""
        return np.stack([self.background, self.foreground])


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Half-open pixel box ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x_min < 0 or self.y_min < 0:
            raise DomainError(f"negative box coordinates: {self}")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise DomainError(f"degenerate (zero-area) box: {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def within(self, domain: ImageDomain) -> bool:
        return self.x_max <= domain.width and self.y_max <= domain.height

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        """Rescale into another resolution, keeping at least one pixel."""
        x0, y0 = int(np.floor(self.x_min * sx)), int(np.floor(self.y_min * sy))
        x1 = max(int(np.ceil(self.x_max * sx)), x0 + 1)
        y1 = max(int(np.ceil(self.y_max * sy)), y0 + 1)
        return BoundingBox(x0, y0, x1, y1)

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords) -> "BoundingBox":
        if len(coords) != 4:
            raise DomainError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(int(round(float(c))) for c in coords))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two half-open boxes."""
    if a.area <= 0 or b.area <= 0:
        raise DomainError("iou of a degenerate box")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / float(a.area + b.area - inter)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; flat maps (range below 1e-8) become all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < FLAT_EPS:
        return np.zeros(v.shape, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)
