"""Sparse pixel pseudo-labels drawn from an aggregated CAM."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .core import Cam, DomainError

N_BINS = 256
BACKGROUND = 0
FOREGROUND = 1
UNKNOWN = 255

# Right-closed bins: bin k covers (k/256, (k+1)/256], bin 0 also holds 0.
BIN_EDGES = np.linspace(0.0, 1.0, N_BINS + 1)
BIN_CENTERS = (BIN_EDGES[:-1] + BIN_EDGES[1:]) / 2.0


class DegenerateMapError(ValueError):
    """The map has no variance to split on."""


def bin_index(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.searchsorted(BIN_EDGES[1:], v, side="left"), 0, N_BINS - 1)


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over a 256-bin histogram of [0, 1].

    Foreground is every value strictly above the returned threshold, which is
    always a bin edge. Raises :class:`DegenerateMapError` when all values fall
    into a single bin.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("otsu_threshold of an empty array")
    if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
        raise DomainError("otsu_threshold expects finite values in [0, 1]")
    hist = np.bincount(bin_index(v).ravel(), minlength=N_BINS).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    w1 = total - w0
    m0 = np.cumsum(hist * BIN_CENTERS)[:-1]
    m1 = (hist * BIN_CENTERS).sum() - m0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        raise DegenerateMapError("map values fall in a single histogram bin")
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (m0 / w0 - m1 / w1) ** 2 / total**2
    between[~valid] = -1.0
    k = int(np.argmax(between))
    return float(BIN_EDGES[k + 1])


@dataclass(frozen=True)
class RegionSplit:
    foreground: np.ndarray
    threshold: float
    degenerate: bool = False

    @property
    def background(self) -> np.ndarray:
        return ~self.foreground


def split_regions(cam: Cam | np.ndarray) -> RegionSplit:
    """Foreground is every pixel above Otsu's threshold; the rest is background.

    A map with no variance yields an empty foreground flagged ``degenerate``.
    """
    values = cam.values if isinstance(cam, Cam) else np.asarray(cam)
    try:
        thr = otsu_threshold(values)
    except DegenerateMapError:
        return RegionSplit(np.zeros(values.shape, dtype=bool), float("nan"), degenerate=True)
    return RegionSplit(np.asarray(values, dtype=np.float64) > thr, thr)


@dataclass(frozen=True)
class PseudoLabelMask:
    """Per-pixel labels: 0 background, 1 foreground, 255 unknown."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.uint8)
        if lab.ndim != 2:
            raise DomainError("pseudo-label mask must be 2-D")
        if not np.isin(lab, (BACKGROUND, FOREGROUND, UNKNOWN)).all():
            raise DomainError("pseudo-labels must be 0, 1 or UNKNOWN")
        object.__setattr__(self, "labels", lab)

    @classmethod
    def unknown(cls, shape) -> "PseudoLabelMask":
        return cls(np.full(shape, UNKNOWN, dtype=np.uint8))

    @property
    def n_labeled(self) -> int:
        return int((self.labels != UNKNOWN).sum())

    def locations(self, label: int) -> np.ndarray:
        return np.argwhere(self.labels == label)


def sample_pseudo_labels(split: RegionSplit, cam: Cam | np.ndarray, rng: np.random.Generator,
                         n_fg: int = 1, n_bg: int = 1) -> PseudoLabelMask:
    """Draw foreground pixels proportionally to activation, background uniformly.

    If either region is empty the mask is entirely unknown and the frame gets
    no pixel supervision.
    """
    values = cam.values if isinstance(cam, Cam) else np.asarray(cam)
    if values.shape != split.foreground.shape:
        raise DomainError("cam and region split disagree on shape")
    mask = np.full(values.shape, UNKNOWN, dtype=np.uint8)
    fg_idx = np.flatnonzero(split.foreground)
    bg_idx = np.flatnonzero(split.background)
    if split.degenerate or fg_idx.size == 0 or bg_idx.size == 0:
        return PseudoLabelMask(mask)
    w = values.ravel()[fg_idx].astype(np.float64)
    w = w / w.sum()
    fg_pick = rng.choice(fg_idx, size=n_fg, p=w)
    bg_pick = rng.choice(bg_idx, size=n_bg)
    flat = mask.ravel()
    flat[bg_pick] = BACKGROUND
    flat[fg_pick] = FOREGROUND
    return PseudoLabelMask(mask)


def frame_rng(seed: int, epoch: int, frame_key: str) -> np.random.Generator:
    """Independent stream per (seed, epoch, frame) so workers stay reproducible."""
    return np.random.default_rng([int(seed), int(epoch), zlib.crc32(frame_key.encode())])
