"""Temporal sequence selection and CAM temporal max pooling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Cam, DomainError


@dataclass(frozen=True)
class CamSequence:
    """CAMs ordered newest first: ``[C_t, C_{t-1}, ...]``."""

    cams: tuple[Cam, ...]
    n: int

    def __post_init__(self):
        if not self.cams:
            raise DomainError("empty CAM sequence")
        if self.n < 0:
            raise DomainError("temporal dependency n must be >= 0")
        shape = self.cams[0].values.shape
        for c in self.cams[1:]:
            if c.values.shape != shape:
                raise DomainError(
                    f"CAM shape mismatch in sequence: {c.values.shape} vs {shape}"
                )

    @property
    def current(self) -> Cam:
        return self.cams[0]

    def __len__(self):
        return len(self.cams)


def sequence_indices(t: int, n: int, shot_start: int, shot_end: int) -> list[int]:
    """Frame indices ``t, t-1, ..., max(shot_start, t-n)``; ``shot_end`` inclusive."""
    if n < 0:
        raise DomainError("temporal dependency n must be >= 0")
    if not shot_start <= t <= shot_end:
        raise DomainError(f"frame {t} outside shot [{shot_start}, {shot_end}]")
    return list(range(t, max(shot_start, t - n) - 1, -1))


def select_sequence(shot_cams: Mapping[int, Cam] | Sequence[Cam], t: int, n: int) -> CamSequence:
    """Gather ``C_t`` and up to ``n`` predecessors from one shot.

    ``shot_cams`` maps frame index to CAM (a list is taken as indexed from 0).
    The window is clamped at the start of the shot, never crossing into
    another shot.
    """
    if not isinstance(shot_cams, Mapping):
        shot_cams = dict(enumerate(shot_cams))
    if not shot_cams:
        raise DomainError("empty shot")
    idx = sequence_indices(t, n, min(shot_cams), max(shot_cams))
    if t not in shot_cams:
        raise DomainError(f"frame {t} not in shot")
    return CamSequence(tuple(shot_cams[i] for i in idx if i in shot_cams), n)


def max_pool_arrays(arrays) -> np.ndarray:
    """Pixelwise maximum over a non-empty stack of equally-shaped maps."""
    arrays = list(arrays)
    if not arrays:
        raise DomainError("empty CAM sequence")
    out = np.array(arrays[0], copy=True)
    for a in arrays[1:]:
        if a.shape != out.shape:
            raise DomainError(f"CAM shape mismatch: {a.shape} vs {out.shape}")
        np.maximum(out, a, out=out)
    return out


def cam_tmp(seq: CamSequence) -> Cam:
    """Temporal max pooling; metadata is taken from the newest CAM."""
    pooled = max_pool_arrays(c.values for c in seq.cams)
    return Cam(pooled, frame_index=seq.current.frame_index, class_id=seq.current.class_id)


class CamTemporalMaxPool(TransformerMixin, BaseEstimator):
    """Stateless transformer over a (T, H, W) stack of one shot's CAMs.

    Row ``t`` of the output is the max over rows ``max(0, t - n) .. t``.
    """

    def __init__(self, n: int = 1):
        self.n = n

    def fit(self, X, y=None):
        if self.n < 0:
            raise ValueError("n must be >= 0")
        return self

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim != 3:
            raise ValueError(f"expected (T, H, W) CAM stack, got shape {X.shape}")
        out = np.empty_like(X)
        for t in range(X.shape[0]):
            out[t] = X[max(0, t - self.n): t + 1].max(axis=0)
        return out
