"""Decoder training objective: partial cross-entropy, size barrier and CRF term.

The batched ``*_t`` functions work on torch tensors and are what the training
loop differentiates. ``partial_cross_entropy``, ``size_barrier``, ``crf_loss``
and ``total_loss`` are thin float-returning wrappers over domain types.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DomainError, Frame, SoftmaxMaps
from .pseudo import BACKGROUND, FOREGROUND, PseudoLabelMask

LOG_EPS = 1e-8


@dataclass
class LossConfig:
    lambda_crf: float = 2e-9
    barrier_t: float = 1.0
    barrier_factor: float = 1.01
    barrier_max: float = 10.0
    crf_sigma_rgb: float = 15.0 / 255.0
    crf_sigma_xy: float = 100.0
    crf_downsample: int = 4
    use_pixel: bool = True
    use_crf: bool = True
    use_size: bool = True

    def __post_init__(self):
        if self.lambda_crf < 0:
            raise ValueError("lambda_crf must be >= 0")
        if not 1.0 <= self.barrier_t <= self.barrier_max:
            raise ValueError(f"barrier_t must lie in [1, {self.barrier_max}]")
        if self.crf_downsample < 1:
            raise ValueError("crf_downsample must be >= 1")

    def barrier_at(self, epoch: int) -> float:
        """Log-barrier ``t`` after ``epoch`` multiplicative increases, capped."""
        return min(self.barrier_t * self.barrier_factor ** epoch, self.barrier_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    partial_ce: float
    size_barrier: float
    crf: float
    total: float
    lambda_crf: float = 0.0

    def __post_init__(self):
        for k in ("partial_ce", "size_barrier", "crf", "total"):
            if not math.isfinite(getattr(self, k)):
                raise FloatingPointError(f"non-finite loss term {k}")

    def as_dict(self) -> dict:
        return {"partial_ce": self.partial_ce, "size_barrier": self.size_barrier,
                "crf": self.crf, "total": self.total}


# -- batched torch terms -----------------------------------------------------

def partial_ce_t(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample sum of cross-entropy over labeled pixels.

    ``probs`` is (B, 2, H, W) ordered background/foreground; ``labels`` is
    (B, H, W) with 0/1 at labeled pixels and anything else ignored.
    """
    bg = (labels == BACKGROUND).to(probs.dtype)
    fg = (labels == FOREGROUND).to(probs.dtype)
    log_bg = torch.log(probs[:, 0].clamp_min(LOG_EPS))
    log_fg = torch.log(probs[:, 1].clamp_min(LOG_EPS))
    return -(bg * log_bg + fg * log_fg).sum(dim=(1, 2))


def extended_log_barrier(z: torch.Tensor, t: float) -> torch.Tensor:
    """Log-barrier for ``z <= 0`` with a linear extension past ``-1/t**2``."""
    thr = -1.0 / t**2
    interior = -torch.log((-z).clamp_min(LOG_EPS)) / t
    linear = t * z - math.log(1.0 / t**2) / t + 1.0 / t
    return torch.where(z <= thr, interior, linear)


def size_barrier_t(probs: torch.Tensor, t: float) -> torch.Tensor:
    """Per-sample barrier pushing both normalized region sizes upward."""
    sizes = probs.mean(dim=(2, 3))  # (B, 2)
    return extended_log_barrier(-sizes, t).sum(dim=1)


def _pool(x: torch.Tensor, factor: int) -> torch.Tensor:
    return x if factor == 1 else F.avg_pool2d(x, factor, factor)


def crf_kernel(image: torch.Tensor, sigma_rgb: float, sigma_xy: float, factor: int = 1) -> torch.Tensor:
    """Dense Gaussian affinity over (colour, position) with a zero diagonal.

    ``image`` is a (3, h, w) already-downsampled frame; positions are measured
    in full-resolution pixels (cell centres times ``factor``).
    """
    _, h, w = image.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=image.dtype), torch.arange(w, dtype=image.dtype), indexing="ij"
    )
    xy = torch.stack([xs, ys]).reshape(2, -1).T * factor
    rgb = image.reshape(3, -1).T
    feats = torch.cat([rgb / sigma_rgb, xy / sigma_xy], dim=1)
    sq = (feats * feats).sum(1)
    d2 = (sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T).clamp_min(0.0)
    W = torch.exp(-0.5 * d2)
    W.fill_diagonal_(0.0)
    return W


def crf_loss_t(probs: torch.Tensor, images: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Per-sample relaxed dense-CRF energy ``sum_r S_r^T W (1 - S_r)``."""
    f = cfg.crf_downsample
    p = _pool(probs, f)
    im = _pool(images.to(probs.dtype), f)
    if p.shape[-1] < 2 or p.shape[-2] < 2:
        raise DomainError("CRF domain smaller than 2x2 after downsampling")
    out = []
    for b in range(p.shape[0]):
        W = crf_kernel(im[b], cfg.crf_sigma_rgb, cfg.crf_sigma_xy, f)
        s = p[b].reshape(2, -1)
        out.append(((s @ W) * (1.0 - s)).sum())
    return torch.stack(out)


def total_loss_t(probs, labels, images, cfg: LossConfig, barrier_t: float | None = None):
    """Batch-mean total loss plus the per-term batch means (detached floats)."""
    t = cfg.barrier_t if barrier_t is None else barrier_t
    zero = probs.sum() * 0.0
    pce = partial_ce_t(probs, labels).mean() if cfg.use_pixel else zero
    size = size_barrier_t(probs, t).mean() if cfg.use_size else zero
    crf = crf_loss_t(probs, images, cfg).mean() if cfg.use_crf else zero
    if not cfg.use_pixel and not cfg.use_crf and not cfg.use_size:
        total = zero.detach()
    else:
        total = pce + cfg.lambda_crf * crf + size
    pce_v, size_v, crf_v = (v.detach().item() for v in (pce, size, crf))
    breakdown = LossBreakdown(
        partial_ce=pce_v, size_barrier=size_v, crf=crf_v,
        total=pce_v + cfg.lambda_crf * crf_v + size_v,
        lambda_crf=cfg.lambda_crf,
    )
    return total, breakdown


# -- domain-type wrappers ----------------------------------------------------

def _probs(maps: SoftmaxMaps) -> torch.Tensor:
    return torch.from_numpy(maps.stacked()).unsqueeze(0)


def _image(frame: Frame) -> torch.Tensor:
    return torch.from_numpy(frame.pixels.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)


def _check_domains(shape_a, shape_b):
    if tuple(shape_a) != tuple(shape_b):
        raise DomainError(f"domain mismatch: {tuple(shape_a)} vs {tuple(shape_b)}")


def partial_cross_entropy(mask: PseudoLabelMask, maps: SoftmaxMaps) -> float:
    _check_domains(mask.labels.shape, maps.foreground.shape)
    labels = torch.from_numpy(mask.labels.astype(np.int64)).unsqueeze(0)
    return float(partial_ce_t(_probs(maps), labels)[0])


def size_barrier(maps: SoftmaxMaps, barrier_t: float) -> float:
    if barrier_t < 1.0:
        raise ValueError("barrier_t must be >= 1")
    return float(size_barrier_t(_probs(maps), barrier_t)[0])


def crf_loss(maps: SoftmaxMaps, frame: Frame, cfg: LossConfig) -> float:
    _check_domains(frame.pixels.shape[:2], maps.foreground.shape)
    return float(crf_loss_t(_probs(maps), _image(frame), cfg)[0])


def total_loss(mask: PseudoLabelMask, maps: SoftmaxMaps, frame: Frame, cfg: LossConfig) -> LossBreakdown:
    _check_domains(mask.labels.shape, maps.foreground.shape)
    _check_domains(frame.pixels.shape[:2], maps.foreground.shape)
    labels = torch.from_numpy(mask.labels.astype(np.int64)).unsqueeze(0)
    _, breakdown = total_loss_t(_probs(maps), labels, _image(frame), cfg)
    return breakdown
