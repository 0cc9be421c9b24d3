import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tcam.core import DomainError, Frame, SoftmaxMaps
from tcam.losses import (
    LossConfig, crf_loss, crf_loss_t, extended_log_barrier, partial_cross_entropy,
    partial_ce_t, size_barrier, size_barrier_t, total_loss,
)
from tcam.pseudo import BACKGROUND, FOREGROUND, UNKNOWN, PseudoLabelMask

from conftest import dense_crf_loop

FD_STEP = 1e-6
FD_RTOL = 1e-4


def central_differences(fn, x: np.ndarray, h=FD_STEP) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` by central differences."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic(fn, x: np.ndarray) -> np.ndarray:
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def one_hot_mask(shape, fg, bg):
    lab = np.full(shape, UNKNOWN, dtype=np.uint8)
    lab[fg] = FOREGROUND
    lab[bg] = BACKGROUND
    return PseudoLabelMask(lab)


# -- partial cross-entropy ---------------------------------------------------

def test_pce_perfect_prediction():
    fg = np.zeros((8, 8))
    fg[1, 1] = 1.0
    mask = one_hot_mask((8, 8), (1, 1), (5, 5))
    assert partial_cross_entropy(mask, SoftmaxMaps.from_foreground(fg)) == 0.0


def test_pce_half_half():
    maps = SoftmaxMaps.from_foreground(np.full((8, 8), 0.5))
    mask = one_hot_mask((8, 8), (1, 1), (5, 5))
    assert partial_cross_entropy(mask, maps) == pytest.approx(2 * -math.log(0.5), abs=1e-12)
    assert partial_cross_entropy(mask, maps) == pytest.approx(1.3863, abs=1e-4)


def test_pce_all_unknown():
    maps = SoftmaxMaps.from_foreground(np.full((8, 8), 0.3))
    assert partial_cross_entropy(PseudoLabelMask.unknown((8, 8)), maps) == 0.0


def test_pce_zero_probability_clamped():
    fg = np.zeros((8, 8))
    mask = one_hot_mask((8, 8), (0, 0), (1, 1))
    val = partial_cross_entropy(mask, SoftmaxMaps.from_foreground(fg))
    assert val == pytest.approx(-math.log(1e-8))


def test_pce_ignores_unknown_pixels(rng):
    fg = rng.uniform(0.05, 0.95, size=(8, 8))
    mask = one_hot_mask((8, 8), (2, 2), (6, 1))
    base = partial_cross_entropy(mask, SoftmaxMaps.from_foreground(fg))
    fg2 = rng.uniform(0.05, 0.95, size=(8, 8))
    fg2[2, 2], fg2[6, 1] = fg[2, 2], fg[6, 1]
    assert partial_cross_entropy(mask, SoftmaxMaps.from_foreground(fg2)) == base


def test_pce_gradient(rng):
    for _ in range(20):
        x = rng.uniform(0.05, 0.95, size=(1, 2, 8, 8))
        labels = np.full((1, 8, 8), UNKNOWN, dtype=np.int64)
        idx = rng.choice(64, size=4, replace=False)
        labels.reshape(-1)[idx[:2]] = FOREGROUND
        labels.reshape(-1)[idx[2:]] = BACKGROUND
        lt = torch.from_numpy(labels)

        def f(arr):
            t = arr if torch.is_tensor(arr) else torch.from_numpy(arr)
            return partial_ce_t(t, lt).sum()

        num = central_differences(lambda a: float(f(a)), x.copy())
        assert rel_err(analytic(f, x), num) <= FD_RTOL


# -- size barrier ------------------------------------------------------------

def test_barrier_balanced_maps_t1():
    # z = -0.5 > -1/t^2 = -1: linear branch, t*z - (1/t)log(1/t^2) + 1/t = 0.5
    maps = SoftmaxMaps.from_foreground(np.full((8, 8), 0.5))
    assert size_barrier(maps, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_barrier_balanced_maps_interior():
    # t = 2: threshold -1/4, z = -0.5 is interior: -(1/2) log 0.5 per region
    maps = SoftmaxMaps.from_foreground(np.full((8, 8), 0.5))
    assert size_barrier(maps, 2.0) == pytest.approx(-math.log(0.5), abs=1e-12)


def test_barrier_branches_meet():
    for t in (1.0, 1.5, 3.0, 10.0):
        z = torch.tensor([-1.0 / t**2], dtype=torch.float64)
        below = extended_log_barrier(z - 1e-12, t)
        above = extended_log_barrier(z + 1e-12, t)
        assert float(below) == pytest.approx(float(above), abs=1e-9)


def test_barrier_blows_up_as_region_vanishes():
    vals = [size_barrier(SoftmaxMaps.from_foreground(np.full((8, 8), s)), 10.0)
            for s in (0.1, 0.01, 1e-3, 1e-5)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


@settings(max_examples=1000, deadline=None)
@given(st.floats(1.0, 10.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_barrier_decreasing_in_size_interior(t, a, b):
    lo, hi = sorted((a, b))
    thr = 1.0 / t**2
    if lo < thr or hi - lo < 1e-9:
        return
    z = torch.tensor([-lo, -hi], dtype=torch.float64)
    v = extended_log_barrier(z, t)
    assert float(v[1]) < float(v[0])


def test_barrier_gradient(rng):
    for i in range(20):
        x = rng.uniform(0.05, 0.95, size=(1, 2, 8, 8))
        t = [1.0, 2.0, 5.0, 10.0][i % 4]

        def f(arr, t=t):
            tt = arr if torch.is_tensor(arr) else torch.from_numpy(arr)
            return size_barrier_t(tt, t).sum()

        num = central_differences(lambda a: float(f(a)), x.copy())
        assert rel_err(analytic(f, x), num) <= FD_RTOL


# -- CRF ---------------------------------------------------------------------

def test_crf_uniform_frame_constant_fg():
    frame = Frame(np.full((8, 8, 3), 0.4))
    maps = SoftmaxMaps.from_foreground(np.ones((8, 8)))
    assert crf_loss(maps, frame, LossConfig(crf_downsample=1)) == 0.0


def test_crf_prefers_colour_aligned_split():
    img = np.zeros((16, 16, 3))
    img[:, 8:] = 1.0
    frame = Frame(img)
    aligned = np.zeros((16, 16))
    aligned[:, 8:] = 1.0
    orthogonal = np.zeros((16, 16))
    orthogonal[8:, :] = 1.0
    cfg = LossConfig(crf_downsample=1, crf_sigma_xy=5.0)
    a = crf_loss(SoftmaxMaps.from_foreground(aligned), frame, cfg)
    o = crf_loss(SoftmaxMaps.from_foreground(orthogonal), frame, cfg)
    sig = (cfg.crf_sigma_rgb, cfg.crf_sigma_xy)
    assert a == pytest.approx(dense_crf_loop(aligned, img, *sig), rel=1e-5)
    assert o == pytest.approx(dense_crf_loop(orthogonal, img, *sig), rel=1e-5)
    assert a < o


@pytest.mark.parametrize("size,factor", [(8, 1), (12, 1), (16, 1), (16, 2), (16, 4)])
def test_crf_matches_double_loop(rng, size, factor):
    img = rng.uniform(size=(size, size, 3))
    fg = rng.uniform(size=(size, size))
    cfg = LossConfig(crf_downsample=factor, crf_sigma_rgb=0.3, crf_sigma_xy=6.0)
    got = crf_loss(SoftmaxMaps.from_foreground(fg), Frame(img), cfg)
    h = size // factor
    pool = lambda a: a.reshape(h, factor, h, factor, *a.shape[2:]).mean(axis=(1, 3))
    want = dense_crf_loop(pool(fg), pool(img.astype(np.float32).astype(np.float64)),
                          cfg.crf_sigma_rgb, cfg.crf_sigma_xy / factor)
    assert got == pytest.approx(want, rel=1e-5)


def test_crf_too_small_after_downsampling():
    with pytest.raises(DomainError):
        crf_loss(SoftmaxMaps.from_foreground(np.zeros((8, 8))), Frame(np.zeros((8, 8, 3))),
                 LossConfig(crf_downsample=8))


def test_crf_gradient(rng):
    cfg = LossConfig(crf_downsample=1, crf_sigma_rgb=0.3, crf_sigma_xy=4.0)
    for _ in range(20):
        x = rng.uniform(0.05, 0.95, size=(1, 2, 8, 8))
        img = torch.from_numpy(rng.uniform(size=(1, 3, 8, 8)))

        def f(arr):
            tt = arr if torch.is_tensor(arr) else torch.from_numpy(arr)
            return crf_loss_t(tt, img, cfg).sum()

        num = central_differences(lambda a: float(f(a)), x.copy())
        assert rel_err(analytic(f, x), num) <= FD_RTOL


def test_crf_nonnegative(rng):
    for _ in range(10):
        fg = rng.uniform(size=(8, 8))
        assert crf_loss(SoftmaxMaps.from_foreground(fg), Frame(rng.uniform(size=(8, 8, 3))),
                        LossConfig(crf_downsample=1)) >= 0.0


# -- total -------------------------------------------------------------------

def test_total_balanced_perfect_pixels():
    fg = np.full((8, 8), 0.5)
    fg[1, 1], fg[5, 5] = 1.0, 0.0
    maps = SoftmaxMaps.from_foreground(fg)
    mask = one_hot_mask((8, 8), (1, 1), (5, 5))
    cfg = LossConfig(lambda_crf=0.0)
    br = total_loss(mask, maps, Frame(np.zeros((8, 8, 3))), LossConfig(lambda_crf=0.0, crf_downsample=1))
    assert br.partial_ce == 0.0
    # both normalised sizes are exactly 0.5
    assert br.total == pytest.approx(size_barrier(maps, cfg.barrier_t), abs=1e-12)
    assert br.total == pytest.approx(1.0, abs=1e-12)


def test_total_unknown_only(rng):
    fg = rng.uniform(size=(8, 8))
    maps = SoftmaxMaps.from_foreground(fg)
    br = total_loss(PseudoLabelMask.unknown((8, 8)), maps, Frame(rng.uniform(size=(8, 8, 3))),
                    LossConfig(lambda_crf=0.0, crf_downsample=1))
    assert br.total == pytest.approx(size_barrier(maps, 1.0), abs=1e-12)


def test_breakdown_accounting(rng):
    for _ in range(20):
        fg = rng.uniform(size=(16, 16))
        mask = one_hot_mask((16, 16), tuple(rng.integers(0, 16, 2)), (0, 0))
        cfg = LossConfig(lambda_crf=float(rng.uniform(0, 1e-2)), barrier_t=float(rng.uniform(1, 10)))
        br = total_loss(mask, SoftmaxMaps.from_foreground(fg), Frame(rng.uniform(size=(16, 16, 3))), cfg)
        assert abs(br.total - (br.partial_ce + cfg.lambda_crf * br.crf + br.size_barrier)) <= 1e-6
        assert min(br.partial_ce, br.crf) >= 0.0
        assert all(math.isfinite(v) for v in br.as_dict().values())


def test_barrier_schedule():
    cfg = LossConfig()
    assert cfg.barrier_at(0) == 1.0
    assert cfg.barrier_at(1) == pytest.approx(1.01)
    assert cfg.barrier_at(10_000) == 10.0
    assert cfg.lambda_crf == 2e-9
    with pytest.raises(ValueError):
        LossConfig(barrier_t=11.0)
