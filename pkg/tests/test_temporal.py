import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tcam.core import Cam, DomainError
from tcam.temporal import CamSequence, CamTemporalMaxPool, cam_tmp, select_sequence


def shot_cams(rng, n_frames=10, size=8):
    return {t: Cam(rng.uniform(size=(size, size)), frame_index=t, class_id=1) for t in range(n_frames)}


def per_pixel_max(cams):
    h, w = cams[0].shape
    out = np.zeros((h, w), dtype=np.float32)
    for y in range(h):
        for x in range(w):
            best = cams[0][y, x]
            for c in cams[1:]:
                if c[y, x] > best:
                    best = c[y, x]
            out[y, x] = best
    return out


def test_n0_is_current_only(rng):
    seq = select_sequence(shot_cams(rng), 4, 0)
    assert [c.frame_index for c in seq.cams] == [4]


def test_window_inside_shot(rng):
    seq = select_sequence(shot_cams(rng), 5, 2)
    assert [c.frame_index for c in seq.cams] == [5, 4, 3]


def test_window_clamped_at_shot_start(rng):
    seq = select_sequence(shot_cams(rng), 1, 4)
    assert [c.frame_index for c in seq.cams] == [1, 0]


def test_window_respects_offset_shot(rng):
    cams = {t: Cam(rng.uniform(size=(8, 8)), frame_index=t) for t in range(20, 30)}
    assert [c.frame_index for c in select_sequence(cams, 21, 5).cams] == [21, 20]


def test_t_outside_shot(rng):
    with pytest.raises(DomainError):
        select_sequence(shot_cams(rng), 12, 1)


def test_identical_cams_idempotent(rng):
    c = Cam(rng.uniform(size=(8, 8)), frame_index=3, class_id=2)
    out = cam_tmp(CamSequence((c, c, c), 2))
    np.testing.assert_array_equal(out.values, c.values)
    assert (out.frame_index, out.class_id) == (3, 2)


def test_single_cam_identity(rng):
    c = Cam(rng.uniform(size=(8, 8)))
    np.testing.assert_array_equal(cam_tmp(CamSequence((c,), 0)).values, c.values)


def test_matches_per_pixel_loop_100_sequences(rng):
    for _ in range(100):
        k = int(rng.integers(1, 6))
        cams = [Cam(rng.uniform(size=(8, 8))) for _ in range(k)]
        out = cam_tmp(CamSequence(tuple(cams), k - 1))
        np.testing.assert_array_equal(out.values, per_pixel_max([c.values for c in cams]))


def test_empty_and_mismatched():
    with pytest.raises(DomainError):
        CamSequence((), 0)
    with pytest.raises(DomainError):
        CamSequence((Cam(np.zeros((8, 8))), Cam(np.zeros((9, 8)))), 1)


cam_stacks = st.integers(1, 6).flatmap(
    lambda k: arrays(np.float32, (k, 8, 8), elements=st.floats(0, 1, width=32))
)


@settings(max_examples=1000, deadline=None)
@given(cam_stacks, st.randoms(use_true_random=False))
def test_monotone_and_order_invariant(stack, rnd):
    cams = [Cam(a) for a in stack]
    out = cam_tmp(CamSequence(tuple(cams), len(cams) - 1)).values
    assert np.all(out >= cams[0].values)
    assert out.min() >= 0.0 and out.max() <= 1.0
    perm = list(cams)
    rnd.shuffle(perm)
    np.testing.assert_array_equal(cam_tmp(CamSequence(tuple(perm), len(perm) - 1)).values, out)
    for m in range(1, len(cams)):
        shorter = cam_tmp(CamSequence(tuple(cams[:m]), m - 1)).values
        longer = cam_tmp(CamSequence(tuple(cams[:m + 1]), m)).values
        assert np.all(longer >= shorter)


def test_transformer_matches_select_and_pool(rng):
    stack = rng.uniform(size=(10, 8, 8)).astype(np.float32)
    cams = {t: Cam(stack[t], frame_index=t) for t in range(10)}
    out = CamTemporalMaxPool(n=3).fit_transform(stack)
    for t in range(10):
        np.testing.assert_array_equal(out[t], cam_tmp(select_sequence(cams, t, 3)).values)
    assert CamTemporalMaxPool(n=2).get_params() == {"n": 2}
