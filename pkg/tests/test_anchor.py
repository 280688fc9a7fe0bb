import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvd import anchor as anc
from pvd.errors import InvalidArgument

from oracles import box_iou_xyxy


def test_gaussian_target_peak_and_sigma():
    hm = anc.gaussian_target((10, 20), (4.0, 4.0), (32, 32))
    assert hm[10, 20] == 1.0
    assert hm.max() == 1.0
    sigma = anc.gaussian_sigma((4.0, 4.0))
    assert sigma == 1.0
    assert hm[11, 20] == pytest.approx(math.exp(-0.5))


def test_gaussian_target_errors():
    with pytest.raises(InvalidArgument):
        anc.gaussian_target((40, 0), (4, 4), (32, 32))
    with pytest.raises(InvalidArgument):
        anc.gaussian_target((3, 3), (0, 4), (32, 32))


def _brute_force_radius(h, w, o=0.7, step=1e-4):
    # smallest displacement at which any of the corner patterns drops below o
    box = (0.0, 0.0, h, w)
    r = 0.0
    while True:
        r += step
        cases = [(r, r, h + r, w + r), (r, r, h - r, w - r), (-r, -r, h + r, w + r)]
        if min(box_iou_xyxy(box, c) for c in cases) < o:
            return r - step


def test_radius_for_64_cell_box_matches_brute_force():
    r = anc.gaussian_radius((64.0, 64.0))
    assert r == pytest.approx(_brute_force_radius(64.0, 64.0), abs=2e-4)
    assert anc.gaussian_sigma((64.0, 64.0)) == pytest.approx(max(1.0, r / 3))


@pytest.mark.parametrize("hw", [(10.0, 30.0), (7.0, 7.0), (40.0, 12.0)])
def test_radius_brute_force_general(hw):
    assert anc.gaussian_radius(hw) == pytest.approx(_brute_force_radius(*hw), abs=2e-4)


def test_gaussian_radially_decreasing():
    hm = anc.gaussian_target((16, 16), (30, 30), (33, 33))
    i, j = np.indices(hm.shape)
    d = (i - 16) ** 2 + (j - 16) ** 2
    order = np.argsort(d.ravel(), kind="stable")
    vals = hm.ravel()[order]
    dd = d.ravel()[order]
    assert np.all(np.diff(vals)[np.diff(dd) > 0] < 0)


def test_focal_loss_constants():
    assert (anc.FOCAL_ALPHA, anc.FOCAL_BETA) == (2, 4)


def test_focal_loss_near_perfect():
    target = np.zeros((5, 5))
    target[2, 3] = 1.0
    pred = np.full((5, 5), 1e-6)
    pred[2, 3] = 1 - 1e-6
    assert anc.focal_loss(pred, target).item() < 1e-4


def test_focal_loss_hand_summed_3x3():
    target = anc.gaussian_target((1, 1), (2.0, 2.0), (3, 3))
    y = 0.5
    total = 0.0
    for v in target.ravel():
        if v == 1.0:
            total += -((1 - y) ** 2) * math.log(y)
        else:
            total += -((1 - v) ** 4) * y ** 2 * math.log(1 - y)
    expect = total / 9
    assert anc.focal_loss(np.full((3, 3), 0.5), target).item() == pytest.approx(expect, rel=1e-12)


def test_focal_loss_shape_mismatch():
    with pytest.raises(InvalidArgument):
        anc.focal_loss(np.full((3, 3), 0.5), np.zeros((3, 4)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_focal_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    c = tuple(rng.integers(0, 8, 2))
    target = anc.gaussian_target(c, (5, 5), (8, 8))
    assert anc.focal_loss(rng.random((8, 8)), target).item() >= 0


def test_extract_peak():
    hm = np.zeros((6, 7))
    hm[4, 2] = 1
    assert anc.extract_peak(hm) == (4, 2)
    assert anc.extract_peak(np.ones((6, 7))) == (0, 0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        hm = rng.integers(0, 5, (9, 11)).astype(float)
        best, where = -1, None
        for i in range(9):
            for j in range(11):
                if hm[i, j] > best:
                    best, where = hm[i, j], (i, j)
        assert anc.extract_peak(hm) == where


@settings(max_examples=40, deadline=None)
@given(i=st.integers(0, 63), j=st.integers(0, 63), s=st.floats(1, 40))
def test_peak_of_gaussian_is_center(i, j, s):
    assert anc.extract_peak(anc.gaussian_target((i, j), (s, s), (64, 64))) == (i, j)


def test_normalize_examples():
    a = anc.CenterAnchor((30.0, 20.0), (64.0, 48.0))
    np.testing.assert_allclose(anc.normalize([30.0, 20.0], a), [0.5, 0.5])
    np.testing.assert_allclose(anc.normalize([30.0 + 32, 20.0 + 24], a), [0.75, 0.75])
    pts = np.random.default_rng(0).uniform(0, 64, (1000, 2))
    assert np.max(np.abs(anc.denormalize(anc.normalize(pts, a), a) - pts)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(dx=st.floats(-50, 50), dy=st.floats(-50, 50))
def test_normalize_translation_equivariant(dx, dy):
    a = anc.CenterAnchor((10.0, 12.0), (64.0, 64.0))
    b = anc.CenterAnchor((10.0 + dx, 12.0 + dy), (64.0, 64.0))
    p = np.array([[3.0, 7.0], [20.0, 1.0]])
    np.testing.assert_allclose(anc.normalize(p, a), anc.normalize(p + [dx, dy], b), atol=1e-12)
