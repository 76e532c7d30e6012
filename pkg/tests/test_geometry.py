import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morecap.geometry import (
    VERTICAL_BOTTOM,
    VERTICAL_NONE,
    VERTICAL_TOP,
    Box3,
    corners,
    iou3d,
    knn_graph,
    relative_offset,
    vertical_case,
    vertical_distances,
)

coord = st.floats(-5, 5, allow_nan=False)
extent = st.floats(0.05, 3, allow_nan=False)
boxes = st.builds(Box3, coord, coord, coord, extent, extent, extent)


def brute_corners(b: Box3) -> set:
    return {(b.cx + sx * b.l / 2, b.cy + sy * b.w / 2, b.cz + sz * b.h / 2)
            for sx, sy, sz in itertools.product((-1, 1), repeat=3)}


def test_unit_cube_corners():
    c = corners(Box3(0, 0, 0, 1, 1, 1))
    assert c.shape == (8, 3)
    assert set(map(tuple, c)) == brute_corners(Box3(0, 0, 0, 1, 1, 1))
    assert np.all(np.abs(c) == 0.5)


def test_tall_box_z_coords():
    assert set(corners(Box3(0, 0, 0, 2, 1, 1))[:, 2]) == {-1.0, 1.0}


@given(boxes, coord, coord, coord)
def test_corners_translate(b, dx, dy, dz):
    moved = Box3(b.cx + dx, b.cy + dy, b.cz + dz, b.h, b.w, b.l)
    np.testing.assert_allclose(corners(moved), corners(b) + [dx, dy, dz], atol=1e-9)


def test_box_validation():
    with pytest.raises(ValueError):
        Box3(0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        Box3(0, 0, float("nan"), 1, 1, 1)


def test_vertical_distances_fully_above():
    i = Box3(0, 0, 0.5, 1, 1, 1)
    j = Box3(0, 0, 3.5, 1, 1, 1)
    assert vertical_distances(j, i).min() == pytest.approx(2.0)
    assert vertical_case(j, i) == VERTICAL_TOP
    assert vertical_case(i, j) == VERTICAL_BOTTOM


def test_vertical_distances_identical():
    b = Box3(1, 2, 3, 1.5, 1, 1)
    d = vertical_distances(b, b)
    assert d.shape == (64,)
    assert d.min() == pytest.approx(-1.5)
    assert d.max() == pytest.approx(1.5)
    assert vertical_case(b, b) == VERTICAL_NONE


@settings(max_examples=200)
@given(boxes, boxes)
def test_vertical_distances_match_brute_force(j, i):
    zj = [c[2] for c in brute_corners(j)] * 1
    zi = [c[2] for c in brute_corners(i)]
    pairs = [a - b for a in [c[2] for c in sorted(brute_corners(j))] for b in zi]
    d = vertical_distances(j, i)
    assert d.min() == min(pairs)
    assert d.max() == max(pairs)
    assert len(zj) == 8


def test_iou_examples():
    a = Box3(0, 0, 0, 1, 1, 1)
    assert iou3d(a, a) == pytest.approx(1.0)
    assert iou3d(a, Box3(5, 0, 0, 1, 1, 1)) == 0.0
    assert iou3d(a, Box3(0.5, 0, 0, 1, 1, 1)) == pytest.approx(0.5 / 1.5)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou3d(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(iou3d(b, a))


def test_knn_collinear():
    bs = [Box3(x, 0, 0, 1, 0.5, 0.5) for x in (0, 1, 5)]
    assert knn_graph(bs, 1) == [[1], [0], [1]]


def test_knn_complete_when_k_large():
    bs = [Box3(x, x * x, 0, 1, 1, 1) for x in range(4)]
    g = knn_graph(bs, 10)
    assert all(sorted(n) == [j for j in range(4) if j != i] for i, n in enumerate(g))


def test_knn_tie_takes_lower_index():
    bs = [Box3(0, 0, 0, 1, 1, 1), Box3(-1, 0, 0, 1, 1, 1), Box3(1, 0, 0, 1, 1, 1)]
    assert knn_graph(bs, 1)[0] == [1]


def test_knn_degenerate():
    assert knn_graph([Box3(0, 0, 0, 1, 1, 1)], 3) == [[]]
    with pytest.raises(ValueError):
        knn_graph([], 0)


@settings(max_examples=50)
@given(st.lists(boxes, min_size=2, max_size=8), st.integers(1, 8))
def test_knn_matches_exhaustive_sort(bs, k):
    g = knn_graph(bs, k)
    for i, nbrs in enumerate(g):
        c = bs[i].center
        order = sorted((j for j in range(len(bs)) if j != i),
                       key=lambda j: (float(np.sum((bs[j].center - c) ** 2)), j))
        assert nbrs == order[:k]


def test_relative_offset():
    j = Box3(2, 3, 0, 1, 1, 1)
    i = Box3(0, 1, 7, 1, 1, 1)
    assert relative_offset(j, i) == (2, 2)
    assert relative_offset(i, j) == (-2, -2)
    assert relative_offset(i, i) == (0, 0)
