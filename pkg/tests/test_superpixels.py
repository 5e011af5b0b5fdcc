import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import label as cc_label

from sfdeblur.geometry import RigidMotion, SceneModel
from sfdeblur.superpixels import build_superpixels, init_labels, moving_mask, partition_from_labels

seeds = st.integers(0, 2 ** 31 - 1)


def check_partition_axioms(p, h, w):
    assert sorted(np.unique(p.labels)) == list(range(p.n))
    assert sum(px.size for px in p.pixels) == h * w
    cover = np.concatenate(p.pixels)
    assert np.array_equal(np.sort(cover), np.arange(h * w))
    for (i, j), b in p.boundaries.items():
        assert i < j and b.size >= 1
        assert np.array_equal(p.boundary(j, i), b)
        assert set(np.unique(p.labels.ravel()[b])) == {i, j}
    for i in range(p.n):
        for j in p.neighbors(i):
            assert i in p.neighbors(j)


def test_uniform_image_gives_near_equal_cells():
    p = build_superpixels(np.full((32, 32), 0.5), None, 4)
    sizes = np.array([px.size for px in p.pixels])
    assert p.n == 4 and sizes.sum() == 32 * 32
    assert np.all(np.abs(sizes - sizes.mean()) <= 0.25 * sizes.mean())


@pytest.mark.parametrize("split", [13, 20, 24])
def test_two_tone_boundary_follows_edge(split):
    img = np.zeros((30, 40))
    img[:, split:] = 1.0
    p = build_superpixels(img, None, 4)
    for r in range(30):
        changes = np.flatnonzero(np.diff(img[r]) != 0) + 1
        label_changes = np.flatnonzero(np.diff(p.labels[r]) != 0) + 1
        assert any(abs(c - changes[0]) <= 1 for c in label_changes)
    for px in p.pixels:
        assert np.unique(img.ravel()[px]).size == 1


def test_disparity_edge_dominates_texture():
    rng = np.random.default_rng(0)
    img = 0.5 + 0.05 * rng.standard_normal((30, 40))
    disp = np.where(np.arange(40)[None, :] < 17, 4.0, 9.0) * np.ones((30, 1))
    p = build_superpixels(np.clip(img, 0, 1), disp, 6)
    for px in p.pixels:
        assert np.unique(disp.ravel()[px]).size == 1


@settings(max_examples=10, deadline=None)
@given(seeds, st.integers(4, 30))
def test_partition_axioms_hold(seed, target):
    rng = np.random.default_rng(seed)
    img = rng.random((24, 32))
    disp = rng.uniform(0, 10, (24, 32))
    disp[rng.random((24, 32)) < 0.2] = -1.0
    p = build_superpixels(img, disp, target)
    check_partition_axioms(p, 24, 32)
    for i in range(p.n):
        assert cc_label(p.labels == i)[1] == 1


def test_build_superpixels_preconditions():
    with pytest.raises(ValueError):
        build_superpixels(np.zeros((10, 10)), None, 3)
    with pytest.raises(ValueError):
        build_superpixels(np.zeros((3, 3)), None, 20)


def test_partition_from_labels_relabels_and_finds_boundaries():
    labels = np.array([[5, 5, 9], [5, 7, 9]])
    p = partition_from_labels(labels)
    check_partition_axioms(p, 2, 3)
    assert p.n == 3
    assert p.edges == [(0, 1), (0, 2), (1, 2)]


def grid_partition():
    labels = np.repeat(np.repeat(np.arange(4).reshape(2, 2), 5, axis=0), 5, axis=1)
    return partition_from_labels(labels)


def test_init_labels_examples():
    p = grid_partition()
    assert init_labels(p, np.zeros((10, 10)), 3) == [(1,)] * 4
    assert init_labels(p, np.ones((10, 10)), 3) == [(2, 3)] * 4
    mask = np.zeros((10, 10), dtype=bool)
    mask[:3, :5] = True  # 60% of superpixel 0
    assert init_labels(p, mask, 2)[0] == (2,)


def test_init_labels_tie_goes_to_background():
    labels = np.zeros((2, 2), dtype=np.intp)
    p = partition_from_labels(labels)
    assert init_labels(p, np.array([[1, 1], [0, 0]]), 2) == [(1,)]


def test_init_labels_validation():
    p = grid_partition()
    with pytest.raises(ValueError):
        init_labels(p, np.zeros((10, 10)), 1)
    with pytest.raises(ValueError):
        init_labels(p, np.zeros((9, 10)), 2)


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(3, 6))
def test_init_labels_invariant_to_foreground_id_permutation(seed, k):
    rng = np.random.default_rng(seed)
    p = grid_partition()
    mask = rng.random((10, 10)) < 0.5
    prior = init_labels(p, mask, k)
    perm = dict(zip(range(2, k + 1), rng.permutation(range(2, k + 1))))
    permuted = [tuple(sorted(perm.get(l, l) for l in s)) for s in prior]
    assert permuted == prior


def test_moving_mask():
    p = grid_partition()
    planes = np.tile([0, 0, 0.1], (4, 1))
    motions = [RigidMotion(), RigidMotion()]
    model = SceneModel(p.labels, planes, np.ones(4, dtype=int), motions)
    assert not moving_mask(model).any()
    model = SceneModel(p.labels, planes, np.array([1, 2, 1, 1]), motions)
    np.testing.assert_array_equal(moving_mask(model), p.labels == 1)
