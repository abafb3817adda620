import numpy as np

from fundus_joint.geometry import AxisMap
from fundus_joint.imaging import dilate, disk, normalize_channels, resize_map, sample_grid, warp


def test_identity_warp():
    img = np.random.default_rng(0).uniform(size=(3, 10, 12)).astype(np.float32)
    assert np.allclose(warp(img, AxisMap(), 10, 12), img)


def test_nearest_warp_keeps_labels():
    lab = np.random.default_rng(1).integers(0, 3, (20, 20)).astype(np.uint8)
    out = warp(lab, resize_map(20, 20, 40, 40), 40, 40, order=0)
    assert set(np.unique(out)) <= {0, 1, 2}
    assert np.array_equal(out[::2, ::2], lab)


def test_outside_reads_zero():
    img = np.ones((4, 4))
    out = sample_grid(img, np.array([-5.0, 1.0]), np.array([1.0]))
    assert out.tolist() == [[0.0, 1.0]]


def test_dilate_and_disk():
    assert disk(1).sum() == 5
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert dilate(m, 2).sum() == disk(2).sum()
    assert dilate(m, 0).sum() == 1


def test_normalize_channels():
    img = np.random.default_rng(2).uniform(size=(3, 8, 8)) * [[[1]], [[5]], [[0.1]]]
    out = normalize_channels(img)
    assert out.dtype == np.float32
    assert np.allclose(out.mean(axis=(1, 2)), 0, atol=1e-5)
    assert np.allclose(out.std(axis=(1, 2)), 1, atol=1e-3)
