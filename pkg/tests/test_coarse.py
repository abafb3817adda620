import numpy as np
import pytest

from fundus_joint.coarse import (BACKGROUND, OC, OD, label_from_probs, label_to_channels, od_box_center,
                                 od_diameter, postprocess_coarse)
from fundus_joint.geometry import Point, make_heatmap


def test_priority_examples():
    p = np.array([[0.7, 0.4, 0.4], [0.8, 0.8, 0.4], [0.1, 0.1, 0.9]]).reshape(3, 1, 3)
    assert label_from_probs(p)[0].tolist() == [OC, OD, BACKGROUND]


def test_oc_is_subset_of_foreground():
    rng = np.random.default_rng(0)
    p = rng.uniform(size=(3, 32, 32))
    labels = label_from_probs(p)
    fg = (p[0] >= 0.5) | (p[1] >= 0.5)
    assert np.all(fg[labels == OC])


def test_label_channels_roundtrip():
    labels = np.array([[0, 1, 2]], dtype=np.uint8)
    ch = label_to_channels(labels)
    assert ch[:, 0].T.tolist() == [[0, 0, 1], [0, 1, 0], [1, 1, 0]]
    assert (label_from_probs(ch) == labels).all()
    with pytest.raises(ValueError):
        label_to_channels(np.array([[3]]))


def test_disc_geometry():
    labels = np.zeros((20, 20), np.uint8)
    labels[5:10, 4:12] = OD
    labels[6:8, 6:8] = OC
    assert od_box_center(labels) == Point(7.5, 7.0)
    assert od_diameter(labels) == pytest.approx(2 * np.sqrt(40 / np.pi))
    assert od_box_center(np.zeros((4, 4))) is None


def test_postprocess_uses_fallback_when_fovea_missing():
    heat = np.stack([make_heatmap((10, 30), 64, 64, 3.2), np.zeros((64, 64))])
    probs = np.zeros((3, 64, 64))
    probs[1, 26:35, 6:15] = 0.9
    out = postprocess_coarse(heat, probs)
    assert out.od_center == Point(10, 30)
    assert out.fovea_from_fallback and out.fovea.x > 10


def test_postprocess_heat_only_and_nothing():
    heat = np.stack([make_heatmap((10, 30), 64, 64, 3.2), make_heatmap((40, 33), 64, 64, 3.2)])
    out = postprocess_coarse(heat, None)
    assert out.fovea == Point(40, 33) and not out.fovea_from_fallback
    assert not out.labels.any()
    with pytest.raises(ValueError):
        postprocess_coarse(None, None)
