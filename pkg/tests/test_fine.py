import numpy as np
import pytest
import torch

from fundus_joint.backbone import desk_config
from fundus_joint.coarse import OC, OD
from fundus_joint.fine import (FineLocNet, FineSegNet, build_flm_input, build_fsm_input, crop_image,
                               fuse_fovea, paste_labels)
from fundus_joint.geometry import Point, RoiCrop, make_heatmap


def test_fsm_channels():
    net = FineSegNet(desk_config())
    assert net(torch.randn(1, 5, 64, 64)).shape == (1, 3, 64, 64)
    with pytest.raises(ValueError):
        net(torch.randn(1, 3, 64, 64))


def test_flm_outputs_inside_crop():
    net = FineLocNet(desk_config())
    with torch.no_grad():
        c, h = net(torch.randn(3, 4, 64, 64))
    assert c.shape == (3, 2) and h.shape == (3, 64, 64)
    assert float(c.min()) >= 0 and float(c.max()) <= 63
    with pytest.raises(ValueError):
        net(torch.randn(1, 5, 64, 64))


def test_fuse_rule():
    heat = make_heatmap((20, 20), 64, 64, 3.2)
    assert fuse_fovea((24, 20), heat, d_flm=10) == Point(22, 20)
    assert fuse_fovea((50, 20), heat, d_flm=10) == Point(50, 20)
    assert fuse_fovea((5, 6), np.zeros((64, 64))) == Point(5, 6)


def test_fsm_input_layout_and_masking():
    image = np.ones((3, 100, 100), np.float32)
    roi = RoiCrop(Point(50, 50), 32, (100, 100), 64)
    labels = np.zeros((64, 64), np.uint8)
    labels[28:36, 28:36] = OD
    labels[30:34, 30:34] = OC
    inp = build_fsm_input(image, labels, roi, dilation_px=4)
    assert inp.x.shape == (5, 64, 64)
    assert inp.x[3].sum() == 16 and inp.x[4].sum() == 64
    assert inp.x[0, 0, 0] == 0 and inp.x[0, 32, 32] == 1
    plain = build_fsm_input(image, labels, roi, masked=False)
    assert plain.x[0].min() == 1


def test_flm_input_layout():
    image = np.zeros((3, 50, 50), np.float32)
    roi = RoiCrop(Point(25, 25), 16, (50, 50), 64)
    inp = build_flm_input(image, np.ones((64, 64), np.float32), roi)
    assert inp.x.shape == (4, 64, 64) and inp.x[3].min() == 1


def test_crop_then_paste_is_identity_inside_window():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 3, (80, 90)).astype(np.uint8)
    roi = RoiCrop(Point(70, 10), 32, (80, 90), 64)
    crop = crop_image(labels[None].astype(np.float32), roi)[0]  # bilinear on integer labels, exact at 2x
    pasted = paste_labels(np.rint(crop).astype(np.uint8), roi, (80, 90))
    x0, y0 = roi.origin
    assert (pasted[y0:y0 + 32, x0:x0 + 32] == labels[y0:y0 + 32, x0:x0 + 32]).all()
    assert pasted[:, :x0].sum() == 0


def test_fuse_spec_examples_and_segment_property():
    heat = make_heatmap((110, 110), 224, 224, 11.2)
    assert fuse_fovea((100, 100), heat) == Point(105, 105)
    far = make_heatmap((150, 140), 224, 224, 11.2)
    assert fuse_fovea((100, 100), far) == Point(100, 100)
    same = make_heatmap((100, 100), 224, 224, 11.2)
    assert fuse_fovea((100, 100), same) == Point(100, 100)
    rng = np.random.default_rng(0)
    for _ in range(50):
        c_reg = rng.uniform(0, 223, 2)
        c_heat = np.rint(rng.uniform(0, 223, 2))
        out = np.array(fuse_fovea(c_reg, make_heatmap(c_heat, 224, 224, 11.2)))
        cross = (out - c_reg)[0] * (c_heat - c_reg)[1] - (out - c_reg)[1] * (c_heat - c_reg)[0]
        assert abs(cross) < 1e-6 and np.linalg.norm(out - c_reg) <= np.linalg.norm(c_heat - c_reg) + 1e-9
