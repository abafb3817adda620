import pytest
import torch

from fundus_joint.backbone import (BackboneConfig, PatchExpand, PatchMerge, SwinUNet, count_parameters,
                                   desk_config, effective_window, shifted_window_mask, window_merge,
                                   window_partition)
from fundus_joint.coarse import JointSegDetNet


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(input_size=(100, 100))
    with pytest.raises(ValueError):
        BackboneConfig(embed_dim=10)
    with pytest.raises(ValueError):
        BackboneConfig(depths=(2, 2, 2))


def test_stage_dims_and_grids():
    cfg = BackboneConfig()
    assert cfg.stage_dims == [96, 192, 384, 768]
    assert cfg.stage_grids == [(56, 56), (28, 28), (14, 14), (7, 7)]


def test_effective_window():
    assert effective_window((56, 56), 7) == (7, 3)
    assert effective_window((7, 7), 7) == (7, 0)
    assert effective_window((2, 2), 4) == (2, 0)
    with pytest.raises(ValueError):
        effective_window((10, 10), 4)


def test_window_partition_roundtrip():
    x = torch.randn(2, 8, 12, 5)
    win = window_partition(x, 4)
    assert win.shape == (2 * 2 * 3, 16, 5)
    assert torch.equal(window_merge(win, 4, 2, 8, 12), x)


def test_shift_mask_blocks_seams():
    m = shifted_window_mask(8, 8, 4, 2)
    assert m.shape == (4, 16, 16)
    assert (m[0] == 0).all()  # the top-left window does not straddle a seam
    assert (m[-1] != 0).any()


def test_merge_and_expand_shapes():
    x = torch.randn(1, 8, 8, 6)
    y = PatchMerge(6)(x)
    assert y.shape == (1, 4, 4, 12)
    assert PatchExpand(12)(y).shape == (1, 8, 8, 6)
    with pytest.raises(ValueError):
        PatchMerge(6)(torch.randn(1, 7, 8, 6))


def test_desk_model_shapes_and_ranges():
    cfg = desk_config()
    net = JointSegDetNet(cfg)
    with torch.no_grad():
        heat, seg = net(torch.randn(2, 3, 64, 64))
    assert heat.shape == (2, 2, 64, 64) and seg.shape == (2, 3, 64, 64)
    assert 0 <= float(heat.min()) and float(seg.max()) <= 1


def test_branch_switches():
    cfg = desk_config()
    heat, seg = JointSegDetNet(cfg, heat_branch=False)(torch.randn(1, 3, 64, 64))
    assert heat is None and seg.shape == (1, 3, 64, 64)
    with pytest.raises(ValueError):
        JointSegDetNet(cfg, heat_branch=False, seg_branch=False)


def test_wrong_input_size_rejected():
    net = SwinUNet(desk_config())
    with pytest.raises(ValueError):
        net(torch.randn(1, 3, 32, 32))


def test_freeze_encoder():
    net = JointSegDetNet(desk_config())
    net.freeze_encoder(True)
    assert not any(p.requires_grad for p in net.encoder.parameters())
    assert all(p.requires_grad for p in net.seg_decoder.parameters())


def test_parameter_count_positive():
    assert count_parameters(SwinUNet(desk_config())) > count_parameters(SwinUNet(desk_config()), True)


def test_attention_rows_are_distributions():
    from fundus_joint.backbone import set_attention_recording

    net = SwinUNet(desk_config())
    mods = set_attention_recording(net, True)
    with torch.no_grad():
        net(torch.randn(1, 3, 64, 64))
    for m in mods:
        assert torch.allclose(m.last_attn.sum(-1), torch.ones(()), atol=1e-5)
    set_attention_recording(net, False)
    assert all(m.last_attn is None for m in mods)


def test_parameter_count_ignores_window_except_bias_tables():
    a = SwinUNet(BackboneConfig(embed_dim=24, window_size=4, input_size=(64, 64)))
    b = SwinUNet(BackboneConfig(embed_dim=24, window_size=2, input_size=(64, 64)))
    assert count_parameters(a, True) == count_parameters(b, True)
    assert count_parameters(a) != count_parameters(b)


def test_skip_fuse_examples():
    from fundus_joint.backbone import SkipFuse

    fuse = SkipFuse(192)
    up, skip = torch.randn(1, 28, 28, 192), torch.randn(1, 28, 28, 192)
    assert fuse(up, skip).shape == (1, 28, 28, 192)
    with torch.no_grad():
        fuse.proj.weight.zero_()
        fuse.proj.weight[:, :192] = torch.eye(192)
        fuse.proj.bias.zero_()
        assert torch.allclose(fuse(up, torch.zeros_like(skip)), up)
    with pytest.raises(ValueError):
        fuse(up, torch.randn(1, 14, 14, 192))
