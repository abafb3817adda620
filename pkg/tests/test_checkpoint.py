import numpy as np
import pytest
import torch

from fundus_joint import checkpoint as ck
from fundus_joint.backbone import SwinUNet, desk_config
from fundus_joint.coarse import JointSegDetNet


def test_save_load_roundtrip(tmp_path):
    net = SwinUNet(desk_config())
    c = ck.from_module(net, dict(net.cfg.metadata(), source="scratch"))
    ck.save(c, tmp_path / "a.ckpt")
    back = ck.load(tmp_path / "a.ckpt")
    assert back.meta["source"] == "scratch" and back.meta["embed_dim"] == 24
    assert set(back.params) == set(c.params)
    assert all(np.array_equal(back.params[k], c.params[k]) for k in c.params)


def test_unknown_source_rejected(tmp_path):
    with pytest.raises(ValueError):
        ck.save(ck.ModelCheckpoint({}, {"source": "imagenet"}), tmp_path / "x.ckpt")


def test_vessel_encoder_transfer_leaves_decoders(tmp_path):
    cfg = desk_config()
    torch.manual_seed(0)
    vessel = SwinUNet(cfg)
    ck.save(ck.from_module(vessel, dict(cfg.metadata(), source="vessel-pretrained")), tmp_path / "v.ckpt")
    torch.manual_seed(1)
    joint = JointSegDetNet(cfg)
    dec_before = {k: v.clone() for k, v in joint.seg_decoder.state_dict().items()}
    rep = ck.load_vessel_encoder(ck.load(tmp_path / "v.ckpt"), joint)
    assert rep.loaded and not rep.missing
    assert not rep.skipped
    for k, v in joint.encoder.state_dict().items():
        assert torch.equal(v, vessel.encoder.state_dict()[k])
    for k, v in joint.seg_decoder.state_dict().items():
        assert torch.equal(v, dec_before[k])


def test_lenient_load_reports_mismatch():
    a = SwinUNet(desk_config())
    b = SwinUNet(desk_config(embed_dim=12, num_heads=(3, 6, 12, 24)))
    c = ck.from_module(a, dict(a.cfg.metadata()))
    rep = ck.load_into(b, c, strict=False, model_meta=b.cfg.metadata())
    assert rep.warnings and rep.skipped
    with pytest.raises(ck.CheckpointError):
        ck.load_into(b, c, strict=True, model_meta=b.cfg.metadata())
