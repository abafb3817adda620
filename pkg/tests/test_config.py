import pytest

from fundus_joint.config import TABLE4_ROWS, TrainConfig, desk_preset, parse_kv, table4_config


def test_text_roundtrip():
    cfg = desk_preset(seed=3, stage="fsm", depths=(2, 2, 6, 2), star_loss=False, L0=0.125)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_parse_kv_comments_and_errors():
    assert parse_kv("# c\n a = 1 # tail\n\nb=x\n") == {"a": "1", "b": "x"}
    with pytest.raises(ValueError):
        parse_kv("novalue\n")


def test_updated_coerces_types_and_rejects_unknown():
    cfg = TrainConfig().updated({"epochs": "7", "L0": "0.1", "augment": "yes", "num_heads": "2,4,8,16"})
    assert cfg.epochs == 7 and cfg.L0 == 0.1 and cfg.augment is True and cfg.num_heads == (2, 4, 8, 16)
    with pytest.raises(ValueError):
        TrainConfig().updated({"nope": "1"})
    with pytest.raises(ValueError):
        TrainConfig().updated({"augment": "maybe"})


@pytest.mark.parametrize("kw", [dict(stage="vessel"), dict(batch_size=0), dict(L0=0.0),
                                dict(heat_branch=False, seg_branch=False)])
def test_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_iterations_and_sigma():
    cfg = TrainConfig(epochs=300, batch_size=12)
    assert cfg.iterations_for(80) == 300 * 7
    assert cfg.replace(max_iterations=5).iterations_for(80) == 5
    assert cfg.sigma(224) == pytest.approx(11.2)


def test_desk_preset_scales_fine_stage():
    d = desk_preset()
    assert (d.input_size, d.embed_dim, d.window_size) == (64, 24, 4)
    assert d.d_flm == pytest.approx(30 * 64 / 224)
    assert d.backbone().input_size == (64, 64)


def test_table4_rows():
    assert set(TABLE4_ROWS) == {"I", "II", "III", "IV", "V", "star-off", "full"}
    row = table4_config("II")
    assert row.heat_branch and not row.seg_branch and not row.vessel_pretrain
    assert table4_config("full").star_loss and not table4_config("star-off").star_loss
    with pytest.raises(ValueError):
        table4_config("VI")
