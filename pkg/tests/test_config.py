import pytest

from hierinv.config import Config, ConfigError, load_config, parse_config

SAMPLE = """
# desk-scale run
[data]
train_path = d.bin
[model]
width = 8
expansion = color, crop
[augment]
mode = uniform
arrangement = C,G,B,F
rotation_from_stage = 4
[train]
epochs = 3
stage_weights = 1, 0.5, 0.5, 1
residual_unused_comment = 1  # removed below
"""


def test_parse_and_defaults():
    cfg = parse_config(SAMPLE.replace("residual_unused_comment = 1  # removed below\n", ""))
    assert cfg.model.width == 8 and cfg.model.expansion == ("color", "crop")
    assert cfg.augment.mode == "uniform" and cfg.augment.rotation_from_stage == 4
    assert cfg.train.stage_weights == (1.0, 0.5, 0.5, 1.0)
    assert cfg.train.base_lr == 0.05 and cfg.eval.seeds == (0, 1, 2)
    assert cfg.pipelines().kinds(4) >= {"rotation"}


def test_unknown_key_names_line_and_key():
    with pytest.raises(ConfigError, match=r"<config>:15: unknown key 'residual_unused_comment'"):
        parse_config(SAMPLE)


@pytest.mark.parametrize("text,fragment", [
    ("[nope]\n", ":1: unknown section"),
    ("width = 3\n", "outside any section"),
    ("[model]\nwidth\n", "expected 'key = value'"),
    ("[model]\nwidth = wide\n", "bad value for model.width"),
    ("[model]\nresidual = maybe\n", "not a boolean"),
    ("[model\n", "malformed section header"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_overrides_and_round_trip():
    cfg = Config().with_overrides({"augment.mode": "uniform", "model.expansion": "none"})
    assert cfg.augment.mode == "uniform" and cfg.model.expansion == ()
    assert parse_config(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="--set train.nope"):
        Config().with_overrides({"train.nope": "1"})


def test_validate_rejects_bad_values():
    for sets in ({"train.objective": "byol"}, {"train.batch_size": "1"}, {"augment.arrangement": "C,G"},
                 {"augment.rotation_from_stage": "6"}, {"train.stage_weights": "1,2"}):
        with pytest.raises(ConfigError):
            Config().with_overrides(sets).validate()


def test_digest_ignores_training_schedule():
    base = Config()
    assert base.digest() == base.with_overrides({"train.epochs": "7"}).digest()
    assert base.digest() != base.with_overrides({"model.width": "16"}).digest()


def test_load_config_from_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[train]\nseed = 9\n")
    assert load_config(path).train.seed == 9
    path.write_text("[train]\nseed = x\n")
    with pytest.raises(ConfigError, match=str(path) + ":2"):
        load_config(path)
