import pytest

from pointpeft.config import KEYS, ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_lines


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig().validate()
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg, exclude=()))
    assert load_config(path) == cfg
    assert set(parse_lines(dump_config(cfg, exclude=()))) == set(KEYS)


def test_defaults_match_documented_values():
    r = RunConfig().run
    assert (r.lr, r.weight_decay, r.epochs, r.method) == (5e-4, 0.05, 60, "point-peft")


def test_out_is_left_out_by_default():
    text = dump_config(apply_overrides(RunConfig(), {"out": "/somewhere"}))
    assert "out =" not in text and "seed = 0" in text


def test_parse_lines_comments_and_errors():
    assert parse_lines("# hi\n\nseed = 3  # trailing\n dim=16\n") == {"seed": "3", "dim": "16"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_lines("seed 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_lines("seed = 1\nseed = 2")
    with pytest.raises(ConfigError, match="empty key"):
        parse_lines("= 2")


def test_typed_overrides():
    cfg = apply_overrides(RunConfig(), {"seed": "4", "lr": "1e-3", "use_bank": "off", "pooling": "mean"})
    assert cfg.run.seed == 4 and cfg.run.lr == 1e-3
    assert cfg.peft.use_bank is False and cfg.peft.pooling == "mean"
    assert apply_overrides(RunConfig(), {"record_wall_time": "Yes"}).run.record_wall_time is True


@pytest.mark.parametrize("pairs,match", [
    ({"sede": "1"}, "unknown config key"),
    ({"seed": "one"}, "cannot parse"),
    ({"use_bank": "maybe"}, "cannot parse"),
    ({"dim": "10", "heads": "4"}, "divisible"),
])
def test_bad_overrides(pairs, match):
    with pytest.raises(ConfigError, match=match):
        apply_overrides(RunConfig(), pairs)


@pytest.mark.parametrize("pairs,match", [
    ({"method": "magic"}, "unknown method"),
    ({"augmentation": "wild"}, "augmentation"),
    ({"epochs": "0"}, "epochs"),
    ({"mask_ratio": "1.0"}, "mask_ratio"),
    ({"prompt_len": "2"}, "K"),
    ({"adapter_centers": "99"}, "exceeds"),
])
def test_validation(pairs, match):
    with pytest.raises(ConfigError, match=match):
        load_config(None, pairs)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.txt")
