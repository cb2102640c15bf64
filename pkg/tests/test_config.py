import pytest

from lsca.config import (
    KNOWN_KEYS,
    SEED_ENV,
    ConfigFileError,
    parse_config_text,
    parse_value,
    read_config_file,
    resolve,
    write_run_config,
)


def test_toy_profile_defaults():
    cfg = resolve("toy", env={})
    assert (cfg.model.num_layers, cfg.model.d_model, cfg.model.d_ffn) == (2, 32, 64)
    assert cfg.train.warmup_steps == 200
    assert cfg.train.max_frames_per_batch == 2000
    assert cfg.lambdas == (0.0, 0.7, 1.0)
    assert cfg.seed == 0


def test_paper_profile_defaults():
    cfg = resolve("paper", env={})
    assert (cfg.model.num_layers, cfg.model.d_model, cfg.model.d_ffn, cfg.model.num_heads) == (12, 256, 2048, 4)
    assert (cfg.pretrain.warmup_steps, cfg.train.warmup_steps) == (250000, 2500)
    assert cfg.train.max_frames_per_batch == 10000
    assert (cfg.train.freq_width, cfg.train.time_masks, cfg.train.time_width) == (10, 3, 50)


def test_precedence():
    file_values = {"train.epochs": 3, "seed": 5}
    cfg = resolve("toy", file_values, {"train.epochs": 4}, env={SEED_ENV: "9"})
    assert cfg.train.epochs == 4 and cfg.seed == 5
    assert resolve("toy", {}, {}, env={SEED_ENV: "9"}).seed == 9
    seeded = resolve("toy", {}, {"seed": 2}, env={})
    assert seeded.synth.seed == seeded.train.seed == seeded.pretrain.seed == 2


def test_parse_text():
    vals = parse_config_text("# comment\ntrain.epochs = 3\nexperiment.alphas = 0, 0.5 # inline\nfusion.lsm_only = yes\n")
    assert vals == {"train.epochs": 3, "experiment.alphas": (0.0, 0.5), "fusion.lsm_only": True}


@pytest.mark.parametrize(
    "text,msg",
    [("bogus.key = 1", "unknown config key"), ("train.epochs = three", "bad value"), ("no equals here", ":1: expected")],
)
def test_parse_errors(text, msg):
    with pytest.raises(ConfigFileError, match=msg):
        parse_config_text(text)


def test_range_errors():
    with pytest.raises(ValueError, match="lambda out of range"):
        resolve("toy", {}, {"experiment.lambdas": (0.0, 1.3)}, env={})
    with pytest.raises(ValueError, match="lambda out of range"):
        resolve("toy", {}, {"train.lam": 1.3}, env={})
    with pytest.raises(ValueError, match="alpha"):
        resolve("toy", {}, {"fusion.alpha": -0.5}, env={})
    with pytest.raises(ConfigFileError, match="profile"):
        resolve("huge", env={})
    with pytest.raises(ConfigFileError, match="LSCA_SEED"):
        resolve("toy", env={SEED_ENV: "x"})


def test_run_config_roundtrip(tmp_path):
    cfg = resolve("toy", {}, {"train.lam": 0.7}, env={})
    path = write_run_config(tmp_path, cfg)
    again = resolve(None, read_config_file(path), {}, env={})
    assert again == cfg
    assert path.read_text() == again.to_text()


def test_derived_keys_not_settable():
    assert "model.man_vocab_size" not in KNOWN_KEYS
    with pytest.raises(ConfigFileError):
        parse_value("synth.seed", "3")
