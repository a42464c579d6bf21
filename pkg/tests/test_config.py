import pytest

from cascade_mvs.config import dump_config, load_config, resolve_key
from cascade_mvs.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg.stage_config().planes == (48, 32, 8)
    assert cfg.stage_config().lambdas == (1.5, 0.75)
    t = cfg.train_config()
    assert t.lr == 1e-3 and t.weights.beta == (3.0, 0.0) and t.probability_path
    assert cfg.threads == 1


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = 0.01\nbeta = 1,2\n[run]\nseed = 4\n")
    cfg = load_config(p, [("lr", "0.02"), ("stage.planes", "8,8,4")])
    assert cfg.get("train", "lr") == 0.02
    assert cfg.get("train", "beta") == (1.0, 2.0)
    assert cfg.seed == 4 and cfg.stage_config().planes == (8, 8, 4)


@pytest.mark.parametrize("text", ["[train]\nlearning_rate = 1\n", "[nope]\nx = 1\n", "[train]\nlr = fast\n"])
def test_rejected_files(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_ambiguous_bare_key():
    with pytest.raises(ConfigError, match="synth.scenes"):
        resolve_key("scenes")
    assert resolve_key("train.scenes") == ("train", "scenes")
    assert resolve_key("ply-format") == ("fusion", "ply_format")


def test_invalid_values():
    for key, value in [("threads", "0"), ("ply_format", "obj"), ("lambdas", "1.5"), ("missing", "1")]:
        with pytest.raises(ConfigError):
            load_config(overrides=[(key, value)])
    with pytest.raises(ConfigError):
        load_config("/nonexistent/c.ini")


def test_dump_round_trips(tmp_path):
    cfg = load_config(overrides=[("lr", "0.0003"), ("max_steps", "7"), ("temperature", "0.25")])
    p = tmp_path / "d.ini"
    p.write_text(dump_config(cfg))
    assert load_config(p).values == cfg.values
