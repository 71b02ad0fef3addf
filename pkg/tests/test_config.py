import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtryon.config import SEED_ENV, RunConfig, load_config, parse_flat
from vtryon.errors import LoadError, ValidationError


def test_defaults_and_keys():
    cfg = RunConfig()
    assert cfg.diffusion.gamma == 5.0
    assert cfg.train.beta1 == 0.9 and cfg.train.beta2 == 0.999
    assert (cfg.data.height, cfg.data.width, cfg.data.frames) == (64, 48, 8)
    keys = RunConfig.keys()
    assert "rasg.lambda_r" in keys and "atff.d_k" in keys and len(keys) == len(set(keys))
    assert set(keys) == set(cfg.flat())


def test_dump_parse_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.update({"rasg.lambda_n": 0.25, "rasg.layers": ["mid"], "atff.seed_policy": "fixed", "train.lr": 3e-4})
    cfg.save(tmp_path / "c.cfg")
    back = load_config(tmp_path / "c.cfg")
    assert back.flat() == cfg.flat()


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert load_config().train.seed == 42 and load_config().sample.seed == 42
    (tmp_path / "c.cfg").write_text("# comment\ntrain.seed = 3\ntrain.steps = 10  # trailing\n")
    cfg = load_config(tmp_path / "c.cfg", {"train.steps": 20})
    assert cfg.train.seed == 3 and cfg.train.steps == 20


def test_type_coercion_and_errors():
    cfg = RunConfig()
    cfg.set("train.steps", "12")
    cfg.set("train.lr", 1)
    cfg.set("atff.enabled", "false")
    assert cfg.train.steps == 12 and cfg.train.lr == 1.0 and cfg.atff.enabled is False
    for key, value in [("train.steps", "1.5"), ("atff.enabled", "1"), ("train.lr", "fast"),
                       ("rasg.layers", "mid"), ("nosection.x", 1), ("train.nokey", 1)]:
        with pytest.raises(ValidationError):
            cfg.set(key, value)


@pytest.mark.parametrize("flat", [
    {"diffusion.beta_end": 1.5}, {"rasg.lambda_n": -1.0}, {"train.stage": "audio"}, {"train.lr": 0.0},
    {"sample.steps": 0}, {"data.height": 60}, {"atff.seed_policy": "sometimes"}, {"diffusion.T": 0},
    {"model.pos_init": "zeros"}, {"model.mask_input": "dense"}, {"train.latent_momentum": 1.5},
])
def test_validation(flat):
    with pytest.raises(ValidationError):
        RunConfig().update(flat)


def test_parse_errors(tmp_path):
    with pytest.raises(ValidationError):
        parse_flat("train.steps 3")
    with pytest.raises(LoadError):
        load_config(tmp_path / "missing.cfg")
    assert parse_flat("a.b = hello\nc.d = [1, 2]") == {"a.b": "hello", "c.d": [1, 2]}


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-8, 1.0), steps=st.integers(0, 10**6), lam=st.floats(0, 10), en=st.booleans())
def test_dumps_round_trip_property(lr, steps, lam, en):
    cfg = RunConfig().update({"train.lr": lr, "train.steps": steps, "rasg.lambda_r": lam, "amfe.enabled": en})
    assert RunConfig.from_flat(parse_flat(cfg.dumps())).flat() == cfg.flat()
