import string

import pytest
import tomli_w
from hypothesis import given, settings
from hypothesis import strategies as st

from zofed.config import (
    FedAvgMode,
    RunConfig,
    config_from_dict,
    config_hash,
    load_config,
    parse_config,
    serialize_config,
)
from zofed.errors import ConfigError
from zofed.federation import SGD, Adam

MINIMAL = """
rounds = 5

[model]
preset = "mlp"
sizes = [2, 8, 2]

[dataset]
kind = "spirals"
"""


def test_empty_config_lists_required_keys():
    with pytest.raises(ConfigError) as exc:
        parse_config("")
    for key in ("model", "dataset", "rounds"):
        assert key in str(exc.value)


def test_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.estimator.sigma == 1e-4
    assert cfg.ema_coeff == 0.995
    assert cfg.optimizer == Adam(lr=0.01, beta1=0.9, beta2=0.99)
    assert cfg.precision == "f64"
    assert cfg.mode.kind == "fedsgd" and cfg.mode.participation == 1.0


def test_zero_sigma_rejected_with_line():
    text = MINIMAL + "\n[estimator]\nsigma = 0.0\n"
    with pytest.raises(ConfigError, match="sigma must be > 0") as exc:
        parse_config(text)
    assert exc.value.key == "estimator.sigma"
    assert exc.value.line == text.splitlines().index("sigma = 0.0") + 1


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config("learning_rate = 0.1\n" + MINIMAL)
    assert exc.value.key == "learning_rate" and exc.value.line == 1
    with pytest.raises(ConfigError) as exc:
        parse_config(MINIMAL + "\n[estimator]\nK = 5\n")
    assert exc.value.key == "estimator.K"
    with pytest.raises(ConfigError):
        parse_config(MINIMAL.replace('preset = "mlp"', 'preset = "mlp"\nwidth = 3'))


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config(MINIMAL.replace("rounds = 5", 'rounds = "five"'))
    assert exc.value.key == "rounds" and exc.value.line == 2
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "\n[estimator]\nk = 2.5\n")
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "\n[estimator]\nk = true\n")


def test_malformed_toml():
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("rounds = = 3")


def test_partition_seed_lives_under_seeds():
    cfg = parse_config(MINIMAL + "\n[seeds]\npartition = 9\n")
    assert cfg.partition.seed == 9
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "\n[partition]\nseed = 3\n")


def test_explicit_layers_and_optimizers():
    text = """
rounds = 1
[model]
input_shape = [1, 6, 6]
num_classes = 3
layers = [
  {type = "conv2d", in_ch = 1, out_ch = 2, kernel = 3},
  {type = "groupnorm", groups = 1, channels = 2},
  {type = "activation", fn = "selu"},
  {type = "flatten"},
  {type = "dense", in = 32, out = 3},
]
[dataset]
kind = "spirals"
[optimizer]
kind = "sgd"
lr = 0.5
[mode]
kind = "fedavg"
local_epochs = 2
"""
    cfg = parse_config(text)
    assert cfg.model.num_params == (2 * 9 + 2) + 4 + (32 * 3 + 3)
    assert cfg.optimizer == SGD(0.5)
    assert cfg.mode == FedAvgMode(local_epochs=2)
    assert parse_config(serialize_config(cfg)) == cfg
    with pytest.raises(ConfigError):
        parse_config(text.replace('fn = "selu"', 'fn = "gelu"'))
    with pytest.raises(ConfigError):
        parse_config(text.replace('{type = "flatten"}', '{type = "pool"}'))
    with pytest.raises(ConfigError):
        parse_config(text.replace("local_epochs = 2", "local_epochs = 0"))
    with pytest.raises(ConfigError):
        parse_config(text.replace('kind = "sgd"', 'kind = "rmsprop"'))


def test_overrides():
    cfg = parse_config(MINIMAL, ["estimator.k=7", "partition.kind=dirichlet", "seeds.master=4", "rounds=2"])
    assert cfg.estimator.k == 7 and cfg.partition.kind == "dirichlet" and cfg.seeds.master == 4 and cfg.rounds == 2
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["estimator.k"])
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["estimator.bogus=1"])


def test_load_config_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(MINIMAL)
    assert load_config(p) == parse_config(MINIMAL)


def test_hash_tracks_content():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL, ["estimator.k=3"])
    assert config_hash(a) == config_hash(parse_config(MINIMAL))
    assert config_hash(a) != config_hash(b)


configs = st.fixed_dictionaries(
    {
        "rounds": st.integers(0, 1000),
        "ema_coeff": st.floats(0.0, 0.999),
        "precision": st.sampled_from(["f32", "f64"]),
        "model": st.fixed_dictionaries(
            {
                "preset": st.just("mlp"),
                "sizes": st.lists(st.integers(1, 6), min_size=1, max_size=3).map(lambda h: [2] + h + [2]),
                "activation": st.sampled_from(["relu", "selu", "hardswish"]),
            }
        ),
        "dataset": st.fixed_dictionaries({"kind": st.sampled_from(["spirals", "two_gaussians"]), "turns": st.floats(0.1, 3.0)}),
        "estimator": st.fixed_dictionaries(
            {"sigma": st.floats(1e-8, 1.0), "k": st.integers(1, 5000), "scheme": st.sampled_from(["central", "forward"])}
        ),
        "partition": st.fixed_dictionaries({"kind": st.sampled_from(["iid", "dirichlet"]), "clients": st.integers(1, 100), "alpha": st.floats(0.01, 10)}),
        "optimizer": st.one_of(
            st.fixed_dictionaries({"kind": st.just("adam"), "lr": st.floats(1e-5, 1.0)}),
            st.fixed_dictionaries({"kind": st.just("sgd"), "lr": st.floats(1e-5, 1.0)}),
        ),
        "seeds": st.fixed_dictionaries({"master": st.integers(0, 2**31), "mask": st.integers(0, 2**31)}),
    }
)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_serialize_parse_round_trip(raw):
    cfg = parse_config(tomli_w.dumps(raw))
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


scalars = st.one_of(st.integers(-5, 5), st.floats(allow_nan=False), st.booleans(), st.text(string.ascii_lowercase, max_size=5))
junk = st.dictionaries(
    st.sampled_from(["rounds", "model", "dataset", "estimator", "mode", "seeds", "extra", "precision"]),
    st.one_of(scalars, st.dictionaries(st.text(string.ascii_lowercase, min_size=1, max_size=6), scalars, max_size=3)),
    max_size=6,
)


@settings(max_examples=200, deadline=None)
@given(junk)
def test_strict_parse_totality(raw):
    try:
        cfg = config_from_dict(raw)
    except ConfigError as exc:
        assert str(exc)
    else:
        assert isinstance(cfg, RunConfig)
