import dataclasses

import numpy as np
import pytest

from senseplan.config import (ConfigError, RunConfig, config_hash, derive_rng,
                              load_config, make_config, parse_config,
                              serialize_config)


def test_defaults_validate():
    cfg = make_config()
    assert cfg.eta_max == 2.0
    assert cfg.gamma == 0.99
    assert cfg.tau == 0.005
    assert cfg.beta_lambda == 0.05
    assert cfg.epsilon == 0.02
    assert cfg.alpha == 0.05
    assert cfg.particles == 500
    assert cfg.horizon == 8
    assert cfg.beta == 0.05
    assert cfg.lambda_ramp_target == 0.5


def test_serialize_parse_roundtrip_identity():
    cfg = make_config(seed=7, world_radius_m=40.0, cvar_norm="fractional")
    values = parse_config(serialize_config(cfg))
    expect = {f.name: getattr(cfg, f.name)
              for f in dataclasses.fields(RunConfig)}
    assert values == expect
    assert make_config(values) == cfg


def test_dotted_keys_map_to_groups():
    values = parse_config("world.radius_m = 30\nseed = 3\n")
    assert values == {"world_radius_m": 30.0, "seed": 3}
    assert "world.radius_m" in serialize_config(make_config())


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("wobble = 1\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        make_config({"wobble": 1})


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("seed = 1\nseed = 2\n")


def test_type_enforcement():
    with pytest.raises(ConfigError, match="integer"):
        parse_config("seed = 1.5\n")
    with pytest.raises(ConfigError, match="number"):
        parse_config("world.radius_m = fast\n")
    # ints promote to floats for float fields
    assert parse_config("eta_max = 2\n") == {"eta_max": 2.0}


def test_comments_and_blanks_ignored():
    values = parse_config("# a comment\n\nseed = 4   # trailing\n")
    assert values == {"seed": 4}


def test_validate_rejects_bad_values():
    with pytest.raises(ConfigError, match="horizon"):
        make_config(horizon=7)
    with pytest.raises(ConfigError, match="alpha"):
        make_config(alpha=0.0)
    with pytest.raises(ConfigError, match="cvar_norm"):
        make_config(cvar_norm="median")
    with pytest.raises(ConfigError, match="positive"):
        make_config(world_count=0)


def test_load_config_with_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 1\nworld.radius_m = 30\n")
    cfg = load_config(p, {"world.radius_m": "45", "seed": "9"})
    assert cfg.seed == 9 and cfg.world_radius_m == 45.0
    with pytest.raises(ConfigError):
        load_config(p, {"nope": "1"})


def test_config_hash_tracks_values():
    a = config_hash(make_config(seed=1))
    b = config_hash(make_config(seed=2))
    assert a != b
    assert a == config_hash(make_config(seed=1))


def test_derive_rng_streams():
    a = derive_rng(0, "teacher").integers(0, 1 << 30, 4)
    b = derive_rng(0, "teacher").integers(0, 1 << 30, 4)
    c = derive_rng(0, "student").integers(0, 1 << 30, 4)
    d = derive_rng(1, "teacher").integers(0, 1 << 30, 4)
    e = derive_rng(0, "teacher", 1).integers(0, 1 << 30, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert not np.array_equal(a, e)
