"""Config parsing: defaults, validation messages, and hashing."""
from __future__ import annotations

import pytest

from mid.config import (
    DEFAULT_EVAL_ATTACKS,
    DEFAULT_POOL,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    parse_config,
)


def _write(tmp_path, text):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return path


def test_empty_config_uses_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, "{}\n"))
    assert cfg.seed == 0
    assert cfg.attacks.epsilon == 0.3
    assert tuple(cfg.pool) == DEFAULT_POOL
    assert cfg.meta.alpha == 1e-3 and cfg.meta.beta == 1.0 and cfg.meta.gamma == 1e-3
    assert cfg.meta.second_order is True
    assert tuple(cfg.evaluation.attacks) == DEFAULT_EVAL_ATTACKS


def test_defaults_build_specs():
    cfg = ExperimentConfig()
    pool = cfg.attacker_pool()
    assert pool.names == ("PGD_N", "PGD_T", "MIM_N", "MIM_T", "identity")
    assert all(s.epsilon == 0.3 for s in pool.non_identity)
    evals = cfg.eval_specs()
    assert len(evals) == len(DEFAULT_EVAL_ATTACKS)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="missing config file"):
        parse_config(tmp_path / "nope.yaml")


def test_invalid_yaml_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config(_write(tmp_path, "seed: [unclosed\n"))


def test_unknown_top_level_key_with_line(tmp_path):
    path = _write(tmp_path, "seed: 1\n\nbogus: 3\n")
    with pytest.raises(ConfigError, match=r"unknown key 'bogus' at line 3"):
        parse_config(path)


def test_unknown_nested_key_with_line(tmp_path):
    path = _write(tmp_path, "meta:\n  epochs: 2\n  turbo: true\n")
    with pytest.raises(ConfigError, match=r"unknown key 'meta.turbo' at line 3"):
        parse_config(path)


def test_type_mismatch_reports_key_and_line(tmp_path):
    path = _write(tmp_path, "meta:\n  epochs: five\n")
    with pytest.raises(ConfigError, match=r"'meta.epochs' at line 2: expected an integer"):
        parse_config(path)
    path = _write(tmp_path, "teacher:\n  lr: fast\n")
    with pytest.raises(ConfigError, match=r"'teacher.lr' at line 2: expected a number"):
        parse_config(path)


def test_duplicate_yaml_key_rejected(tmp_path):
    path = _write(tmp_path, "seed: 1\nseed: 2\n")
    with pytest.raises(ConfigError, match="duplicate key 'seed'"):
        parse_config(path)


def test_duplicate_pool_entries_rejected(tmp_path):
    path = _write(tmp_path, "pool: [PGD_N, MIM_N, PGD_N]\n")
    with pytest.raises(ConfigError, match=r"duplicate entries \['PGD_N'\]"):
        parse_config(path)


def test_unknown_attack_name_rejected(tmp_path):
    path = _write(tmp_path, "pool: [PGD_N, WAT_N, MIM_N]\n")
    with pytest.raises(ConfigError, match=r"pool\[1\]"):
        parse_config(path)


def test_attack_entry_overrides(tmp_path):
    path = _write(tmp_path,
                  "pool:\n"
                  "  - name: PGD_N\n"
                  "    epsilon: 0.2\n"
                  "    steps: 5\n"
                  "  - MIM_N\n")
    cfg = parse_config(path)
    pool = cfg.attacker_pool()
    pgd = next(s for s in pool.non_identity if s.canonical_name == "PGD_N")
    mim = next(s for s in pool.non_identity if s.canonical_name == "MIM_N")
    assert pgd.epsilon == 0.2 and pgd.steps == 5
    assert mim.epsilon == 0.3


def test_attack_entry_unknown_key(tmp_path):
    path = _write(tmp_path, "pool:\n  - name: PGD_N\n    power: 9\n")
    with pytest.raises(ConfigError, match=r"unknown attack keys \['power'\]"):
        parse_config(path)


def test_meta_section_validated(tmp_path):
    path = _write(tmp_path, "meta:\n  outer_optimizer: adam\n")
    with pytest.raises(ConfigError, match="section 'meta'"):
        parse_config(path)
    path = _write(tmp_path, "meta:\n  student_init: zeros\n")
    with pytest.raises(ConfigError, match="section 'meta'"):
        parse_config(path)


def test_subsample_fraction_bounds():
    with pytest.raises(ConfigError, match="subsample_fraction"):
        config_from_dict({"dataset": {"subsample_fraction": 0.0}})
    with pytest.raises(ConfigError, match="subsample_fraction"):
        config_from_dict({"dataset": {"subsample_fraction": 1.5}})


def test_eval_mode_validated():
    with pytest.raises(ConfigError, match="evaluation.mode"):
        config_from_dict({"evaluation": {"mode": "grey"}})


def test_negative_cutoff_rejected():
    with pytest.raises(ConfigError, match="analysis.cutoffs"):
        config_from_dict({"analysis": {"cutoffs": [0, -2]}})


def test_meta_config_inherits_global_seed():
    cfg = config_from_dict({"seed": 7})
    assert cfg.meta_config().seed == 7


def test_config_hash_stability():
    a = config_from_dict({"seed": 3})
    b = config_from_dict({"seed": 3})
    c = config_from_dict({"seed": 4})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_round_trip_through_dict():
    cfg = config_from_dict({"seed": 9, "meta": {"epochs": 2, "epsilon_ramp_epochs": 3}})
    again = config_from_dict(cfg.to_dict())
    assert config_hash(cfg) == config_hash(again)
    assert again.meta.epsilon_ramp_epochs == 3
