from pathlib import Path

import pytest

from tagpr.config import ConfigError, RunConfig, config_from_dict, desk_config, dump_config, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    cfg = RunConfig()
    assert (cfg.rewards.alpha, cfg.rewards.beta, cfg.rewards.gamma) == (0.8, 0.8, 0.2)
    assert (cfg.gspo.G, cfg.gspo.eps_low, cfg.gspo.eps_high) == (5, 0.0003, 0.0004)
    assert cfg.gspo.temperature == 1.0 and cfg.gspo.top_p == 1.0
    assert cfg.registry.min_tag_count == 3 and cfg.registry.names[-1] == "make_decision"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"sedd": 1})
    with pytest.raises(ConfigError, match="gspo"):
        config_from_dict({"gspo": {"G": 5, "clip": 0.2}})
    with pytest.raises(ConfigError):
        config_from_dict({"gspo": {"G": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"clients": "grpc"})
    with pytest.raises(ConfigError):
        config_from_dict({"sft": 3})


def test_yaml_roundtrip(tmp_path):
    cfg = desk_config(seed=3, gspo={"G": 4})
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "bad.yaml").write_text("seed: [1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_shipped_configs_match_code():
    assert load_config(CONFIGS / "desk.yaml") == desk_config()
    assert load_config(CONFIGS / "full.yaml") == RunConfig()


def test_desk_override_merges_sections():
    cfg = desk_config(sft={"lr": 0.1})
    assert cfg.sft.lr == 0.1 and cfg.sft.n_examples == desk_config().sft.n_examples
