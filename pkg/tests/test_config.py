import json

import pytest

from stylevar.config import ConfigError, RunConfig, describe_defaults
from stylevar.tokenizer import TOY_SCHEDULE


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_partial_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sft": {"epochs": 3}, "grpo": {"lr": 1e-4}, "deterministic": True}))
    cfg = RunConfig.load(p)
    assert cfg.sft.epochs == 3 and cfg.grpo.lr == 1e-4 and cfg.deterministic
    assert cfg.sft.batch_size == RunConfig().sft.batch_size


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="panw_gamma"):
        RunConfig.from_dict({"grpo": {"panw_gamma": 0.7}})
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": {}})


@pytest.mark.parametrize("doc", [{"sft": {"epochs": "ten"}}, {"deterministic": 1}, {"sft": {"epochs": 2.5}},
                                 {"grpo": {"group_size": 1}}, {"sampler": {"top_p": 2.0}}])
def test_bad_values_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        RunConfig.load(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="bad.json"):
        RunConfig.load(bad)


def test_model_config_follows_sections():
    cfg = RunConfig.from_dict({"tokenizer": {"vocab": 32}, "model": {"embed_dim": 64}})
    mc = cfg.model_config()
    assert mc.vocab_size == 32 and mc.embed_dim == 64 and mc.schedule == TOY_SCHEDULE


def test_help_lists_every_key():
    text = describe_defaults()
    flat = []

    def walk(d, prefix):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(v, f"{prefix}{k}.")
            else:
                flat.append(prefix + k)

    walk(RunConfig().to_dict(), "")
    for key in flat:
        assert f"  {key} = " in text
