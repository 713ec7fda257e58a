from dataclasses import replace

import pytest

from raruq.config import Config, ConfigError, apply_overrides, dump_toml, from_mapping, load_config


def test_defaults_valid():
    cfg = from_mapping({})
    assert cfg.estimators.B == 10 and cfg.retrieval.k == 3 and cfg.engine.most_likely_temperature == 0.7


@pytest.mark.parametrize("raw, field", [
    ({"estimators": {"B": 0}}, "estimators.B"),
    ({"estimators": {"B": "ten"}}, "estimators.B"),
    ({"estimators": {"methods": ["Magic"]}}, "estimators.methods"),
    ({"engine": {"sample_temperature": 3.0}}, "engine.sample_temperature"),
    ({"retrieval": {"nope": 1}}, "retrieval.nope"),
    ({"bogus": {}}, "bogus"),
    ({"backend": {"kind": "remote"}}, "backend.url"),
    ({"prompts": {"unknown_template": "x"}}, "prompts.unknown_template"),
])
def test_field_level_errors(raw, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        from_mapping(raw)


def test_overrides_parse_toml_literals():
    raw = apply_overrides({}, {"estimators.B": "3", "estimators.methods": "R2C,SelfC", "downstream.clustering": "false"})
    cfg = from_mapping(raw)
    assert cfg.estimators.B == 3 and cfg.estimators.methods == ("R2C", "SelfC") and cfg.downstream.clustering is False


def test_load_resolves_relative_paths(tmp_path):
    (tmp_path / "c.toml").write_text('[run]\ndataset = "d.jsonl"\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.run.dataset == str(tmp_path / "d.jsonl")


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")
    (tmp_path / "bad.toml").write_text("[run\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_dump_roundtrip(tmp_path):
    cfg = from_mapping({"estimators": {"methods": ["R2C", "PTrue"], "B": 3}, "prompts": {"p_true": "Q {question} {samples} {answer}"}})
    (tmp_path / "c.toml").write_text(dump_toml(cfg))
    again = load_config(tmp_path / "c.toml")
    assert again.run.runs_dir == str(tmp_path / "runs")
    assert replace(again, run=cfg.run) == cfg


def test_digest_ignores_execution_knobs():
    a = from_mapping({"run": {"workers": 1, "run_id": "x"}, "backend": {"max_in_flight": 1}})
    b = from_mapping({"run": {"workers": 8}})
    c = from_mapping({"run": {"master_seed": 1}})
    assert a.digest() == b.digest() != c.digest()
    assert isinstance(a, Config)
