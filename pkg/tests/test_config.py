import pytest

from emma.config import ConfigError, RunConfig


def test_default_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_ini(cfg.to_ini()) == cfg


def test_modified_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.set("eval", "thresholds", "0.3, 0.55")
    cfg.set("finetune", "latency_weight", "1.0")
    cfg.set("model", "causal_encoder", "false")
    cfg.set("run", "sweep_checkpoints", "a.ckpt,b.ckpt")
    cfg.set("task", "kind", "copy")
    cfg.save(tmp_path / "run.ini")
    back = RunConfig.load(tmp_path / "run.ini")
    assert back == cfg
    assert back.eval.thresholds == [0.3, 0.55]
    assert back.model.causal_encoder is False
    assert back.run.sweep_checkpoints == ["a.ckpt", "b.ckpt"]


def test_float_values_survive_exactly():
    cfg = RunConfig()
    cfg.train.learning_rate = 0.1 + 0.2
    assert RunConfig.from_ini(cfg.to_ini()).train.learning_rate == 0.1 + 0.2


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="train.momentum"):
        RunConfig.from_ini("[train]\nmomentum = 0.9\n")
    with pytest.raises(ConfigError, match="optimizer"):
        RunConfig.from_ini("[optimizer]\nlr = 1\n")


def test_bad_value_is_named():
    with pytest.raises(ConfigError, match="train.steps"):
        RunConfig().set("train", "steps", "many")
    with pytest.raises(ConfigError):
        RunConfig().set("model", "causal_encoder", "maybe")


def test_sections_build_runtime_objects():
    cfg = RunConfig()
    assert cfg.task.build().kind == "lexicon-map"
    assert cfg.train.build().steps == cfg.train.steps
    ft = cfg.finetune
    assert ft.build().learning_rate == ft.learning_rate
    assert ft.weights().latency == ft.latency_weight
