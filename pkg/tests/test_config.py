import pytest

from gcq.config import (ConfigError, RunConfig, default_config_text, env_overrides, load_config,
                        parse_config_text, preset_config)


def test_defaults_match_the_scenario():
    c = RunConfig()
    assert c.dt == 0.5 and c.sensing_range == 30.0 and c.n_max == 40
    assert c.road.corridor_length == 500 and tuple(c.road.ramp_positions) == (200, 400)
    assert c.reward.collision_value == 50 and c.reward.lane_change_value == 0.5
    assert c.schedule.gamma == 0.99 and c.schedule.batch_size == 32 and c.schedule.tau == 0.01


def test_presets():
    desk, paper = preset_config("desk"), preset_config("paper")
    assert (desk.schedule.warmup_steps, desk.schedule.total_steps) == (5_000, 50_000)
    assert (paper.schedule.warmup_steps, paper.schedule.total_steps) == (200_000, 800_000)
    assert desk.structural_digest() == paper.structural_digest()
    assert desk.digest() != paper.digest()
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_config("huge")


def test_file_grammar(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# a comment\n"
        "schedule.total_steps = 300000   # trailing comment\n"
        "\n"
        "ablation.no_fusion = true\n"
        "road.ramp_positions = [150, 350]\n"
        'preset = "paper"\n'
    )
    c = load_config(path, environ={})
    assert c.preset == "paper"
    assert c.schedule.total_steps == 300_000 and c.schedule.warmup_steps == 200_000
    assert c.ablation.no_fusion is True
    assert tuple(c.road.ramp_positions) == (150.0, 350.0)


def test_parse_errors():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nnot an assignment\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2\n")


def test_unknown_and_bad_values_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        preset_config("desk", {"schedule.totl_steps": 5})
    with pytest.raises(ConfigError, match="bad value"):
        preset_config("desk", {"seed": 1.5})
    with pytest.raises(ConfigError):
        preset_config("desk", {"schedule.gamma": 1.0})
    with pytest.raises(ConfigError):
        preset_config("desk", {"schedule.warmup_steps": 60_000})


def test_env_overrides_layer_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nschedule.total_steps = 9000\n")
    env = {"GCQ_SCHEDULE__TOTAL_STEPS": "20000", "GCQ_ABLATION__NO_FUSION": "true", "HOME": "/x"}
    assert env_overrides(env) == {"schedule.total_steps": 20000, "ablation.no_fusion": True}
    c = load_config(path, environ=env, seed=4)
    assert c.seed == 4 and c.schedule.total_steps == 20_000 and c.ablation.no_fusion


def test_digests():
    base = preset_config("desk")
    assert base.digest() == preset_config("desk").digest()
    assert base.with_overrides({"seed": 9}).structural_digest() == base.structural_digest()
    assert base.with_overrides({"flows.hdv": 0.5}).structural_digest() == base.structural_digest()
    assert base.with_overrides({"sensing_range": 40.0}).structural_digest() != base.structural_digest()
    assert base.with_overrides({"ablation.no_fusion": True}).structural_digest() != base.structural_digest()


def test_dump_roundtrip():
    c = preset_config("desk", {"seed": 11, "ablation.double_q": True})
    again = RunConfig().with_overrides(parse_config_text(c.dump()))
    assert again == c
    assert parse_config_text(default_config_text())["preset"] == "desk"
