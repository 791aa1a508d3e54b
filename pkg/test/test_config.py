import pytest

import config as config_module
from config import (
    PRESET_DIR,
    ConfigError,
    ConfigManager,
    TrainConfig,
    dump_config,
    load_config,
    parse_pairs,
)


def test_defaults_match_reference_settings():
    config = TrainConfig()
    assert (config.num_latents, config.classes_per_latent) == (32, 32)
    assert (config.beta_pred, config.beta_dyn, config.beta_rep) == (1.0, 0.95, 0.05)
    assert config.twohot_bins == 255 and config.horizon == 15
    assert config.batchnorm and config.value_head and config.action_head
    assert not config.discrete


def test_config_manager_creates_default_file(tmp_path):
    config_path = tmp_path / "nested" / "run.cfg"

    manager = ConfigManager(config_path, TrainConfig(seed=3))

    assert config_path.exists()
    assert manager.get_config() == TrainConfig(seed=3)
    assert load_config(config_path) == TrainConfig(seed=3)


def test_config_manager_loads_existing_file(tmp_path):
    config_path = tmp_path / "run.cfg"
    config_path.write_text("# reaching\ntask = pixelcatch\nhorizon=7  # short\n\nbatchnorm = false\n")

    manager = ConfigManager(config_path)

    config = manager.get_config()
    assert config.task == "pixelcatch" and config.discrete
    assert config.horizon == 7
    assert config.batchnorm is False
    assert manager.with_overrides(["horizon=9"]).horizon == 9


def test_unknown_key_names_file_and_line(tmp_path):
    config_path = tmp_path / "bad.cfg"
    config_path.write_text("task = pixelcatch\nhorizn = 5\n")

    with pytest.raises(ConfigError, match=r"bad.cfg:2: unknown key 'horizn'"):
        load_config(config_path)


def test_line_without_equals_is_rejected():
    with pytest.raises(ConfigError):
        parse_pairs(["horizon 5"])


def test_out_of_range_values_raise_config_error():
    with pytest.raises(ConfigError):
        load_config(None, ["horizon=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["image_size=48"])
    with pytest.raises(ConfigError):
        load_config(None, ["batchnorm=true", "batch_size=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["task=cartpole"])


def test_overrides_win_over_file(tmp_path):
    config_path = tmp_path / "run.cfg"
    config_path.write_text("seed = 1\nhorizon = 5\n")

    config = load_config(config_path, ["seed=4", "free_nats=0.5"])

    assert (config.seed, config.horizon, config.free_nats) == (4, 5, 0.5)


def test_dump_round_trips(tmp_path):
    config = TrainConfig(task="pixelpoint_sparse", distractors=True, beta_rep=0.2, beta_dyn=0.8)
    path = tmp_path / "dump.cfg"
    path.write_text(dump_config(config))
    assert load_config(path) == config


@pytest.mark.parametrize("preset", sorted(p.stem for p in PRESET_DIR.glob("*.cfg")))
def test_presets_parse(preset):
    config = load_config(preset)
    assert isinstance(config, TrainConfig)


def test_ablation_presets_change_only_their_setting():
    base = load_config("pixelpoint_distractor")
    assert base.distractors and base.reward_loss_scale == 100
    assert not load_config("ablation_no_value").value_head
    assert not load_config("ablation_no_action").action_head
    assert not load_config("ablation_no_batchnorm").batchnorm
    kl = load_config("ablation_kl_rep0")
    assert (kl.beta_dyn, kl.beta_rep) == (1.0, 0.0)


def test_missing_preset():
    with pytest.raises(ConfigError):
        load_config("no_such_preset")


def test_run_root_follows_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(config_module.RUN_ROOT_ENV, str(tmp_path))
    assert config_module.default_run_root() == tmp_path
    monkeypatch.delenv(config_module.RUN_ROOT_ENV)
    assert str(config_module.default_run_root()) == config_module.DEFAULT_RUN_ROOT
