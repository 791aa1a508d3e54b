import math

import numpy as np
import pytest
import torch

from agent import (
    EVAL_SEED_OFFSET,
    Agent,
    CheckpointError,
    NonFiniteLossError,
    RatioScheduler,
    checkpoint_path,
    collapse_report,
    dream_grid,
)
from config import load_config
from conftest import TINY_OVERRIDES
from envs import PixelCatch
from storage import RunStorage


@pytest.fixture
def trained(tiny_config, tmp_path):
    """A few dozen gradient steps on the tiny reaching task."""
    agent = Agent(tiny_config(steps=40))
    storage = RunStorage(tmp_path / "run")
    agent.train(storage, progress=False)
    return agent, storage


def test_ratio_scheduler_spreads_fractional_updates():
    scheduler = RatioScheduler(512, 16, 64)
    updates = [scheduler(1) for _ in range(10)]
    assert sum(updates) == 5
    assert set(updates) <= {0, 1}


def test_ratio_scheduler_stays_within_window_bounds():
    scheduler = RatioScheduler(100, 3, 7)
    rate = 100 / 21
    counts = [scheduler(1) for _ in range(500)]
    for start in range(0, 450, 37):
        for length in (1, 10, 50):
            total = sum(counts[start : start + length])
            assert math.floor(length * rate) - 1 <= total <= math.ceil(length * rate) + 1
    assert sum(counts) == math.floor(500 * rate)


def test_collapse_report_flags_constant_features():
    x = torch.ones(64, 16)
    report = collapse_report(x)
    assert report.x_std == pytest.approx(0.0, abs=1e-7)
    assert report.x_collapsed
    assert report.h_std is None and report.h_collapsed is None


def test_collapse_report_matches_iid_reference(seeded):
    x = torch.randn(4096, 32)
    report = collapse_report(x, torch.randn(4096, 8))
    assert report.x_std == pytest.approx(1 / math.sqrt(32), rel=0.05)
    assert report.x_reference == pytest.approx(1 / math.sqrt(32))
    assert not report.x_collapsed and not report.h_collapsed
    assert "x_t channel std" in report.table()


def test_collapse_report_needs_enough_samples():
    with pytest.raises(ValueError):
        collapse_report(torch.randn(63, 8))


def test_dream_grid_borders_mark_context_and_imagination():
    frames = np.zeros((4, 3, 8, 8), dtype=np.float32)
    truth = np.zeros((3, 3, 8, 8), dtype=np.float32)
    image = np.asarray(dream_grid(truth, frames, context=2))
    assert image.shape == (20, 40, 3)
    assert tuple(image[10, 0]) == (40, 200, 70)
    assert tuple(image[10, 30]) == (220, 50, 40)
    # missing truth tiles stay black
    assert image[1:9, 31:39].max() == 0


def test_agent_infers_action_space(tiny_config):
    assert Agent(tiny_config()).action_dim == 2
    catch = Agent(tiny_config(task="pixelcatch"))
    assert catch.action_dim == 3 and catch.discrete


def test_train_writes_metrics_and_checkpoint(trained):
    agent, storage = trained
    records = storage.read_metrics()
    kinds = {r["kind"] for r in records}
    assert "train" in kinds
    train_records = [r for r in records if r["kind"] == "train"]
    assert train_records and agent.grad_steps == train_records[-1]["grad_steps"]
    assert all(math.isfinite(r["total"]) for r in train_records)
    assert agent.env_steps >= 40
    assert checkpoint_path(storage.run_dir).exists()
    assert storage.config_path.exists()


def test_update_count_follows_train_ratio(trained):
    agent, storage = trained
    first_update = min(r["env_steps"] for r in storage.read_metrics() if r["kind"] == "train")
    # tiny ratio: one update per policy step once replay is warm
    expected = agent.env_steps - first_update + agent.config.env_instances
    assert abs(agent.grad_steps - expected) <= 1


def test_reloaded_checkpoint_evaluates_identically(trained):
    agent, storage = trained
    before = agent.evaluate(1, progress=False)
    restored = Agent.load(checkpoint_path(storage.run_dir))
    assert restored.grad_steps == agent.grad_steps
    assert restored.evaluate(1, progress=False).returns == before.returns


def test_load_rejects_mismatched_action_space(trained):
    agent, storage = trained
    with pytest.raises(CheckpointError):
        Agent.load(checkpoint_path(storage.run_dir), ["task=pixelcatch"])
    with pytest.raises(CheckpointError):
        agent.evaluate(1, env=PixelCatch(image_size=16), progress=False)


def test_dream_decodes_context_and_horizon(trained):
    agent, storage = trained
    result = agent.dream(context=3, horizon=6, storage=storage)
    assert result.frames.shape == (9, 3, 16, 16)
    assert len(result.truth) == 9
    assert result.image.size == (9 * 18, 2 * 18)
    assert result.latents["h"].shape == (9, 16)
    assert all(path.exists() for path in result.paths)
    with pytest.raises(ValueError):
        agent.dream(context=3, horizon=0)


def test_diagnose_reports_collapse_statistics(trained):
    agent, _ = trained
    report = agent.diagnose(64)
    assert report.samples == 64
    assert 0.0 <= report.x_std <= 1.0
    assert report.recon_sprite_mse is not None and report.recon_background_mse is not None
    assert report.parameters["world model"] > 0
    with pytest.raises(ValueError):
        agent.diagnose(10)


def test_non_finite_loss_leaves_postmortem(tiny_config, tmp_path, monkeypatch):
    agent = Agent(tiny_config(steps=60))
    real_loss = agent.world_model.loss

    def poisoned(batch):
        out = real_loss(batch)
        out.loss = out.loss * float("nan")
        return out

    monkeypatch.setattr(agent.world_model, "loss", poisoned)
    storage = RunStorage(tmp_path / "run")

    with pytest.raises(NonFiniteLossError):
        agent.train(storage, progress=False)

    assert checkpoint_path(storage.run_dir, "postmortem").exists()
    assert storage.read_metrics()[-1]["kind"] == "postmortem"


def test_fixed_seed_runs_reproduce_metrics(tiny_config, tmp_path):
    records = []
    for name in ("a", "b"):
        storage = RunStorage(tmp_path / name)
        Agent(tiny_config(steps=30, seed=5)).train(storage, progress=False)
        records.append([r for r in storage.read_metrics() if r["kind"] == "train"])
    assert records[0] and records[0] == records[1]


ABLATION_PRESETS = [
    "ablation_no_value",
    "ablation_no_action",
    "ablation_no_batchnorm",
    "ablation_kl_default",
    "ablation_kl_rep02",
    "ablation_kl_rep0",
    "ablation_kl_rep005",
]


@pytest.mark.parametrize("preset", ABLATION_PRESETS)
def test_ablation_presets_launch(preset, tmp_path):
    config = load_config(preset, [*TINY_OVERRIDES, "steps=30"])
    storage = RunStorage(tmp_path / preset)
    Agent(config).train(storage, progress=False)
    train_records = [r for r in storage.read_metrics() if r["kind"] == "train"]
    assert train_records
    assert all(math.isfinite(r["total"]) and math.isfinite(r["actor_loss"]) for r in train_records)


@pytest.mark.slow
@pytest.mark.parametrize("preset", ABLATION_PRESETS)
def test_ablation_presets_stay_finite_for_a_thousand_updates(preset, tmp_path):
    config = load_config(preset, [*TINY_OVERRIDES, "steps=1100"])
    agent = Agent(config)
    storage = RunStorage(tmp_path / preset)
    agent.train(storage, progress=False)
    train_records = [r for r in storage.read_metrics() if r["kind"] == "train"]
    assert agent.grad_steps >= 1000
    assert len(train_records) == agent.grad_steps
    for record in train_records:
        assert all(math.isfinite(record[key]) for key in ("total", "actor_loss", "critic_loss", "x_std"))


def scripted_optimum(agent: Agent, episodes: int) -> float:
    env = agent.create_env(pool="eval", seed=agent.config.seed + EVAL_SEED_OFFSET)
    total = 0.0
    for _ in range(episodes):
        env.reset()
        total += env.optimal_return()
    return total / episodes


@pytest.mark.slow
def test_reaching_agent_approaches_scripted_optimum(tmp_path):
    agent = Agent(load_config("pixelpoint"))
    agent.train(RunStorage(tmp_path / "point"), progress=False)
    assert agent.evaluate(10, progress=False).mean >= 0.8 * scripted_optimum(agent, 10)


@pytest.mark.slow
def test_catch_agent_learns_to_track(tmp_path):
    agent = Agent(load_config("pixelcatch"))
    agent.train(RunStorage(tmp_path / "catch"), progress=False)
    result = agent.evaluate(10, progress=False)
    assert result.mean >= 0.85 * PixelCatch().spec.max_episode_steps


@pytest.mark.slow
def test_distractor_agent_filters_backgrounds(tmp_path):
    agent = Agent(load_config("pixelpoint_distractor"))
    agent.train(RunStorage(tmp_path / "distractor"), progress=False)
    assert agent.evaluate(10, progress=False).mean >= 0.6 * scripted_optimum(agent, 10)
    report = agent.diagnose(256)
    assert report.recon_background_mse >= 2.0 * report.recon_sprite_mse
    assert report.x_std > 0.2 / math.sqrt(4096)
