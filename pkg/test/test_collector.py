import logging

import numpy as np
import pytest
import torch

from behavior import Actor
from collector import CollectorManager, CollectorWorker, Policy, PolicySnapshot
from envs import PixelCatch, PixelPoint
from replay import ReplayBuffer
from world_model import WorldModel


@pytest.fixture
def snapshot(tiny_config, seeded):
    config = tiny_config()
    wm = WorldModel(config, 2, discrete=False)
    actor = Actor(wm.state_size, 2, discrete=False, layers=2, hidden=16)
    return wm, actor, PolicySnapshot(wm, actor)


class ExplodingEnv(PixelPoint):
    def step(self, action):
        raise RuntimeError("simulator crashed")


def test_worker_marks_episode_starts(snapshot):
    _, _, snap = snapshot
    replay = ReplayBuffer(100, (3, 16, 16), 2)
    worker = CollectorWorker(PixelPoint(image_size=16, max_episode_steps=5), 0, Policy(snap), replay)

    results = [worker.step() for _ in range(6)]

    assert results[:4] == [None] * 4
    assert results[4].length == 5 and results[4].timeout
    assert len(replay) == 6 + 1 + 1
    batch = replay.sample(1, 8, np.random.default_rng(0))
    assert batch.is_first[0].tolist() == [True] + [False] * 5 + [True, False]
    assert batch.continues[0, 5] == 0.0
    assert np.all(batch.actions[0, 0] == 0) and np.all(batch.actions[0, 6] == 0)
    assert np.all(np.abs(batch.actions[0, 1:6]) <= 1.0)


def test_episode_return_sums_rewards(snapshot):
    _, _, snap = snapshot
    worker = CollectorWorker(PixelPoint(image_size=16, max_episode_steps=3), 0, Policy(snap), None)
    rewards = []
    original_step = worker.env.step

    def recording_step(action):
        out = original_step(action)
        rewards.append(out[1])
        return out

    worker.env.step = recording_step
    result = None
    while result is None:
        result = worker.step()
    assert result.episode_return == pytest.approx(sum(rewards))


def test_discrete_policy_emits_one_hot_actions(tiny_config, seeded):
    config = tiny_config(task="pixelcatch")
    wm = WorldModel(config, 3, discrete=True)
    policy = Policy(PolicySnapshot(wm, Actor(wm.state_size, 3, discrete=True, layers=2, hidden=16)))
    env = PixelCatch(image_size=16)
    obs = env.reset()
    for _ in range(3):
        action = policy(obs)
        assert action.shape == (3,) and action.sum() == 1.0
        obs = env.step(action)[0]
    greedy = policy(obs, sample=False)
    assert greedy.sum() == 1.0


def test_publish_copies_current_weights(snapshot):
    wm, actor, snap = snapshot
    with torch.no_grad():
        for p in actor.parameters():
            p.add_(1.0)
    snap.publish(wm, actor)
    assert snap.version == 1
    for mine, theirs in zip(snap.actor.parameters(), actor.parameters()):
        assert torch.equal(mine, theirs)
    assert not any(p.requires_grad for p in snap.actor.parameters())


def test_manager_steps_every_worker(snapshot):
    _, _, snap = snapshot
    replay = ReplayBuffer(100, (3, 16, 16), 2)
    envs = [PixelPoint(image_size=16, seed=i, max_episode_steps=2) for i in range(3)]
    manager = CollectorManager(envs, snap, replay, threaded=True)
    try:
        assert manager.collect() == []
        finished = manager.collect()
    finally:
        manager.close()
    assert sorted(r.env_id for r in finished) == [0, 1, 2]
    assert all(replay.stream_length(i) == 3 for i in range(3))


def test_threaded_worker_failure_reaches_the_caller(snapshot, caplog):
    _, _, snap = snapshot
    replay = ReplayBuffer(100, (3, 16, 16), 2)
    envs = [PixelPoint(image_size=16), ExplodingEnv(image_size=16)]
    manager = CollectorManager(envs, snap, replay, threaded=True)
    try:
        with caplog.at_level(logging.ERROR), pytest.raises(RuntimeError, match="simulator crashed"):
            manager.collect()
    finally:
        manager.close()
    assert "collector for env 1 failed" in caplog.text
