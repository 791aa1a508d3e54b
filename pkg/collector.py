"""Environment collectors acting on published policy snapshots."""
from __future__ import annotations

import copy
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from behavior import Actor
from distributions import bound_action
from envs import PixelEnv
from replay import ReplayBuffer, Transition, dequantize
from world_model import ModelState, WorldModel

logger = logging.getLogger(__name__)


class PolicySnapshot:
    """Frozen copy of the acting networks; ``publish`` swaps in new weights under a lock."""

    def __init__(self, world_model: WorldModel, actor: Actor, device: str | torch.device = "cpu"):
        self.device = torch.device(device)
        self.encoder = copy.deepcopy(world_model.encoder)
        self.rssm = copy.deepcopy(world_model.rssm)
        self.actor = copy.deepcopy(actor)
        self.modules: tuple[nn.Module, ...] = (self.encoder, self.rssm, self.actor)
        for module in self.modules:
            module.to(self.device).eval().requires_grad_(False)
        self.lock = threading.Lock()
        self.version = 0

    def publish(self, world_model: WorldModel, actor: Actor) -> None:
        with self.lock:
            self.encoder.load_state_dict(world_model.encoder.state_dict())
            self.rssm.load_state_dict(world_model.rssm.state_dict())
            self.actor.load_state_dict(actor.state_dict())
            self.version += 1


class Policy:
    """Filters observations through the snapshot's RSSM and picks actions."""

    def __init__(self, snapshot: PolicySnapshot):
        self.snapshot = snapshot
        self.action_dim = snapshot.actor.action_dim
        self.discrete = snapshot.actor.discrete
        self.state: ModelState | None = None
        self.prev_action: torch.Tensor | None = None

    def reset(self) -> None:
        self.state = None
        self.prev_action = None

    @torch.no_grad()
    def __call__(self, obs: np.ndarray, sample: bool = True) -> np.ndarray:
        snap = self.snapshot
        frame = torch.as_tensor(dequantize(np.asarray(obs)[None]), device=snap.device)
        first = self.state is None
        with snap.lock:
            if first:
                prev = initial = snap.rssm.initial(1)
                prev_action = torch.zeros(1, self.action_dim, device=snap.device)
            else:
                prev = initial = self.state
                prev_action = self.prev_action
            x = snap.encoder(frame)
            is_first = torch.tensor([first], device=snap.device)
            self.state, _, _ = snap.rssm.obs_step(prev, prev_action, x, is_first, initial)
            action = snap.actor.act(self.state.s, sample=sample)
        if not self.discrete:
            action = bound_action(action)
        self.prev_action = action
        return action[0].cpu().numpy().astype(np.float32)


@dataclass
class EpisodeResult:
    env_id: int
    episode_return: float
    length: int
    timeout: bool


class CollectorWorker:
    """Owns one environment instance and its recurrent policy state."""

    def __init__(self, env: PixelEnv, env_id: int, policy: Policy, replay: ReplayBuffer | None):
        self.env = env
        self.env_id = env_id
        self.policy = policy
        self.replay = replay
        self.obs: np.ndarray | None = None
        self.episode_return = 0.0
        self.episode_length = 0

    def _append(self, transition: Transition) -> None:
        if self.replay is not None:
            self.replay.append(transition)

    def step(self, sample: bool = True) -> EpisodeResult | None:
        """One policy step; returns the finished episode, if any."""
        if self.obs is None:
            self.obs = self.env.reset()
            self.policy.reset()
            self.episode_return = 0.0
            self.episode_length = 0
            zero = np.zeros(self.env.action_space.dim, dtype=np.float32)
            self._append(Transition(self.obs, zero, 0.0, 1.0, True, self.env_id))
        action = self.policy(self.obs, sample)
        obs, reward, cont, info = self.env.step(action)
        self._append(Transition(obs, action, reward, cont, False, self.env_id))
        self.obs = obs
        self.episode_return += reward
        self.episode_length += 1
        if cont:
            return None
        self.obs = None
        result = EpisodeResult(self.env_id, self.episode_return, self.episode_length, bool(info["timeout"]))
        logger.debug("env %d finished an episode: return %.3f in %d steps", self.env_id, result.episode_return, result.length)
        return result


class CollectorManager:
    """Steps every worker once per ``collect`` call, in threads or in order."""

    def __init__(self, envs: list[PixelEnv], snapshot: PolicySnapshot, replay: ReplayBuffer, threaded: bool = False):
        self.snapshot = snapshot
        self.workers = [CollectorWorker(env, i, Policy(snapshot), replay) for i, env in enumerate(envs)]
        self.executor = ThreadPoolExecutor(max_workers=len(envs)) if threaded else None

    def _step(self, worker: CollectorWorker, sample: bool) -> EpisodeResult | None:
        try:
            return worker.step(sample)
        except Exception:
            logger.error("collector for env %d failed", worker.env_id, exc_info=True)
            raise

    def collect(self, sample: bool = True) -> list[EpisodeResult]:
        if self.executor is None:
            results = [self._step(worker, sample) for worker in self.workers]
        else:
            futures = [self.executor.submit(self._step, worker, sample) for worker in self.workers]
            # .result() re-raises a worker's exception here in the training thread
            results = [future.result() for future in futures]
        return [result for result in results if result is not None]

    def close(self) -> None:
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None
