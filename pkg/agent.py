"""Training orchestration: collection, updates at a fixed replay ratio,
checkpoints, evaluation, dream rollouts and collapse diagnostics."""
from __future__ import annotations

import logging
import math
import os
import statistics
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict
from tabulate import tabulate
from torch import Tensor, nn
from tqdm import tqdm

from behavior import Behavior
from collector import CollectorManager, CollectorWorker, Policy, PolicySnapshot
from config import TrainConfig, build_config, dump_config, parse_pairs
from envs import DistractorConfig, PixelEnv, make_env
from networks import count_parameters
from replay import ReplayBuffer, TensorBatch, dequantize
from storage import (
    CheckpointError,
    CheckpointHeader,
    RunStorage,
    load_checkpoint,
    timestamp,
)
from world_model import ModelState, WorldModel, normalized_channel_std

logger = logging.getLogger(__name__)

__all__ = [
    "Agent",
    "CheckpointError",
    "CollapseReport",
    "DreamResult",
    "EvalResult",
    "MetricsRecord",
    "NonFiniteLossError",
    "RatioScheduler",
    "collapse_report",
    "diagnose_collapse",
    "dream",
    "evaluate",
    "train",
]

COLLAPSE_THRESHOLD = 1e-3
MIN_DIAGNOSE_SAMPLES = 64
EVAL_SEED_OFFSET = 10_000
DIAGNOSE_SEED_OFFSET = 20_000
CONTEXT_BORDER = (40, 200, 70)
IMAGINED_BORDER = (220, 50, 40)


class NonFiniteLossError(RuntimeError):
    """A loss went NaN or infinite; a post-mortem checkpoint was written first."""


class MetricsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["train", "episode", "eval", "postmortem"]
    env_steps: int
    grad_steps: int
    # world model
    reward: float | None = None
    continues: float | None = None
    value: float | None = None
    action: float | None = None
    recon: float | None = None
    l_dyn: float | None = None
    l_rep: float | None = None
    total: float | None = None
    kl_raw: float | None = None
    post_entropy: float | None = None
    prior_entropy: float | None = None
    # actor critic
    actor_loss: float | None = None
    critic_loss: float | None = None
    policy_entropy: float | None = None
    range_ema: float | None = None
    imagined_return: float | None = None
    # collapse
    x_std: float | None = None
    h_std: float | None = None
    # episodes
    episode_return: float | None = None
    episode_length: int | None = None
    eval_return: float | None = None
    eval_median: float | None = None


class RatioScheduler:
    """Turns policy steps into gradient steps at ``train_ratio / (B * T)``.

    A fractional accumulator carries the remainder, so any window of N policy
    steps yields between floor(N r) and ceil(N r) updates.
    """

    def __init__(self, train_ratio: float, batch_size: int, batch_length: int):
        self.rate = Fraction(train_ratio).limit_denominator(1_000_000) / (batch_size * batch_length)
        self.credit = Fraction(0)

    def __call__(self, policy_steps: int) -> int:
        self.credit += self.rate * policy_steps
        steps = math.floor(self.credit)
        self.credit -= steps
        return steps


@dataclass
class EvalResult:
    mean: float
    median: float
    returns: list[float]

    def table(self) -> str:
        rows = [[i, r] for i, r in enumerate(self.returns)]
        rows += [["mean", self.mean], ["median", self.median]]
        return tabulate(rows, headers=["episode", "return"], floatfmt=".3f")


@dataclass
class DreamResult:
    frames: np.ndarray  # model frames, (context + horizon, 3, S, S) in [-0.5, 0.5]
    truth: np.ndarray
    context: int
    image: Image.Image
    latents: dict[str, np.ndarray]
    paths: list[Path] = field(default_factory=list)


@dataclass
class CollapseReport:
    samples: int
    x_std: float
    h_std: float | None
    x_reference: float
    threshold: float
    x_collapsed: bool
    h_collapsed: bool | None
    parameters: dict[str, int] = field(default_factory=dict)
    recon_sprite_mse: float | None = None
    recon_background_mse: float | None = None

    def table(self) -> str:
        rows = [
            ["samples", self.samples],
            ["x_t channel std", self.x_std],
            ["x_t iid reference (1/sqrt(D))", self.x_reference],
            ["x_t collapsed", self.x_collapsed],
        ]
        if self.h_std is not None:
            rows += [["h_t channel std", self.h_std], ["h_t collapsed", self.h_collapsed]]
        if self.recon_sprite_mse is not None:
            rows += [
                ["recon mse (sprites)", self.recon_sprite_mse],
                ["recon mse (background)", self.recon_background_mse],
            ]
        rows += [[f"parameters ({name})", count] for name, count in self.parameters.items()]
        return tabulate(rows, headers=["metric", "value"], floatfmt=".6g")


def collapse_report(
    x: Tensor, h: Tensor | None = None, threshold: float = COLLAPSE_THRESHOLD
) -> CollapseReport:
    """Averaged per-channel std of L2-normalized features, with a collapse flag."""
    if x.shape[0] < MIN_DIAGNOSE_SAMPLES:
        raise ValueError(
            f"collapse diagnostics need at least {MIN_DIAGNOSE_SAMPLES} observations, got {x.shape[0]}"
        )
    x_std = float(normalized_channel_std(x))
    h_std = float(normalized_channel_std(h)) if h is not None else None
    return CollapseReport(
        samples=int(x.shape[0]),
        x_std=x_std,
        h_std=h_std,
        x_reference=1.0 / math.sqrt(x.shape[-1]),
        threshold=threshold,
        x_collapsed=x_std < threshold,
        h_collapsed=None if h_std is None else h_std < threshold,
    )


def dream_grid(truth: np.ndarray, frames: np.ndarray, context: int, border: int = 1) -> Image.Image:
    """Two rows: environment frames on top, model frames below with coloured borders."""
    count, _, size, _ = frames.shape
    tile = size + 2 * border
    canvas = np.zeros((2 * tile, count * tile, 3), dtype=np.uint8)

    def pixels(frame: np.ndarray) -> np.ndarray:
        return np.clip(np.round((frame + 0.5) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)

    for i in range(count):
        left = i * tile
        if i < len(truth):
            canvas[border : border + size, left + border : left + border + size] = pixels(truth[i])
        color = CONTEXT_BORDER if i < context else IMAGINED_BORDER
        canvas[tile : 2 * tile, left : left + tile] = color
        canvas[tile + border : tile + border + size, left + border : left + border + size] = pixels(frames[i])
    return Image.fromarray(canvas)


class Agent:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.device = torch.device(config.device)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)

        template = self.create_env()
        self.action_dim = template.action_space.dim
        self.discrete = template.action_space.discrete
        self.obs_shape = template.spec.obs_shape

        self.world_model = WorldModel(config, self.action_dim, self.discrete).to(self.device)
        self.behavior = Behavior(config, self.world_model.state_size, self.action_dim, self.discrete).to(self.device)
        adam = dict(eps=config.model_eps, betas=(config.adam_beta1, config.adam_beta2))
        self.model_opt = torch.optim.Adam(self.world_model.model_parameters(), lr=config.model_lr, **adam)
        self.decoder_opt = None
        if self.world_model.decoder is not None:
            self.decoder_opt = torch.optim.Adam(self.world_model.decoder_parameters(), lr=config.model_lr, **adam)
        self.replay = ReplayBuffer(config.replay_capacity, self.obs_shape, self.action_dim)
        self.env_steps = 0
        self.grad_steps = 0
        self.storage: RunStorage | None = None

    def create_env(self, index: int = 0, pool: Literal["train", "eval"] = "train", seed: int | None = None) -> PixelEnv:
        cfg = self.config
        distractors = DistractorConfig(enabled=cfg.distractors, pool=pool, seed=cfg.distractor_seed)
        return make_env(
            cfg.task,
            seed=cfg.seed * 1000 + index if seed is None else seed,
            image_size=cfg.image_size,
            distractors=distractors,
            action_repeat=cfg.action_repeat,
        )

    def parameter_counts(self) -> dict[str, int]:
        return {
            "world model": sum(p.numel() for p in self.world_model.model_parameters()),
            "actor": count_parameters(self.behavior.actor),
            "critic": count_parameters(self.behavior.critic),
        }

    def sample_batch(self) -> TensorBatch:
        cfg = self.config
        return self.replay.sample(cfg.batch_size, cfg.batch_length, self.rng).to_torch(self.device)

    def _abort(self, report: dict[str, float], where: str) -> None:
        if self.storage is not None:
            self.save_checkpoint(self.storage, "postmortem")
            self.storage.write_metrics(
                MetricsRecord(kind="postmortem", env_steps=self.env_steps, grad_steps=self.grad_steps, **report)
            )
        raise NonFiniteLossError(f"non-finite {where} at gradient step {self.grad_steps}: {report}")

    def train_step(self, batch: TensorBatch) -> dict[str, float]:
        """World model, slow value, imagination, critic, critic EMA, actor and normalizer, in that order."""
        cfg = self.config
        wm = self.world_model
        wm.train()
        out = wm.loss(batch)
        if not (torch.isfinite(out.loss) and torch.isfinite(out.recon_loss)):
            self._abort(out.report.as_dict(), "world model loss")

        self.model_opt.zero_grad(set_to_none=True)
        out.loss.backward()
        nn.utils.clip_grad_norm_(wm.model_parameters(), cfg.model_clip)
        self.model_opt.step()
        if self.decoder_opt is not None:
            self.decoder_opt.zero_grad(set_to_none=True)
            out.recon_loss.backward()
            nn.utils.clip_grad_norm_(wm.decoder_parameters(), cfg.model_clip)
            self.decoder_opt.step()
        wm.update_slow_value()

        states = out.observation.states
        # sequence-final states have no continuation to imagine from
        start = ModelState(states.h[:, :-1], states.z[:, :-1]).flatten().detach()
        a_loss, c_loss, ent, traj = self.behavior.losses(wm, start)
        if not (torch.isfinite(a_loss) and torch.isfinite(c_loss)):
            self._abort({"actor_loss": float(a_loss), "critic_loss": float(c_loss)}, "actor-critic loss")
        behavior_report = self.behavior.optimize(a_loss, c_loss, ent, traj)
        self.grad_steps += 1

        with torch.no_grad():
            metrics = out.report.as_dict()
            metrics.update(asdict(behavior_report))
            metrics["x_std"] = float(normalized_channel_std(out.observation.features))
            metrics["h_std"] = float(normalized_channel_std(states.h))
        return metrics

    def train(self, storage: RunStorage, progress: bool = True) -> EvalResult | None:
        """Collect, update at the configured ratio, evaluate and checkpoint until ``steps`` env steps."""
        cfg = self.config
        self.storage = storage
        storage.write_config(cfg)
        envs = [self.create_env(i) for i in range(cfg.env_instances)]
        snapshot = PolicySnapshot(self.world_model, self.behavior.actor, self.device)
        collectors = CollectorManager(envs, snapshot, self.replay, cfg.threaded_collection)
        scheduler = RatioScheduler(cfg.train_ratio, cfg.batch_size, cfg.batch_length)
        next_eval = (self.env_steps // cfg.eval_every + 1) * cfg.eval_every
        next_checkpoint = (self.env_steps // cfg.checkpoint_every + 1) * cfg.checkpoint_every
        last_eval: EvalResult | None = None
        logger.info("Training %s for %d env steps in %s", cfg.task, cfg.steps, storage.run_dir)

        bar = tqdm(total=cfg.steps, initial=self.env_steps, unit="step", desc="train", disable=not progress)
        try:
            while self.env_steps < cfg.steps:
                episodes = collectors.collect(sample=True)
                policy_steps = len(collectors.workers)
                self.env_steps += policy_steps
                bar.update(policy_steps)
                for episode in episodes:
                    storage.write_metrics(
                        MetricsRecord(
                            kind="episode",
                            env_steps=self.env_steps,
                            grad_steps=self.grad_steps,
                            episode_return=episode.episode_return,
                            episode_length=episode.length,
                        )
                    )

                if self.replay.ready(cfg.min_steps) and self.replay.can_sample(cfg.batch_length):
                    updates = scheduler(policy_steps)
                    for _ in range(updates):
                        metrics = self.train_step(self.sample_batch())
                        storage.write_metrics(
                            MetricsRecord(kind="train", env_steps=self.env_steps, grad_steps=self.grad_steps, **metrics)
                        )
                        if self.grad_steps % cfg.log_every == 0:
                            logger.info(
                                "step %d/%d: model %.3f (dyn %.3f rep %.3f) actor %.3f critic %.3f x_std %.4f",
                                self.grad_steps,
                                self.env_steps,
                                metrics["total"],
                                metrics["l_dyn"],
                                metrics["l_rep"],
                                metrics["actor_loss"],
                                metrics["critic_loss"],
                                metrics["x_std"],
                            )
                    if updates:
                        snapshot.publish(self.world_model, self.behavior.actor)

                if self.env_steps >= next_eval:
                    last_eval = self.evaluate(cfg.eval_episodes, progress=False)
                    storage.write_metrics(
                        MetricsRecord(
                            kind="eval",
                            env_steps=self.env_steps,
                            grad_steps=self.grad_steps,
                            eval_return=last_eval.mean,
                            eval_median=last_eval.median,
                        )
                    )
                    logger.info("eval at %d env steps: mean %.3f median %.3f", self.env_steps, last_eval.mean, last_eval.median)
                    next_eval = (self.env_steps // cfg.eval_every + 1) * cfg.eval_every
                if self.env_steps >= next_checkpoint:
                    self.save_checkpoint(storage, "latest")
                    next_checkpoint = (self.env_steps // cfg.checkpoint_every + 1) * cfg.checkpoint_every
        finally:
            bar.close()
            collectors.close()
        self.save_checkpoint(storage, "latest")
        logger.info("Finished: %d env steps, %d gradient steps", self.env_steps, self.grad_steps)
        return last_eval

    def evaluate(self, episodes: int | None = None, env: PixelEnv | None = None, progress: bool = True) -> EvalResult:
        """Mode actions over fresh episodes of a deterministic eval environment."""
        cfg = self.config
        episodes = cfg.eval_episodes if episodes is None else episodes
        if episodes < 1:
            raise ValueError(f"episodes must be at least 1, got {episodes}")
        env = env or self.create_env(pool="eval", seed=cfg.seed + EVAL_SEED_OFFSET)
        space = env.action_space
        if space.dim != self.action_dim or space.discrete != self.discrete:
            raise CheckpointError(
                f"environment {env.spec.name} has action space {space}, "
                f"the agent was built for dim {self.action_dim} (discrete={self.discrete})"
            )
        snapshot = PolicySnapshot(self.world_model, self.behavior.actor, self.device)
        worker = CollectorWorker(env, 0, Policy(snapshot), replay=None)
        returns = []
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            for _ in tqdm(range(episodes), desc="eval", disable=not progress):
                result = None
                while result is None:
                    result = worker.step(sample=False)
                returns.append(result.episode_return)
        return EvalResult(statistics.fmean(returns), statistics.median(returns), returns)

    def dream(self, context: int = 5, horizon: int = 59, storage: RunStorage | None = None) -> DreamResult:
        """Filter ``context`` real frames, imagine ``horizon`` steps under the actor, decode both."""
        if context < 1:
            raise ValueError(f"context must be at least 1 frame, got {context}")
        if horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {horizon}")
        wm = self.world_model
        if wm.decoder is None:
            raise ValueError("dreaming needs the auxiliary decoder (decoder = true)")
        cfg = self.config
        env = self.create_env(pool="eval", seed=cfg.seed + EVAL_SEED_OFFSET)
        policy = Policy(PolicySnapshot(wm, self.behavior.actor, self.device))
        was_training = wm.training
        wm.eval()
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(cfg.seed)
            obs = env.reset()
            frames = [obs]
            actions = [np.zeros(self.action_dim, dtype=np.float32)]
            while len(frames) < context + horizon:
                action = policy(obs, sample=False)
                obs, _, cont, _ = env.step(action)
                frames.append(obs)
                actions.append(action)
                if not cont:
                    break
            if len(frames) < context:
                raise ValueError(f"episode ended after {len(frames)} frames, fewer than the {context} context frames")

            batch = TensorBatch(
                obs=torch.as_tensor(dequantize(np.stack(frames[:context])[None]), device=self.device),
                actions=torch.as_tensor(np.stack(actions[:context])[None], device=self.device),
                rewards=torch.zeros(1, context, device=self.device),
                continues=torch.ones(1, context, device=self.device),
                is_first=torch.arange(context, device=self.device)[None] == 0,
            )
            observed = wm.observe_sequence(batch).states
            state = ModelState(observed.h[:, -1], observed.z[:, -1])
            imagined, imagined_actions = [], []
            for _ in range(horizon):
                action = self.behavior.actor.act(state.s, sample=False)
                state = wm.rssm.imagine_step(state, action)
                imagined.append(state)
                imagined_actions.append(action)
            rollout = ModelState.stack(imagined)
            states = ModelState(torch.cat([observed.h, rollout.h], 1), torch.cat([observed.z, rollout.z], 1))
            decoded = wm.decode_auxiliary(states.s).clamp(-0.5, 0.5)[0].cpu().numpy()
        wm.train(was_training)

        truth = dequantize(np.stack(frames))
        image = dream_grid(truth, decoded, context)
        latents = {
            "h": states.h[0].cpu().numpy(),
            "z": states.z[0].argmax(-1).cpu().numpy(),
            "imagined_actions": torch.cat(imagined_actions).cpu().numpy(),
            "context": np.array(context),
        }
        result = DreamResult(decoded, truth, context, image, latents)
        if storage is not None:
            stamp = timestamp()
            result.paths.append(storage.save_image(image, f"dream_{stamp}"))
            result.paths.append(storage.save_arrays(f"dream_{stamp}_latents", **latents))
        return result

    def diagnose(self, observations: int = 256, threshold: float = COLLAPSE_THRESHOLD) -> CollapseReport:
        """Collapse statistics on fresh policy rollouts, plus the reconstruction split."""
        if observations < MIN_DIAGNOSE_SAMPLES:
            raise ValueError(
                f"collapse diagnostics need at least {MIN_DIAGNOSE_SAMPLES} observations, got {observations}"
            )
        cfg = self.config
        wm = self.world_model
        env = self.create_env(seed=cfg.seed + DIAGNOSE_SEED_OFFSET)
        policy = Policy(PolicySnapshot(wm, self.behavior.actor, self.device))
        frames, masks, model_states = [], [], []
        was_training = wm.training
        wm.eval()
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(cfg.seed)
            obs = None
            while len(frames) < observations:
                if obs is None:
                    obs = env.reset()
                    policy.reset()
                frames.append(obs)
                masks.append(env.sprite_mask)
                action = policy(obs, sample=False)
                model_states.append(policy.state)
                obs, _, cont, _ = env.step(action)
                if not cont:
                    obs = None

            pixels = torch.as_tensor(dequantize(np.stack(frames)), device=self.device)
            x = wm.encode(pixels)
            h = torch.cat([s.h for s in model_states])
            report = collapse_report(x, h, threshold)
            if wm.decoder is not None:
                s = torch.cat([state.s for state in model_states])
                error = ((wm.decode_auxiliary(s) - pixels) ** 2).mean(1).cpu().numpy()
                sprite = np.stack(masks)
                if sprite.any():
                    report.recon_sprite_mse = float(error[sprite].mean())
                if (~sprite).any():
                    report.recon_background_mse = float(error[~sprite].mean())
        wm.train(was_training)
        report.parameters = self.parameter_counts()
        return report

    def save_checkpoint(self, storage: RunStorage, name: str = "latest") -> Path:
        cfg = self.config
        header = CheckpointHeader(
            created=timestamp(),
            task=cfg.task,
            action_dim=self.action_dim,
            discrete=self.discrete,
            env_steps=self.env_steps,
            grad_steps=self.grad_steps,
            config=dump_config(cfg),
        )
        state = {
            "world_model": self.world_model.state_dict(),
            "behavior": self.behavior.state_dict_all(),
            "model_opt": self.model_opt.state_dict(),
            "decoder_opt": self.decoder_opt.state_dict() if self.decoder_opt is not None else None,
            "rng": {"numpy": self.rng.bit_generator.state, "torch": torch.get_rng_state()},
        }
        return storage.save_checkpoint(name, header, state)

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: Iterable[str] = ()) -> "Agent":
        header, state = load_checkpoint(path)
        values = parse_pairs(header.config.splitlines(), f"{path} (embedded config)")
        values.update(parse_pairs(overrides))
        agent = cls(build_config(values))
        if agent.action_dim != header.action_dim or agent.discrete != header.discrete:
            raise CheckpointError(
                f"{path}: saved for action dim {header.action_dim} (discrete={header.discrete}), "
                f"environment {agent.config.task} has dim {agent.action_dim} (discrete={agent.discrete})"
            )
        try:
            agent.world_model.load_state_dict(state["world_model"])
            agent.behavior.load_state_dict_all(state["behavior"])
            agent.model_opt.load_state_dict(state["model_opt"])
            if agent.decoder_opt is not None:
                agent.decoder_opt.load_state_dict(state["decoder_opt"])
            agent.rng.bit_generator.state = state["rng"]["numpy"]
            torch.set_rng_state(state["rng"]["torch"])
        except (KeyError, RuntimeError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: incomplete or mismatched checkpoint: {exc}") from exc
        agent.env_steps = header.env_steps
        agent.grad_steps = header.grad_steps
        logger.info("Loaded %s at %d env steps", path, agent.env_steps)
        return agent


def checkpoint_path(run_dir: str | os.PathLike, name: str = "latest") -> Path:
    return Path(run_dir) / "checkpoints" / f"{name}.pt"


def train(config: TrainConfig, run_dir: str | os.PathLike, progress: bool = True) -> Agent:
    agent = Agent(config)
    agent.train(RunStorage(run_dir), progress=progress)
    return agent


def evaluate(checkpoint: str | os.PathLike, episodes: int = 10, progress: bool = True) -> EvalResult:
    return Agent.load(checkpoint).evaluate(episodes, progress=progress)


def dream(checkpoint: str | os.PathLike, context: int = 5, horizon: int = 59, run_dir: str | os.PathLike | None = None) -> DreamResult:
    agent = Agent.load(checkpoint)
    storage = RunStorage(run_dir if run_dir is not None else Path(checkpoint).resolve().parent.parent)
    return agent.dream(context, horizon, storage)


def diagnose_collapse(checkpoint: str | os.PathLike, observations: int = 256) -> CollapseReport:
    return Agent.load(checkpoint).diagnose(observations)
