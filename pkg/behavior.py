"""Actor-critic learning inside imagined rollouts of the world model."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn
from torch.distributions import Distribution

from config import TrainConfig
from distributions import TwoHotCoder, action_dist, bound_action
from networks import MLP, ema_update, frozen
from world_model import ModelState, WorldModel

logger = logging.getLogger(__name__)


class Actor(nn.Module):
    def __init__(self, state_size: int, action_dim: int, discrete: bool, layers: int = 3, hidden: int = 512):
        super().__init__()
        self.action_dim = action_dim
        self.discrete = discrete
        self.net = MLP(state_size, action_dim if discrete else 2 * action_dim, layers, hidden)

    def forward(self, s: Tensor) -> Distribution:
        return action_dist(self.net(s), self.discrete)

    def act(self, s: Tensor, sample: bool = True) -> Tensor:
        dist = self(s)
        if not sample:
            return dist.mode
        return dist.sample()


class Critic(nn.Module):
    def __init__(self, state_size: int, coder: TwoHotCoder, layers: int = 3, hidden: int = 512):
        super().__init__()
        self.coder = coder
        self.net = MLP(state_size, coder.bin_count, layers, hidden, zero_output=True)

    def forward(self, s: Tensor) -> Tensor:
        return self.net(s)

    def value(self, s: Tensor) -> Tensor:
        return self.coder.mean(self(s))


@dataclass
class ImaginedTrajectory:
    """Batch-major rollout: ``states`` and ``values`` have H+1 steps, the rest H.

    ``rewards[:, t]`` and ``continues[:, t]`` are predicted at ``states[t + 1]``.
    """

    states: ModelState
    actions: Tensor
    rewards: Tensor
    continues: Tensor
    values: Tensor
    returns: Tensor | None = None

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


class ReturnNormalizer:
    """EMA of the spread between two return percentiles."""

    def __init__(self, decay: float = 0.99, low: float = 5.0, high: float = 95.0):
        self.decay = decay
        self.low = low
        self.high = high
        self.range_ema = 0.0

    @property
    def divisor(self) -> float:
        return max(1.0, self.range_ema)

    def update(self, returns: Tensor) -> float:
        values = returns.detach().flatten().double().cpu().numpy()
        if values.size == 0:
            raise ValueError("cannot update the return normalizer from an empty batch")
        # midpoint plotting positions, linear in between
        lo, hi = np.percentile(values, [self.low, self.high], method="hazen")
        self.range_ema = self.decay * self.range_ema + (1.0 - self.decay) * float(hi - lo)
        return self.range_ema

    def state_dict(self) -> dict:
        return {"range_ema": self.range_ema}

    def load_state_dict(self, state: dict) -> None:
        self.range_ema = float(state["range_ema"])


def update_return_normalizer(normalizer: ReturnNormalizer, returns: Tensor) -> ReturnNormalizer:
    normalizer.update(returns)
    return normalizer


def imagine(
    start: ModelState, horizon: int, actor: Actor, world_model: WorldModel, critic: Critic
) -> ImaginedTrajectory:
    """Roll the dynamics forward under the actor from detached start states."""
    if horizon < 1:
        raise ValueError(f"imagination horizon must be at least 1, got {horizon}")
    state = start.detach()
    states, actions = [state], []
    with frozen(world_model, critic):
        for _ in range(horizon):
            dist = actor(state.s)
            # discrete actions take no pathwise gradient; continuous ones keep it inside the box
            action = dist.sample() if actor.discrete else bound_action(dist.rsample())
            state = world_model.rssm.imagine_step(state, action)
            states.append(state)
            actions.append(action)
        trajectory = ModelState.stack(states)
        s = trajectory.s
        rewards = world_model.reward(s[:, 1:])
        continues = world_model.continue_prob(s[:, 1:])
        values = critic.value(s)
    return ImaginedTrajectory(trajectory, torch.stack(actions, 1), rewards, continues, values)


def lambda_returns(
    rewards: Tensor, continues: Tensor, values: Tensor, discount: float = 0.997, lam: float = 0.95
) -> Tensor:
    """``R_t = r_{t+1} + discount * c_{t+1} * ((1 - lam) v_{t+1} + lam R_{t+1})``, bootstrapped from ``v`` at the end.

    ``rewards`` and ``continues`` hold H steps, ``values`` H+1.
    """
    horizon = rewards.shape[1]
    if continues.shape[1] != horizon or values.shape[1] != horizon + 1:
        raise ValueError(
            f"expected {horizon} continues and {horizon + 1} values, "
            f"got {continues.shape[1]} and {values.shape[1]}"
        )
    returns = [values[:, -1]]
    for t in reversed(range(horizon)):
        returns.append(
            rewards[:, t] + discount * continues[:, t] * ((1.0 - lam) * values[:, t + 1] + lam * returns[-1])
        )
    return torch.stack(returns[:0:-1], 1)


def imagined_lambda_returns(traj: ImaginedTrajectory, discount: float = 0.997, lam: float = 0.95) -> Tensor:
    return lambda_returns(traj.rewards, traj.continues, traj.values, discount, lam)


def critic_loss(traj: ImaginedTrajectory, critic: Critic, slow_critic: Critic, regularizer: float = 1.0) -> Tensor:
    if traj.returns is None:
        raise ValueError("trajectory has no returns; run imagined_lambda_returns first")
    states = traj.states.s[:, :-1].detach()
    logits = critic(states)
    loss = critic.coder.nll(logits, traj.returns.detach())
    if regularizer:
        with torch.no_grad():
            slow = slow_critic.value(states)
        loss = loss + regularizer * critic.coder.nll(logits, slow)
    return loss.sum(1).mean()


def actor_loss(
    traj: ImaginedTrajectory,
    normalizer: ReturnNormalizer,
    actor: Actor,
    rho: int,
    entropy_scale: float = 3e-4,
    detach_baseline: bool = False,
) -> tuple[Tensor, Tensor]:
    """Per-step mean of the policy objective; returns ``(loss, policy entropy)``."""
    if rho not in (0, 1):
        raise ValueError(f"rho must be 0 (dynamics backprop) or 1 (reinforce), got {rho}")
    if traj.returns is None:
        raise ValueError("trajectory has no returns; run imagined_lambda_returns first")
    dist = actor(traj.states.s[:, :-1].detach())
    ent = dist.entropy()
    baseline = traj.values[:, :-1]
    if rho == 1 or detach_baseline:
        baseline = baseline.detach()
    advantage = (traj.returns - baseline) / normalizer.divisor
    if rho == 1:
        objective = dist.log_prob(traj.actions.detach()) * advantage.detach()
    else:
        objective = advantage
    loss = -(objective + entropy_scale * ent)
    return loss.mean(), ent.mean()


@dataclass
class BehaviorReport:
    actor_loss: float
    critic_loss: float
    policy_entropy: float
    range_ema: float
    imagined_return: float


class Behavior(nn.Module):
    """Actor, critic, slow critic and the return normalizer with their optimizers."""

    def __init__(self, config: TrainConfig, state_size: int, action_dim: int, discrete: bool):
        super().__init__()
        self.config = config
        self.rho = 1 if discrete else 0
        coder = TwoHotCoder(config.twohot_bins, config.twohot_low, config.twohot_high)
        self.actor = Actor(state_size, action_dim, discrete, config.mlp_layers, config.hidden_size)
        self.critic = Critic(state_size, coder, config.mlp_layers, config.hidden_size)
        self.slow_critic = copy.deepcopy(self.critic)
        self.slow_critic.requires_grad_(False)
        self.normalizer = ReturnNormalizer(config.return_norm_decay, config.return_norm_low, config.return_norm_high)
        adam = dict(eps=config.ac_eps, betas=(config.adam_beta1, config.adam_beta2))
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.actor_lr, **adam)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=config.critic_lr, **adam)

    def losses(self, world_model: WorldModel, start: ModelState) -> tuple[Tensor, Tensor, Tensor, ImaginedTrajectory]:
        cfg = self.config
        traj = imagine(start, cfg.horizon, self.actor, world_model, self.critic)
        traj.returns = imagined_lambda_returns(traj, cfg.discount, cfg.return_lambda)
        c_loss = critic_loss(traj, self.critic, self.slow_critic, cfg.critic_ema_reg)
        a_loss, ent = actor_loss(
            traj, self.normalizer, self.actor, self.rho, cfg.actor_entropy, cfg.detach_baseline_dynamics
        )
        return a_loss, c_loss, ent, traj

    def optimize(self, a_loss: Tensor, c_loss: Tensor, ent: Tensor, traj: ImaginedTrajectory) -> BehaviorReport:
        """Step both optimizers, then the critic EMA, then the normalizer."""
        cfg = self.config
        self.actor_opt.zero_grad(set_to_none=True)
        self.critic_opt.zero_grad(set_to_none=True)
        (a_loss + c_loss).backward()
        nn.utils.clip_grad_norm_(self.actor.parameters(), cfg.ac_clip)
        nn.utils.clip_grad_norm_(self.critic.parameters(), cfg.ac_clip)
        self.actor_opt.step()
        self.critic_opt.step()
        ema_update(self.slow_critic, self.critic, cfg.critic_ema_decay)
        self.normalizer.update(traj.returns)
        return BehaviorReport(
            actor_loss=float(a_loss.detach()),
            critic_loss=float(c_loss.detach()),
            policy_entropy=float(ent.detach()),
            range_ema=self.normalizer.range_ema,
            imagined_return=float(traj.returns.detach().mean()),
        )

    def state_dict_all(self) -> dict:
        return {
            "modules": self.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "normalizer": self.normalizer.state_dict(),
        }

    def load_state_dict_all(self, state: dict) -> None:
        self.load_state_dict(state["modules"])
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.normalizer.load_state_dict(state["normalizer"])
