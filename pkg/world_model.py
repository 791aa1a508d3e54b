"""Recurrent state-space world model trained without pixel reconstruction.

Representations are shaped only by reward, continue, value and action
prediction plus the balanced KL terms. The auxiliary decoder reads a detached
copy of the model state and is optimized on its own.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from config import TrainConfig
from distributions import (
    CategoricalLatentSpec,
    TwoHotCoder,
    action_dist,
    bernoulli_logprob,
)
from networks import MLP, ConvDecoder, ConvEncoder, GRUCell, ema_update, make_norm
from replay import TensorBatch

logger = logging.getLogger(__name__)


@dataclass
class ModelState:
    h: Tensor
    z: Tensor

    @property
    def s(self) -> Tensor:
        return torch.cat([self.h, self.z.flatten(-2)], -1)

    def detach(self) -> "ModelState":
        return ModelState(self.h.detach(), self.z.detach())

    def flatten(self) -> "ModelState":
        """Merge the two leading (batch, time) axes."""
        return ModelState(self.h.flatten(0, 1), self.z.flatten(0, 1))

    def where(self, mask: Tensor, other: "ModelState") -> "ModelState":
        """Take ``other`` where ``mask`` is set, ``self`` elsewhere."""
        return ModelState(
            torch.where(mask[..., None], other.h, self.h),
            torch.where(mask[..., None, None], other.z, self.z),
        )

    @staticmethod
    def stack(states: list["ModelState"], dim: int = 1) -> "ModelState":
        return ModelState(
            torch.stack([s.h for s in states], dim), torch.stack([s.z for s in states], dim)
        )


@dataclass
class Observation:
    states: ModelState
    prev_states: ModelState
    post_logits: Tensor
    prior_logits: Tensor
    features: Tensor


@dataclass
class WorldModelLossReport:
    reward: float
    continues: float
    value: float
    action: float
    recon: float
    l_dyn: float
    l_rep: float
    total: float
    kl_raw: float
    post_entropy: float
    prior_entropy: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class WorldModelOutput:
    loss: Tensor
    recon_loss: Tensor
    report: WorldModelLossReport
    observation: Observation


class RSSM(nn.Module):
    """Sequential network, representation network and dynamics predictor."""

    def __init__(
        self,
        action_dim: int,
        feature_dim: int,
        latent: CategoricalLatentSpec,
        recurrent: int = 512,
        hidden: int = 512,
        batchnorm: bool = True,
        bn_momentum: float = 0.9,
    ):
        super().__init__()
        self.action_dim = action_dim
        self.feature_dim = feature_dim
        self.latent = latent
        self.recurrent = recurrent
        self.batchnorm = batchnorm
        # deterministic relaxation used by gradient checks: z is the unimixed probabilities
        self.relaxed = False

        self.h0 = nn.Parameter(torch.zeros(recurrent))
        self.seq_in = nn.Sequential(
            nn.Linear(latent.flat_size + action_dim, hidden), nn.LayerNorm(hidden), nn.SiLU()
        )
        self.gru = GRUCell(hidden, recurrent)
        self.repr_hidden = nn.Sequential(
            nn.Linear(recurrent + feature_dim, hidden),
            make_norm("batch" if batchnorm else "layer", hidden, bn_momentum),
            nn.SiLU(),
        )
        self.repr_out = nn.Linear(hidden, latent.flat_size)
        self.dyn = nn.Sequential(
            nn.Linear(recurrent, hidden),
            nn.LayerNorm(hidden),
            nn.SiLU(),
            nn.Linear(hidden, latent.flat_size),
        )

    def _sample(self, logits: Tensor) -> Tensor:
        if self.relaxed:
            return self.latent.relaxed(logits)
        return self.latent.sample_st(logits)

    def initial(self, batch_size: int) -> ModelState:
        """Learned h0 and a prior sample z0; z0 passes no gradient into the dynamics predictor."""
        h = self.h0.unsqueeze(0).expand(batch_size, -1)
        _, z = self.dynamics_predict(h)
        return ModelState(h, z.detach())

    def sequential_step(self, h_prev: Tensor, z_prev: Tensor, a_prev: Tensor) -> Tensor:
        latent_shape = (self.latent.num_latents, self.latent.classes_per_latent)
        if h_prev.shape[-1] != self.recurrent:
            raise ValueError(f"expected h of size {self.recurrent}, got {h_prev.shape[-1]}")
        if tuple(z_prev.shape[-2:]) != latent_shape:
            raise ValueError(f"expected z of shape {latent_shape}, got {tuple(z_prev.shape[-2:])}")
        if a_prev.shape[-1] != self.action_dim:
            raise ValueError(f"expected action of size {self.action_dim}, got {a_prev.shape[-1]}")
        x = self.seq_in(torch.cat([z_prev.flatten(-2), a_prev], -1))
        return self.gru(x, h_prev)

    def represent(self, h: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        joint = torch.cat([h, x], -1)
        batch_shape = joint.shape[:-1]
        joint = joint.reshape(-1, joint.shape[-1])
        if self.batchnorm and self.training and joint.shape[0] < 2:
            raise ValueError("batch normalization statistics need more than one sample in training mode")
        logits = self.repr_out(self.repr_hidden(joint))
        logits = self.latent.reshape(logits.reshape(*batch_shape, -1))
        return logits, self._sample(logits)

    def prior_logits(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.recurrent:
            raise ValueError(f"expected h of size {self.recurrent}, got {h.shape[-1]}")
        return self.latent.reshape(self.dyn(h))

    def dynamics_predict(self, h: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.prior_logits(h)
        return logits, self._sample(logits)

    def obs_step(
        self, prev: ModelState, prev_action: Tensor, x: Tensor, is_first: Tensor, initial: ModelState
    ) -> tuple[ModelState, Tensor, Tensor]:
        """One filtering step; episode starts restart from ``initial`` with a zero action."""
        prev = prev.where(is_first, initial)
        prev_action = torch.where(is_first[..., None], torch.zeros_like(prev_action), prev_action)
        h = self.sequential_step(prev.h, prev.z, prev_action)
        post_logits, z = self.represent(h, x)
        return ModelState(h, z), post_logits, prev

    def imagine_step(self, state: ModelState, action: Tensor) -> ModelState:
        h = self.sequential_step(state.h, state.z, action)
        _, z = self.dynamics_predict(h)
        return ModelState(h, z)


def compute_value_targets(
    rewards: Tensor,
    continues: Tensor,
    values: Tensor,
    discount: float = 0.997,
    lam: float = 0.95,
    is_first: Tensor | None = None,
) -> Tensor:
    """Lambda-returns over the time axis (dim 1) of replayed sequences.

    ``R_T = v_T`` and ``R_t = r_{t+1} + discount * c_{t+1} * ((1 - lam) v_{t+1} + lam R_{t+1})``.
    When ``is_first`` marks an episode start at ``t+1`` the recursion is cut and
    ``R_t = c_t * v_t``, so no value leaks across the boundary.
    """
    if not rewards.shape == continues.shape == values.shape:
        raise ValueError(
            f"length mismatch: rewards {tuple(rewards.shape)}, continues {tuple(continues.shape)}, "
            f"values {tuple(values.shape)}"
        )
    steps = rewards.shape[1]
    returns = [values[:, -1]]
    for t in reversed(range(steps - 1)):
        ret = rewards[:, t + 1] + discount * continues[:, t + 1] * (
            (1.0 - lam) * values[:, t + 1] + lam * returns[-1]
        )
        if is_first is not None:
            ret = torch.where(is_first[:, t + 1], continues[:, t] * values[:, t], ret)
        returns.append(ret)
    return torch.stack(returns[::-1], 1)


def kl_balance_losses(
    post_logits: Tensor, prior_logits: Tensor, latent: CategoricalLatentSpec, free_nats: float = 1.0
) -> tuple[Tensor, Tensor, Tensor]:
    """Dynamics and representation losses with free bits, plus the raw KL."""
    kl_raw = latent.kl(post_logits, prior_logits)
    dyn = latent.kl(post_logits.detach(), prior_logits).clamp(min=free_nats)
    rep = latent.kl(post_logits, prior_logits.detach()).clamp(min=free_nats)
    return dyn.mean(), rep.mean(), kl_raw.mean()


def normalized_channel_std(features: Tensor) -> Tensor:
    """Per-channel std of L2-normalized feature vectors, averaged over channels."""
    flat = F.normalize(features.reshape(-1, features.shape[-1]), dim=-1)
    return flat.std(0, unbiased=False).mean()


class WorldModel(nn.Module):
    def __init__(self, config: TrainConfig, action_dim: int, discrete: bool):
        super().__init__()
        self.config = config
        self.action_dim = action_dim
        self.discrete = discrete
        self.latent = CategoricalLatentSpec(
            config.num_latents, config.classes_per_latent, config.unimix
        )
        self.coder = TwoHotCoder(config.twohot_bins, config.twohot_low, config.twohot_high)

        self.encoder = ConvEncoder(config.image_size, config.cnn_depth)
        self.rssm = RSSM(
            action_dim,
            self.encoder.out_features,
            self.latent,
            recurrent=config.recurrent_size,
            hidden=config.hidden_size,
            batchnorm=config.batchnorm,
            bn_momentum=config.batchnorm_momentum,
        )
        self.state_size = config.recurrent_size + self.latent.flat_size

        def head(in_features: int, out_features: int, zero: bool = False) -> MLP:
            return MLP(
                in_features, out_features, config.mlp_layers, config.hidden_size, zero_output=zero
            )

        self.reward_head = head(self.state_size, config.twohot_bins, zero=True)
        self.continue_head = head(self.state_size, 1)
        self.value_head: MLP | None = None
        self.slow_value: MLP | None = None
        if config.value_head:
            self.value_head = head(self.state_size, config.twohot_bins, zero=True)
            self.slow_value = copy.deepcopy(self.value_head)
            self.slow_value.requires_grad_(False)
        self.action_head: MLP | None = None
        if config.action_head:
            out = action_dim if discrete else 2 * action_dim
            self.action_head = head(self.encoder.out_features + self.state_size, out)
        self.decoder: ConvDecoder | None = None
        if config.decoder:
            self.decoder = ConvDecoder(self.state_size, config.image_size, config.cnn_depth)

    def model_parameters(self) -> list[nn.Parameter]:
        """Everything trained by the world-model optimizer (decoder and slow copy excluded)."""
        skip = {id(p) for m in (self.decoder, self.slow_value) if m is not None for p in m.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def decoder_parameters(self) -> list[nn.Parameter]:
        return list(self.decoder.parameters()) if self.decoder is not None else []

    def encode(self, obs: Tensor) -> Tensor:
        return self.encoder(obs)

    def reward(self, s: Tensor) -> Tensor:
        return self.coder.mean(self.reward_head(s))

    def continue_prob(self, s: Tensor) -> Tensor:
        return torch.sigmoid(self.continue_head(s).squeeze(-1))

    def observe_sequence(self, batch: TensorBatch) -> Observation:
        if batch.is_first is None:
            raise ValueError("observe_sequence needs episode-start flags")
        batch_size, steps = batch.actions.shape[:2]
        features = self.encode(batch.obs)
        initial = self.rssm.initial(batch_size)
        state = initial
        states, prevs, posts, priors = [], [], [], []
        for t in range(steps):
            first = batch.is_first[:, t] | (t == 0)
            state, post_logits, prev = self.rssm.obs_step(
                state, batch.actions[:, t], features[:, t], first, initial
            )
            states.append(state)
            prevs.append(prev)
            posts.append(post_logits)
            priors.append(self.rssm.prior_logits(state.h))
        return Observation(
            states=ModelState.stack(states),
            prev_states=ModelState.stack(prevs),
            post_logits=torch.stack(posts, 1),
            prior_logits=torch.stack(priors, 1),
            features=features,
        )

    @torch.no_grad()
    def slow_values(self, s: Tensor) -> Tensor:
        return self.coder.mean(self.slow_value(s))

    def decode_auxiliary(self, s: Tensor) -> Tensor:
        if self.decoder is None:
            raise ValueError("this world model was built without the auxiliary decoder")
        return self.decoder(s.detach())

    def loss(self, batch: TensorBatch) -> WorldModelOutput:
        cfg = self.config
        obs = self.observe_sequence(batch)
        s = obs.states.s
        zero = s.new_zeros(())

        step_mask = (~batch.is_first).to(s.dtype)
        reward_nll = self.coder.nll(self.reward_head(s), batch.rewards)
        reward_loss = (reward_nll * step_mask).sum() / step_mask.sum().clamp(min=1.0)

        cont_loss = -bernoulli_logprob(self.continue_head(s).squeeze(-1), batch.continues).mean()

        value_loss = zero
        if self.value_head is not None:
            targets = compute_value_targets(
                batch.rewards,
                batch.continues,
                self.slow_values(s),
                cfg.discount,
                cfg.return_lambda,
                batch.is_first,
            )
            value_loss = self.coder.nll(self.value_head(s), targets).mean()

        action_loss = zero
        if self.action_head is not None:
            inputs = torch.cat([obs.features, obs.prev_states.s], -1)
            dist = action_dist(self.action_head(inputs), self.discrete)
            action_nll = -dist.log_prob(batch.actions)
            # a_{t-1} at an episode start belongs to the previous episode; t=0 lacks s_{t-1}
            action_mask = step_mask.clone()
            action_mask[:, 0] = 0.0
            action_loss = (action_nll * action_mask).sum() / action_mask.sum().clamp(min=1.0)

        l_dyn, l_rep, kl_raw = kl_balance_losses(
            obs.post_logits, obs.prior_logits, self.latent, cfg.free_nats
        )
        pred_loss = cfg.reward_loss_scale * reward_loss + cont_loss + value_loss + action_loss
        total = cfg.beta_pred * pred_loss + cfg.beta_dyn * l_dyn + cfg.beta_rep * l_rep

        recon_loss = zero
        if self.decoder is not None:
            recon = self.decode_auxiliary(s)
            recon_loss = ((recon - batch.obs) ** 2).sum((-3, -2, -1)).mean()

        with torch.no_grad():
            report = WorldModelLossReport(
                reward=float(reward_loss),
                continues=float(cont_loss),
                value=float(value_loss),
                action=float(action_loss),
                recon=float(recon_loss),
                l_dyn=float(l_dyn),
                l_rep=float(l_rep),
                total=float(total),
                kl_raw=float(kl_raw),
                post_entropy=float(self.latent.entropy(obs.post_logits).mean()),
                prior_entropy=float(self.latent.entropy(obs.prior_logits).mean()),
            )
        return WorldModelOutput(total, recon_loss, report, obs)

    def forward(self, batch: TensorBatch) -> WorldModelOutput:
        return self.loss(batch)

    def update_slow_value(self, decay: float | None = None) -> None:
        if self.slow_value is None:
            return
        ema_update(self.slow_value, self.value_head, self.config.slow_value_decay if decay is None else decay)
