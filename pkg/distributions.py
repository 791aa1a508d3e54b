"""Numerical primitives shared by every network head: symlog, twohot coding,
straight-through categorical latents and the action/continue distributions."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.distributions import (
    Bernoulli,
    Distribution,
    Independent,
    Normal,
    OneHotCategorical,
    OneHotCategoricalStraightThrough,
    kl_divergence,
)

MIN_ACTION_STD = 0.1
PROBABILITY_SUM_TOLERANCE = 1e-6


def symlog(x: Tensor) -> Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(y: Tensor) -> Tensor:
    return torch.sign(y) * torch.expm1(torch.abs(y))


def _require_finite(name: str, *tensors: Tensor) -> None:
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise ValueError(f"{name}: non-finite input")


class TwoHotCoder(nn.Module):
    """Uniform bin grid in symlog space with twohot encode/decode rules.

    Targets outside ``[low, high]`` are clamped onto the grid, so early value
    estimates that overshoot the range still produce a valid distribution.
    """

    def __init__(self, bin_count: int = 255, low: float = -20.0, high: float = 20.0):
        super().__init__()
        if bin_count < 2:
            raise ValueError(f"bin_count must be at least 2, got {bin_count}")
        if not low < high:
            raise ValueError(f"expected low < high, got [{low}, {high}]")
        self.bin_count = bin_count
        self.low = float(low)
        self.high = float(high)
        self.register_buffer("bins", torch.linspace(low, high, bin_count), persistent=False)

    def encode(self, target: Tensor) -> Tensor:
        """Split each symlog-space target between its two bracketing bins."""
        bins = self.bins.to(target.dtype)
        target = target.clamp(self.low, self.high).unsqueeze(-1)
        below = (bins <= target).sum(-1, keepdim=True) - 1
        below = below.clamp(0, self.bin_count - 2)
        above = below + 1
        lo_value = bins[below]
        hi_value = bins[above]
        weight_above = ((target - lo_value) / (hi_value - lo_value)).clamp(0.0, 1.0)
        encoded = torch.zeros(
            *target.shape[:-1], self.bin_count, dtype=target.dtype, device=target.device
        )
        encoded.scatter_add_(-1, below, 1.0 - weight_above)
        encoded.scatter_add_(-1, above, weight_above)
        return encoded

    def decode(self, probs: Tensor) -> Tensor:
        """Expected bin position of a probability vector, in symlog units."""
        if probs.shape[-1] != self.bin_count:
            raise ValueError(f"expected {self.bin_count} bins, got {probs.shape[-1]}")
        if (probs < 0).any():
            raise ValueError("probabilities must be non-negative")
        wide = probs.double()
        if ((wide.sum(-1) - 1.0).abs() > PROBABILITY_SUM_TOLERANCE).any():
            raise ValueError("probabilities must sum to 1")
        return (wide * self.bins.double()).sum(-1).to(probs.dtype)

    def mean(self, logits: Tensor) -> Tensor:
        """Decoded prediction in raw units for a batch of head logits."""
        probs = torch.softmax(logits, -1)
        return symexp((probs * self.bins.to(logits.dtype)).sum(-1))

    def nll(self, logits: Tensor, target: Tensor) -> Tensor:
        """Cross entropy of ``softmax(logits)`` against ``twohot(symlog(target))``."""
        _require_finite("symlog_discrete_nll", logits, target)
        soft_target = self.encode(symlog(target.detach().to(logits.dtype)))
        return -(soft_target * F.log_softmax(logits, -1)).sum(-1)


def symlog_discrete_nll(coder: TwoHotCoder, logits: Tensor, target: Tensor) -> Tensor:
    return coder.nll(logits, target)


@dataclass(frozen=True)
class CategoricalLatentSpec:
    """Shape of the stochastic state and its uniform-mixture floor."""

    num_latents: int = 32
    classes_per_latent: int = 32
    unimix: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.unimix <= 1.0:
            raise ValueError(f"unimix must lie in [0, 1], got {self.unimix}")

    @property
    def flat_size(self) -> int:
        return self.num_latents * self.classes_per_latent

    def reshape(self, flat_logits: Tensor) -> Tensor:
        return flat_logits.unflatten(-1, (self.num_latents, self.classes_per_latent))

    def probs(self, logits: Tensor) -> Tensor:
        probs = torch.softmax(logits, -1)
        if self.unimix > 0:
            probs = (1.0 - self.unimix) * probs + self.unimix / self.classes_per_latent
        return probs

    def dist(self, logits: Tensor) -> Independent:
        # log of the mixed probabilities, so every method sees the same parameterization
        return Independent(OneHotCategoricalStraightThrough(logits=self.probs(logits).log()), 1)

    def sample_st(self, logits: Tensor) -> Tensor:
        """One-hot rows forward, gradient of the unimixed probabilities backward."""
        return self.dist(logits).rsample()

    def relaxed(self, logits: Tensor) -> Tensor:
        return self.probs(logits)

    def kl(self, p_logits: Tensor, q_logits: Tensor) -> Tensor:
        """KL(p || q) summed over latents."""
        _require_finite("kl_categorical", p_logits, q_logits)
        return kl_divergence(self.dist(p_logits), self.dist(q_logits))

    def entropy(self, logits: Tensor) -> Tensor:
        return self.dist(logits).entropy()


def categorical_sample_st(logits: Tensor, spec: CategoricalLatentSpec) -> Tensor:
    return spec.sample_st(logits)


def kl_categorical(p_logits: Tensor, q_logits: Tensor, spec: CategoricalLatentSpec) -> Tensor:
    return spec.kl(p_logits, q_logits)


def bernoulli_logprob(logit: Tensor, flag: Tensor) -> Tensor:
    if ((flag != 0) & (flag != 1)).any():
        raise ValueError("bernoulli flags must be 0 or 1")
    return Bernoulli(logits=logit).log_prob(flag.to(logit.dtype))


def diag_normal_logprob(mean: Tensor, std: Tensor, action: Tensor) -> Tensor:
    if (std <= 0).any():
        raise ValueError("normal std must be positive")
    return Independent(Normal(mean, std), 1).log_prob(action)


def onehot_logprob(logits: Tensor, action: Tensor) -> Tensor:
    return OneHotCategorical(logits=logits).log_prob(action)


def entropy(dist: Distribution) -> Tensor:
    return dist.entropy()


def action_dist(raw: Tensor, discrete: bool, min_std: float = MIN_ACTION_STD) -> Distribution:
    """Policy-style output distribution for the actor and the action predictor.

    Discrete heads give a straight-through one-hot categorical over ``raw``.
    Continuous heads split ``raw`` into a tanh-squashed mean inside the unit
    action box and a softplus std floored at ``min_std``.
    """
    if discrete:
        return OneHotCategoricalStraightThrough(logits=raw)
    mean, std = raw.chunk(2, -1)
    return Independent(Normal(torch.tanh(mean), F.softplus(std) + min_std), 1)


def bound_action(action: Tensor, low: float = -1.0, high: float = 1.0) -> Tensor:
    """Clip sampled continuous actions into the box the environments execute.

    Imagined and collected actions share this clip. Outside the box the
    pathwise gradient is zero.
    """
    return action.clamp(low, high)
