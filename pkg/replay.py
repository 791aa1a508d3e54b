"""FIFO replay of per-environment transition streams with 8-bit frames."""
from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

logger = logging.getLogger(__name__)


class NotReadyError(RuntimeError):
    """No stream holds enough transitions for the requested window length."""


def quantize(obs: np.ndarray) -> np.ndarray:
    """[-0.5, 0.5] floats to uint8."""
    return np.clip(np.round((np.asarray(obs, dtype=np.float64) + 0.5) * 255.0), 0, 255).astype(np.uint8)


def dequantize(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float32) / 255.0 - 0.5


@dataclass
class Transition:
    """One environment step.

    ``action`` and ``reward`` are the ones that led to ``obs``; at an episode
    start they are zero placeholders and ``cont`` is 1.
    """

    obs: np.ndarray
    action: np.ndarray
    reward: float
    cont: float
    is_first: bool
    env_id: int = 0


@dataclass
class TensorBatch:
    obs: Tensor
    actions: Tensor
    rewards: Tensor
    continues: Tensor
    is_first: Tensor | None


@dataclass
class SequenceBatch:
    obs: np.ndarray  # B x T x 3 x S x S, uint8
    actions: np.ndarray
    rewards: np.ndarray
    continues: np.ndarray
    is_first: np.ndarray
    env_ids: np.ndarray
    starts: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def to_torch(self, device: str | torch.device = "cpu", dtype: torch.dtype = torch.float32) -> TensorBatch:
        return TensorBatch(
            obs=torch.as_tensor(dequantize(self.obs), device=device).to(dtype),
            actions=torch.as_tensor(self.actions, device=device).to(dtype),
            rewards=torch.as_tensor(self.rewards, device=device).to(dtype),
            continues=torch.as_tensor(self.continues, device=device).to(dtype),
            is_first=torch.as_tensor(self.is_first, device=device),
        )


class _Stream:
    """Contiguous transitions of one environment instance."""

    def __init__(self):
        self.obs: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.conts: list[float] = []
        self.firsts: list[bool] = []
        self.head = 0

    def __len__(self) -> int:
        return len(self.rewards) - self.head

    def push(self, t: Transition, frame: np.ndarray) -> None:
        self.obs.append(frame)
        self.actions.append(np.asarray(t.action, dtype=np.float32))
        self.rewards.append(float(t.reward))
        self.conts.append(float(t.cont))
        self.firsts.append(bool(t.is_first))

    def pop_front(self) -> None:
        self.head += 1
        if self.head > 4096 and self.head * 2 > len(self.rewards):
            for items in (self.obs, self.actions, self.rewards, self.conts, self.firsts):
                del items[: self.head]
            self.head = 0

    def window(self, start: int, length: int) -> tuple:
        lo = self.head + start
        hi = lo + length
        return (
            np.stack(self.obs[lo:hi]),
            np.stack(self.actions[lo:hi]),
            np.asarray(self.rewards[lo:hi], dtype=np.float32),
            np.asarray(self.conts[lo:hi], dtype=np.float32),
            np.asarray(self.firsts[lo:hi], dtype=bool),
        )


class ReplayBuffer:
    """Stores transitions per env stream and evicts the globally oldest one at capacity.

    Appends and samples are serialized by a lock, so a sampler never sees a
    half-written transition.
    """

    def __init__(self, capacity: int, obs_shape: tuple[int, int, int], action_dim: int):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self._streams: dict[int, _Stream] = {}
        self._order: deque[int] = deque()
        self._lock = threading.Lock()
        self.total_appended = 0

    def __len__(self) -> int:
        return len(self._order)

    def stream_length(self, env_id: int) -> int:
        stream = self._streams.get(env_id)
        return len(stream) if stream is not None else 0

    def append(self, t: Transition) -> None:
        obs = np.asarray(t.obs)
        if obs.shape != self.obs_shape:
            raise ValueError(f"expected observation shape {self.obs_shape}, got {obs.shape}")
        if np.shape(t.action) != (self.action_dim,):
            raise ValueError(f"expected action shape ({self.action_dim},), got {np.shape(t.action)}")
        if t.cont not in (0, 1):
            raise ValueError(f"continue flag must be 0 or 1, got {t.cont}")
        if not np.isfinite(t.reward):
            raise ValueError(f"reward must be finite, got {t.reward}")
        frame = obs if obs.dtype == np.uint8 else quantize(obs)
        with self._lock:
            self._streams.setdefault(t.env_id, _Stream()).push(t, frame)
            self._order.append(t.env_id)
            self.total_appended += 1
            while len(self._order) > self.capacity:
                self._streams[self._order.popleft()].pop_front()

    def ready(self, min_steps: int) -> bool:
        return len(self) >= min_steps

    def can_sample(self, length: int) -> bool:
        with self._lock:
            return any(len(stream) >= length for stream in self._streams.values())

    def sample(self, batch_size: int, length: int, rng: np.random.Generator) -> SequenceBatch:
        """Uniform over every length-``length`` window of every stream."""
        if batch_size <= 0 or length <= 0:
            raise ValueError(f"batch size and length must be positive, got {batch_size}, {length}")
        with self._lock:
            ids = [env_id for env_id, s in self._streams.items() if len(s) >= length]
            counts = np.array([len(self._streams[i]) - length + 1 for i in ids], dtype=np.int64)
            if not ids:
                raise NotReadyError(f"no stream holds {length} transitions yet")
            offsets = np.cumsum(counts)
            picks = rng.integers(0, offsets[-1], size=batch_size)
            which = np.searchsorted(offsets, picks, side="right")
            starts = picks - (offsets[which] - counts[which])
            windows = [self._streams[ids[w]].window(int(s), length) for w, s in zip(which, starts)]
        obs, actions, rewards, conts, firsts = (np.stack(parts) for parts in zip(*windows))
        return SequenceBatch(
            obs=obs,
            actions=actions,
            rewards=rewards,
            continues=conts,
            is_first=firsts,
            env_ids=np.array([ids[w] for w in which]),
            starts=starts,
        )
