"""Built-in pixel tasks with optional animated distractor backgrounds.

Observations are uint8 arrays of shape (3, S, S). ``step`` returns
``(obs, reward, cont, info)`` where ``cont`` is 0 only when the episode ends
and ``info`` carries ``timeout`` and a boolean ``sprite_mask`` (S, S) marking
task-relevant pixels.
"""
from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Literal

import numpy as np

logger = logging.getLogger(__name__)

SOLID_BACKGROUND = np.array([0.12, 0.12, 0.15], dtype=np.float32)
POOL_IDS = {"train": 0, "eval": 1}
# disjoint hue bands keep the train and eval backgrounds visually apart
POOL_HUES = {"train": (0.0, 0.5), "eval": (0.5, 1.0)}


@dataclass(frozen=True)
class ActionSpace:
    discrete: bool
    dim: int
    low: float = -1.0
    high: float = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    action_space: ActionSpace
    image_size: int
    max_episode_steps: int
    action_repeat: int

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (3, self.image_size, self.image_size)


@dataclass(frozen=True)
class DistractorConfig:
    enabled: bool = False
    pool: Literal["train", "eval"] = "train"
    seed: int = 0
    waves: int = 3
    noise_grid: int = 6
    max_wave_speed: float = 0.12
    max_drift: float = 0.25

    def __post_init__(self) -> None:
        if self.pool not in POOL_IDS:
            raise ValueError(f"unknown background pool {self.pool!r}")


class BackgroundVideo:
    """Procedural texture: travelling sine waves over drifting periodic value noise."""

    def __init__(self, config: DistractorConfig, size: int, video: int = 0):
        self.config = config
        self.size = size
        rng = np.random.default_rng((config.seed, POOL_IDS[config.pool], video))
        hue_lo, hue_hi = POOL_HUES[config.pool]
        hue = rng.uniform(hue_lo, hue_hi)
        self.dark = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.4, 0.9), rng.uniform(0.15, 0.35)))
        second = hue_lo + (hue - hue_lo + rng.uniform(0.1, 0.4) * (hue_hi - hue_lo)) % (hue_hi - hue_lo)
        self.light = np.array(colorsys.hsv_to_rgb(second, rng.uniform(0.3, 0.8), rng.uniform(0.6, 0.95)))

        self.angles = rng.uniform(0.0, 2 * math.pi, config.waves)
        self.freqs = rng.uniform(1.0, 4.0, config.waves)
        self.speeds = rng.uniform(0.3, 1.0, config.waves) * config.max_wave_speed
        self.phases = rng.uniform(0.0, 2 * math.pi, config.waves)
        self.noise = rng.uniform(0.0, 1.0, (config.noise_grid, config.noise_grid))
        self.drift = rng.uniform(-1.0, 1.0, 2) * config.max_drift

        coords = (np.arange(size) + 0.5) / size
        self.ys, self.xs = np.meshgrid(coords, coords, indexing="ij")

    def _noise(self, t: float) -> np.ndarray:
        grid = self.config.noise_grid
        gx = (self.xs * grid + self.drift[0] * t) % grid
        gy = (self.ys * grid + self.drift[1] * t) % grid
        x0 = np.floor(gx).astype(int)
        y0 = np.floor(gy).astype(int)
        fx = gx - x0
        fy = gy - y0
        x1 = (x0 + 1) % grid
        y1 = (y0 + 1) % grid
        top = self.noise[y0, x0] * (1 - fx) + self.noise[y0, x1] * fx
        bottom = self.noise[y1, x0] * (1 - fx) + self.noise[y1, x1] * fx
        return top * (1 - fy) + bottom * fy

    def frame(self, t: float) -> np.ndarray:
        """RGB layer in [0, 1] with shape (S, S, 3)."""
        waves = np.zeros_like(self.xs)
        for angle, freq, speed, phase in zip(self.angles, self.freqs, self.speeds, self.phases):
            proj = self.xs * math.cos(angle) + self.ys * math.sin(angle)
            waves += np.sin(2 * math.pi * freq * proj + speed * t + phase)
        mix = 0.5 + 0.25 * waves / len(self.angles) + 0.5 * (self._noise(t) - 0.5)
        mix = np.clip(mix, 0.0, 1.0)[..., None]
        return ((1 - mix) * self.dark + mix * self.light).astype(np.float32)


def render_background(config: DistractorConfig, t: float, size: int = 64, video: int = 0) -> np.ndarray:
    if not config.enabled:
        return np.broadcast_to(SOLID_BACKGROUND, (size, size, 3)).copy()
    return BackgroundVideo(config, size, video).frame(t)


def to_uint8(layer: np.ndarray) -> np.ndarray:
    """(S, S, 3) floats in [0, 1] to a (3, S, S) uint8 observation."""
    return np.clip(np.round(layer * 255.0), 0, 255).astype(np.uint8).transpose(2, 0, 1)


class PixelEnv:
    """Shared episode bookkeeping, background handling and compositing."""

    spec: EnvSpec

    def __init__(self, spec: EnvSpec, seed: int = 0, distractors: DistractorConfig | None = None):
        self.spec = spec
        self.seed = seed
        self.distractors = distractors or DistractorConfig()
        self.physics_rng = np.random.default_rng((seed, 0))
        self.episode = -1
        self.steps = 0
        self.frame_time = 0
        self.background: BackgroundVideo | None = None
        self.sprite_mask: np.ndarray | None = None

    @property
    def action_space(self) -> ActionSpace:
        return self.spec.action_space

    def reset(self) -> np.ndarray:
        self.episode += 1
        self.steps = 0
        self.frame_time = 0
        self.background = None
        if self.distractors.enabled:
            # a fresh video per episode, drawn from this env's own pool slice
            video = self.seed * 1_000_003 + self.episode
            self.background = BackgroundVideo(self.distractors, self.spec.image_size, video)
        self._reset_physics()
        return self._observe()[0]

    def step(self, action) -> tuple[np.ndarray, float, float, dict]:
        if self.episode < 0:
            raise RuntimeError("call reset() before step()")
        action = self._check_action(action)
        reward = self._advance(action)
        self.steps += 1
        self.frame_time += self.spec.action_repeat
        timeout = self.steps >= self.spec.max_episode_steps
        obs, mask = self._observe()
        cont = 0.0 if timeout else 1.0
        return obs, float(reward), cont, {"timeout": timeout, "sprite_mask": mask}

    def _layer(self) -> np.ndarray:
        size = self.spec.image_size
        if self.background is None:
            return np.broadcast_to(SOLID_BACKGROUND, (size, size, 3)).copy()
        return self.background.frame(self.frame_time)

    def _observe(self) -> tuple[np.ndarray, np.ndarray]:
        layer = self._layer()
        mask = np.zeros(layer.shape[:2], dtype=bool)
        for sprite, color in self._sprites():
            layer[sprite] = color
            mask |= sprite
        self.sprite_mask = mask
        return to_uint8(layer), mask

    def _reset_physics(self) -> None:
        raise NotImplementedError

    def _check_action(self, action):
        raise NotImplementedError

    def _advance(self, action) -> float:
        raise NotImplementedError

    def _sprites(self) -> list[tuple[np.ndarray, np.ndarray]]:
        raise NotImplementedError


class PixelPoint(PixelEnv):
    """Steer a dot onto a goal disc inside the unit square.

    The dense variant pays ``1 - d / sqrt(2)`` per internal frame, the sparse
    one pays 1 per frame while the dot overlaps the goal.
    """

    agent_radius = 0.05
    goal_radius = 0.08
    max_speed = 0.05

    def __init__(
        self,
        dense: bool = True,
        image_size: int = 64,
        seed: int = 0,
        distractors: DistractorConfig | None = None,
        action_repeat: int = 2,
        max_episode_steps: int = 100,
    ):
        name = "pixelpoint_dense" if dense else "pixelpoint_sparse"
        spec = EnvSpec(name, ActionSpace(False, 2), image_size, max_episode_steps, action_repeat)
        super().__init__(spec, seed, distractors)
        self.dense = dense
        self.pos = np.zeros(2)
        self.goal = np.zeros(2)
        coords = (np.arange(image_size) + 0.5) / image_size
        self._ys, self._xs = np.meshgrid(coords, coords, indexing="ij")

    def _reset_physics(self) -> None:
        self.pos = self.physics_rng.uniform(0.1, 0.9, 2)
        self.goal = self.physics_rng.uniform(0.1, 0.9, 2)

    def _check_action(self, action) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (2,):
            raise ValueError(f"expected a 2-d action, got shape {action.shape}")
        if not np.isfinite(action).all():
            raise ValueError("action must be finite")
        action = np.clip(action, -1.0, 1.0)
        norm = np.linalg.norm(action)
        return action / norm if norm > 1.0 else action

    def _frame_reward(self) -> float:
        dist = float(np.linalg.norm(self.pos - self.goal))
        if self.dense:
            return 1.0 - dist / math.sqrt(2.0)
        return float(dist < self.agent_radius + self.goal_radius)

    def _advance(self, action: np.ndarray) -> float:
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            self.pos = np.clip(self.pos + self.max_speed * action, 0.0, 1.0)
            reward += self._frame_reward()
        return reward

    def _disc(self, center: np.ndarray, radius: float) -> np.ndarray:
        return (self._xs - center[0]) ** 2 + (self._ys - center[1]) ** 2 <= radius**2

    def _sprites(self):
        return [
            (self._disc(self.goal, self.goal_radius), np.array([0.2, 0.9, 0.3])),
            (self._disc(self.pos, self.agent_radius), np.array([0.95, 0.25, 0.2])),
        ]

    def scripted_action(self) -> np.ndarray:
        """Straight-line controller that stops exactly on the goal."""
        delta = self.goal - self.pos
        dist = float(np.linalg.norm(delta))
        if dist == 0.0:
            return np.zeros(2)
        return delta / dist * min(1.0, dist / (self.max_speed * self.spec.action_repeat))

    def optimal_return(self) -> float:
        """Return of :meth:`scripted_action` from the current state, in closed form per frame."""
        start = float(np.linalg.norm(self.goal - self.pos))
        frames = (self.spec.max_episode_steps - self.steps) * self.spec.action_repeat
        step = self.max_speed * min(1.0, start / (self.max_speed * self.spec.action_repeat)) if start else 0.0
        total = 0.0
        dist = start
        for frame in range(frames):
            if frame % self.spec.action_repeat == 0 and frame:
                # the controller re-plans each agent step
                step = self.max_speed * min(1.0, dist / (self.max_speed * self.spec.action_repeat))
            dist = max(dist - step, 0.0)
            if self.dense:
                total += 1.0 - dist / math.sqrt(2.0)
            else:
                total += float(dist < self.agent_radius + self.goal_radius)
        return total


class PixelCatch(PixelEnv):
    """Move a one-cell paddle under a falling object; +1 per catch.

    Each agent step is one drop. The object appears ``action_repeat`` rows
    above the paddle row at ``paddle + offset`` with ``offset`` uniform in
    {-1, 0, 1}. The paddle moves by ``action - 1``, then the object falls one
    row per internal frame and is settled when it reaches the bottom row.
    A policy that ignores the object column catches exactly one drop in three.
    """

    columns = 8

    def __init__(
        self,
        image_size: int = 64,
        seed: int = 0,
        distractors: DistractorConfig | None = None,
        action_repeat: int = 4,
        max_episode_steps: int = 50,
    ):
        if not 1 <= action_repeat < self.columns:
            raise ValueError(f"action_repeat must lie in [1, {self.columns - 1}], got {action_repeat}")
        spec = EnvSpec("pixelcatch", ActionSpace(True, 3), image_size, max_episode_steps, action_repeat)
        super().__init__(spec, seed, distractors)
        if image_size % self.columns:
            raise ValueError(f"image_size must be a multiple of {self.columns}, got {image_size}")
        self.cell = image_size // self.columns
        self.bottom = self.columns - 1
        self.paddle = self.columns // 2
        self.column = self.paddle
        self.row = self.bottom - action_repeat
        self.catches = 0

    def _spawn(self) -> None:
        self.column = self.paddle + int(self.physics_rng.integers(-1, 2))
        self.row = self.bottom - self.spec.action_repeat

    def _reset_physics(self) -> None:
        self.paddle = int(self.physics_rng.integers(1, self.columns - 1))
        self.catches = 0
        self._spawn()

    def _check_action(self, action) -> int:
        if np.ndim(action) == 0:
            index = int(action)
            if index != action:
                raise ValueError(f"discrete action must be an integer, got {action}")
        else:
            vec = np.asarray(action).reshape(-1)
            if vec.shape != (3,):
                raise ValueError(f"expected a one-hot action of size 3, got shape {vec.shape}")
            index = int(np.argmax(vec))
        if not 0 <= index < 3:
            raise ValueError(f"invalid action index {index}; expected 0, 1 or 2")
        return index

    def _advance(self, action: int) -> float:
        self.paddle = self.paddle + action - 1
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            self.row += 1
            if self.row == self.bottom:
                caught = self.column == self.paddle
                self.catches += int(caught)
                reward += float(caught)
        self.paddle = min(max(self.paddle, 1), self.columns - 2)
        self._spawn()
        return reward

    def _cell(self, row: int, col: int) -> np.ndarray:
        size = self.spec.image_size
        mask = np.zeros((size, size), dtype=bool)
        mask[row * self.cell : (row + 1) * self.cell, col * self.cell : (col + 1) * self.cell] = True
        return mask

    def _sprites(self):
        return [
            (self._cell(self.row, self.column), np.array([0.95, 0.85, 0.2])),
            (self._cell(self.bottom, self.paddle), np.array([0.3, 0.6, 0.95])),
        ]


ENV_REGISTRY: dict[str, Callable[..., PixelEnv]] = {
    "pixelpoint_dense": lambda **kw: PixelPoint(dense=True, **kw),
    "pixelpoint_sparse": lambda **kw: PixelPoint(dense=False, **kw),
    "pixelcatch": lambda **kw: PixelCatch(**kw),
}


def make_env(
    name: str,
    seed: int = 0,
    image_size: int = 64,
    distractors: DistractorConfig | None = None,
    action_repeat: int = 0,
) -> PixelEnv:
    """Build a registered environment; ``action_repeat=0`` keeps the task default."""
    if name not in ENV_REGISTRY:
        raise ValueError(f"unknown environment {name!r}; known: {', '.join(sorted(ENV_REGISTRY))}")
    kwargs: dict = dict(seed=seed, image_size=image_size, distractors=distractors)
    if action_repeat:
        kwargs["action_repeat"] = action_repeat
    return ENV_REGISTRY[name](**kwargs)


def eval_distractors(config: DistractorConfig) -> DistractorConfig:
    return replace(config, pool="eval")
