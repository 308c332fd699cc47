"""Toy pixel environments and the observation wrapper.

Raw environments expose ``reset(seed)``, ``step(action) -> (reward, done)``
and ``render() -> uint8 [H, W, C]``. ``PixelEnv`` turns one into an agent
facing environment with action repeat, frame stacking, resizing and [0, 1]
observations ``[C * stack, H, W]``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import cv2
import numpy as np

from .errors import InvalidSpec, SteppedDoneEnv


@dataclass(frozen=True)
class EnvSpec:
    id: str
    action_dim: Optional[int] = None  # continuous
    num_actions: Optional[int] = None  # discrete
    size: Tuple[int, int] = (84, 84)
    action_repeat: int = 1
    frame_stack: int = 1
    max_episode_frames: int = 1000
    grayscale: bool = False

    def __post_init__(self):
        if self.action_repeat < 1 or self.frame_stack < 1:
            raise InvalidSpec("action_repeat and frame_stack must be >= 1")
        if (self.action_dim is None) == (self.num_actions is None):
            raise InvalidSpec("exactly one of action_dim / num_actions must be set")
        object.__setattr__(self, "size", tuple(self.size))

    @property
    def discrete(self) -> bool:
        return self.num_actions is not None


class PixelPendulum:
    """Torque-limited pendulum swing-up rendered as a rod on an RGB canvas.

    Angle 0 is upright. Integration is leapfrog (kick-drift-kick), so with zero
    torque the energy ``0.5 w^2 + (g/l) cos(theta)`` stays bounded.
    """

    g_over_l = 10.0
    max_speed = 8.0
    max_torque = 2.0
    dt = 0.05
    substeps = 2

    def __init__(self, render_size: int = 84, max_torque: Optional[float] = None):
        self.render_size = render_size
        if max_torque is not None:
            self.max_torque = max_torque
        self.rng = np.random.default_rng()
        self.theta = 0.0
        self.omega = 0.0
        self.last_torque = 0.0
        n = render_size
        ys, xs = np.mgrid[0:n, 0:n].astype(np.float32)
        self._grid = (xs + 0.5 - n / 2, ys + 0.5 - n / 2)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.theta = float(self.rng.uniform(-math.pi, math.pi))
        self.omega = float(self.rng.uniform(-1.0, 1.0))
        self.last_torque = 0.0

    def _accel(self, theta, torque):
        return self.g_over_l * math.sin(theta) + 3.0 * torque

    def energy(self) -> float:
        return 0.5 * self.omega ** 2 + self.g_over_l * math.cos(self.theta)

    def step(self, action) -> Tuple[float, bool]:
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0)) * self.max_torque
        th = ((self.theta + math.pi) % (2 * math.pi)) - math.pi
        cost = th ** 2 + 0.1 * self.omega ** 2 + 0.001 * u ** 2
        max_cost = math.pi ** 2 + 0.1 * self.max_speed ** 2 + 0.001 * self.max_torque ** 2
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            self.omega += 0.5 * h * self._accel(self.theta, u)
            self.theta += h * self.omega
            self.omega += 0.5 * h * self._accel(self.theta, u)
        self.omega = float(np.clip(self.omega, -self.max_speed, self.max_speed))
        self.last_torque = u
        return 1.0 - cost / max_cost, False

    def get_state(self):
        return {"theta": self.theta, "omega": self.omega, "last_torque": self.last_torque,
                "rng": self.rng.bit_generator.state}

    def set_state(self, s):
        self.theta, self.omega, self.last_torque = s["theta"], s["omega"], s["last_torque"]
        self.rng.bit_generator.state = s["rng"]

    def render(self) -> np.ndarray:
        n = self.render_size
        xs, ys = self._grid
        length = 0.38 * n
        tip = (length * math.sin(self.theta), -length * math.cos(self.theta))
        # distance from every pixel to the rod segment
        t = np.clip((xs * tip[0] + ys * tip[1]) / (length ** 2), 0.0, 1.0)
        dist = np.hypot(xs - t * tip[0], ys - t * tip[1])
        rod = dist <= 0.045 * n
        bob = np.hypot(xs - tip[0], ys - tip[1]) <= 0.08 * n
        hub = np.hypot(xs, ys) <= 0.04 * n
        img = np.empty((n, n, 3), dtype=np.uint8)
        img[...] = (30, 30, 60)
        img[rod] = (200, 120, 40)
        img[bob] = (240, 220, 60)
        img[hub] = (90, 200, 220)
        return img


class PixelCatch:
    """Catch falling balls with a paddle on a 7x7 grid.

    A ball starts in a random column of the top row and falls one row per step;
    the paddle lives on the bottom row and moves left/stay/right. Reaching the
    bottom row scores +1 if the paddle is under the ball, -1 otherwise, and a
    new ball spawns. The episode ends after ``n_balls`` balls.
    """

    grid = 7
    num_actions = 3

    def __init__(self, render_size: int = 84, n_balls: int = 5):
        self.render_size = render_size
        self.n_balls = n_balls
        self.rng = np.random.default_rng()
        self.ball = (0, 0)
        self.paddle = self.grid // 2
        self.balls_left = n_balls

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.paddle = self.grid // 2
        self.balls_left = self.n_balls
        self._spawn()

    def _spawn(self):
        self.ball = (0, int(self.rng.integers(self.grid)))

    def step(self, action) -> Tuple[float, bool]:
        a = int(action)
        if not 0 <= a < self.num_actions:
            raise ValueError(f"action {a} out of range")
        self.paddle = int(np.clip(self.paddle + a - 1, 0, self.grid - 1))
        row, col = self.ball
        row += 1
        self.ball = (row, col)
        if row < self.grid - 1:
            return 0.0, False
        reward = 1.0 if col == self.paddle else -1.0
        self.balls_left -= 1
        done = self.balls_left == 0
        if not done:
            self._spawn()
        return reward, done

    def get_state(self):
        return {"ball": self.ball, "paddle": self.paddle, "balls_left": self.balls_left,
                "rng": self.rng.bit_generator.state}

    def set_state(self, s):
        self.ball, self.paddle, self.balls_left = tuple(s["ball"]), s["paddle"], s["balls_left"]
        self.rng.bit_generator.state = s["rng"]

    def render(self) -> np.ndarray:
        g = self.grid
        img = np.zeros((g, g), dtype=np.uint8)
        img[self.ball] = 255
        img[g - 1, self.paddle] = 160
        n = self.render_size
        return cv2.resize(img, (n, n), interpolation=cv2.INTER_NEAREST)[..., None]


class PixelEnv:
    """Action repeat + frame stack + resize + [0, 1] scaling around a raw env."""

    def __init__(self, raw, spec: EnvSpec):
        if not all(hasattr(raw, name) for name in ("reset", "step", "render")):
            raise InvalidSpec("raw environment must expose reset, step and render")
        self.raw = raw
        self.spec = spec
        self.frames: deque = deque(maxlen=spec.frame_stack)
        self.env_steps = 0
        self.episode_frames = 0
        self.done = True

    @property
    def observation_shape(self):
        c = 1 if self.spec.grayscale else self._channels
        return (c * self.spec.frame_stack, *self.spec.size)

    @property
    def _channels(self):
        return self._frame().shape[0]

    def _frame(self) -> np.ndarray:
        img = self.raw.render()
        if img.ndim == 2:
            img = img[..., None]
        if self.spec.grayscale and img.shape[-1] == 3:
            img = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)[..., None]
        H, W = self.spec.size
        if img.shape[:2] != (H, W):
            img = cv2.resize(img, (W, H), interpolation=cv2.INTER_AREA)
            if img.ndim == 2:
                img = img[..., None]
        return np.ascontiguousarray(img.transpose(2, 0, 1))

    def _obs(self) -> np.ndarray:
        return np.concatenate(list(self.frames), axis=0).astype(np.float32) / 255.0

    def reset(self, seed=None) -> np.ndarray:
        self.raw.reset(seed)
        f = self._frame()
        for _ in range(self.spec.frame_stack):
            self.frames.append(f)
        self.done = False
        self.episode_frames = 0
        return self._obs()

    def step(self, action):
        """Returns (obs, reward, done, info); info['truncated'] flags time limits."""
        if self.done:
            raise SteppedDoneEnv("step() called on a finished episode; call reset()")
        total, terminal = 0.0, False
        for _ in range(self.spec.action_repeat):
            r, terminal = self.raw.step(action)
            total += r
            self.env_steps += 1
            self.episode_frames += 1
            if terminal or self.episode_frames >= self.spec.max_episode_frames:
                break
        truncated = not terminal and self.episode_frames >= self.spec.max_episode_frames
        self.frames.append(self._frame())
        self.done = terminal or truncated
        return self._obs(), total, self.done, {"terminal": terminal, "truncated": truncated}

    def get_state(self):
        return {"raw": self.raw.get_state(), "frames": [f.copy() for f in self.frames],
                "env_steps": self.env_steps, "episode_frames": self.episode_frames, "done": self.done}

    def set_state(self, s):
        self.raw.set_state(s["raw"])
        self.frames.clear()
        self.frames.extend(f.copy() for f in s["frames"])
        self.env_steps, self.episode_frames, self.done = s["env_steps"], s["episode_frames"], s["done"]


def wrap(raw, spec: EnvSpec) -> PixelEnv:
    return PixelEnv(raw, spec)


class TwoStateMDP:
    """Deterministic 2-state MDP used to check agents against value iteration.

    ``next_state[s, a]`` and ``reward[s, a]`` define the dynamics. Observations
    are one-hot state vectors. For continuous agents the action is ignored and
    only action index 0 of the tables is used.
    """

    def __init__(self, reward=((0.0, 0.5), (1.0, 0.2)), next_state=((0, 1), (1, 0)), gamma: float = 0.8):
        self.reward = np.asarray(reward, dtype=np.float64)
        self.next_state = np.asarray(next_state, dtype=np.int64)
        self.gamma = gamma
        self.n_states, self.n_actions = self.reward.shape

    def value_iteration(self, tol: float = 1e-12, continuous: bool = False) -> np.ndarray:
        R = self.reward[:, :1] if continuous else self.reward
        P = self.next_state[:, :1] if continuous else self.next_state
        Q = np.zeros_like(R)
        while True:
            newQ = R + self.gamma * Q.max(axis=1)[P]
            if np.abs(newQ - Q).max() < tol:
                return newQ
            Q = newQ

    def one_hot(self, s) -> np.ndarray:
        return np.eye(self.n_states, dtype=np.float32)[s]


@dataclass
class _Registration:
    make_raw: Callable[..., object]
    spec: EnvSpec
    kwargs: Dict = field(default_factory=dict)


_REGISTRY: Dict[str, _Registration] = {}


def register(env_id: str, make_raw, spec: EnvSpec, **kwargs) -> None:
    _REGISTRY[env_id] = _Registration(make_raw, spec, kwargs)


def registered() -> Tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def default_spec(env_id: str) -> EnvSpec:
    if env_id not in _REGISTRY:
        raise InvalidSpec(f"unknown environment id {env_id!r}; known: {registered()}")
    return _REGISTRY[env_id].spec


def make(env_id: str, spec: Optional[EnvSpec] = None, render_size: Optional[int] = None, **kwargs) -> PixelEnv:
    """Build a registered environment, optionally overriding its spec."""
    reg = _REGISTRY.get(env_id)
    if reg is None:
        raise InvalidSpec(f"unknown environment id {env_id!r}; known: {registered()}")
    spec = spec or reg.spec
    raw = reg.make_raw(render_size=render_size or spec.size[0], **{**reg.kwargs, **kwargs})
    return wrap(raw, spec)


register("pixel_pendulum", PixelPendulum,
         EnvSpec("pixel_pendulum", action_dim=1, size=(84, 84), action_repeat=4, frame_stack=3,
                 max_episode_frames=400))
register("pixel_catch", PixelCatch,
         EnvSpec("pixel_catch", num_actions=3, size=(84, 84), action_repeat=1, frame_stack=4,
                 max_episode_frames=1000, grayscale=True))
