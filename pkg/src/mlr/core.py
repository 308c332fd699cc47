"""Shared domain types and the replay buffer.

The buffer stores pixels as uint8 and hands them back as float32 in [0, 1].
It serves two kinds of requests: i.i.d. transition batches for the RL loss
(uniform or prioritized) and contiguous K-step windows for the masked latent
reconstruction objective.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import InsufficientData, ShapeMismatch

BUFFER_FORMAT_VERSION = 1

Action = Union[int, np.ndarray]


@dataclass
class Transition:
    obs: np.ndarray
    action: Action
    reward: float
    next_obs: np.ndarray
    done: bool
    # done marks an episode boundary; terminal says whether to stop bootstrapping
    # (False for time-limit truncation). Defaults to done.
    terminal: Optional[bool] = None

    def __post_init__(self):
        if self.terminal is None:
            self.terminal = bool(self.done)


@dataclass
class Trajectory:
    observations: np.ndarray  # [K, D, H, W] float32
    actions: np.ndarray  # [K, A] float32 or [K] int64
    rewards: np.ndarray
    next_observations: np.ndarray
    start_index: int

    def __len__(self):
        return len(self.observations)


@dataclass
class TrajectoryBatch:
    observations: np.ndarray  # [B, K, D, H, W]
    actions: np.ndarray  # [B, K, A] or [B, K]
    start_indices: np.ndarray


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray
    indices: np.ndarray
    weights: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i) -> Transition:
        return Transition(self.obs[i], self.actions[i], float(self.rewards[i]),
                          self.next_obs[i], bool(self.dones[i]), bool(self.terminals[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))


def _to_uint8(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.uint8:
        return x
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _to_float(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32) / np.float32(255.0)


class ReplayBuffer:
    """FIFO transition store with optional proportional prioritization.

    ``num_actions`` selects a discrete action store; otherwise ``action_dim``
    gives the width of continuous actions.
    """

    def __init__(self, capacity: int, obs_shape: Sequence[int], action_dim: int = 1,
                 num_actions: Optional[int] = None, prioritized: bool = False,
                 priority_exponent: float = 0.5, min_size: int = 1, seed=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_shape = tuple(int(s) for s in obs_shape)
        self.discrete = num_actions is not None
        self.num_actions = num_actions
        self.action_dim = 1 if self.discrete else int(action_dim)
        self.prioritized = prioritized
        self.priority_exponent = priority_exponent
        self.min_size = int(min_size)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        self._obs = np.zeros((capacity, *self.obs_shape), dtype=np.uint8)
        self._next_obs = np.zeros((capacity, *self.obs_shape), dtype=np.uint8)
        if self.discrete:
            self._actions = np.zeros(capacity, dtype=np.int64)
        else:
            self._actions = np.zeros((capacity, self.action_dim), dtype=np.float32)
        self._rewards = np.zeros(capacity, dtype=np.float32)
        self._dones = np.zeros(capacity, dtype=bool)
        self._terminals = np.zeros(capacity, dtype=bool)
        self._priorities = np.zeros(capacity, dtype=np.float64)
        self._pos = 0
        self._size = 0

    def __len__(self):
        return self._size

    # logical index 0 is the oldest stored item
    def _physical(self, logical):
        start = (self._pos - self._size) % self.capacity
        return (start + np.asarray(logical)) % self.capacity

    def push(self, t: Transition) -> None:
        obs = np.asarray(t.obs)
        if obs.shape != self.obs_shape or np.shape(t.next_obs) != self.obs_shape:
            raise ShapeMismatch(f"expected obs shape {self.obs_shape}, got {obs.shape}")
        if self.prioritized:
            p = self._priorities[self._physical(np.arange(self._size))].max() if self._size else 0.0
            p = p if p > 0 else 1.0
        i = self._pos
        self._obs[i] = _to_uint8(obs)
        self._next_obs[i] = _to_uint8(np.asarray(t.next_obs))
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._dones[i] = t.done
        self._terminals[i] = t.terminal
        if self.prioritized:
            self._priorities[i] = p
        self._pos = (self._pos + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    @property
    def priorities(self) -> np.ndarray:
        """Stored priorities in logical (oldest-first) order."""
        return self._priorities[self._physical(np.arange(self._size))]

    def update_priorities(self, indices, priorities) -> None:
        priorities = np.asarray(priorities, dtype=np.float64)
        if np.any(priorities < 0) or not np.all(np.isfinite(priorities)):
            raise ValueError("priorities must be finite and non-negative")
        self._priorities[self._physical(indices)] = priorities

    def sampling_probabilities(self) -> np.ndarray:
        scaled = self.priorities ** self.priority_exponent
        total = scaled.sum()
        if total <= 0:
            return np.full(self._size, 1.0 / self._size)
        return scaled / total

    def _gather(self, logical: np.ndarray) -> Batch:
        phys = self._physical(logical)
        return Batch(
            obs=_to_float(self._obs[phys]),
            actions=self._actions[phys].copy(),
            rewards=self._rewards[phys].copy(),
            next_obs=_to_float(self._next_obs[phys]),
            dones=self._dones[phys].copy(),
            terminals=self._terminals[phys].copy(),
            indices=np.asarray(logical, dtype=np.int64),
        )

    def sample_indices(self, n: int, prioritized: Optional[bool] = None, beta: float = 0.4):
        prioritized = self.prioritized if prioritized is None else prioritized
        if self._size < max(self.min_size, 1):
            raise InsufficientData(f"buffer holds {self._size} items, needs {self.min_size}")
        if not prioritized:
            idx = self.rng.integers(0, self._size, size=n)
            return idx, np.ones(n, dtype=np.float32)
        probs = self.sampling_probabilities()
        cdf = np.cumsum(probs)
        u = self.rng.random(n) * cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), self._size - 1)
        w = (self._size * probs[idx]) ** (-beta)
        w = w / w.max()
        return idx.astype(np.int64), w.astype(np.float32)

    def gather(self, indices, weights=None) -> Batch:
        """Batch of the transitions at the given logical indices."""
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) and (indices.min() < 0 or indices.max() >= self._size):
            raise IndexError("logical index out of range")
        batch = self._gather(indices)
        batch.weights = np.ones(len(indices), np.float32) if weights is None else np.asarray(weights, np.float32)
        return batch

    def sample_batch(self, n: int, prioritized: Optional[bool] = None, beta: float = 0.4) -> Batch:
        idx, w = self.sample_indices(n, prioritized, beta)
        batch = self._gather(idx)
        batch.weights = w
        return batch

    def valid_starts(self, K: int) -> np.ndarray:
        """Logical start indices of every K-window that crosses no episode end."""
        n = self._size - K + 1
        if K < 1 or n <= 0:
            return np.zeros(0, dtype=np.int64)
        dones = self._dones[self._physical(np.arange(self._size))].astype(np.int64)
        # window [s, s+K-1] is valid iff no done among its first K-1 steps
        csum = np.concatenate([[0], np.cumsum(dones)])
        starts = np.arange(n)
        bad = csum[starts + K - 1] - csum[starts]
        return starts[bad == 0]

    def sample_trajectory(self, K: int) -> Trajectory:
        starts = self.valid_starts(K)
        if len(starts) == 0:
            raise InsufficientData(f"no contiguous window of length {K}")
        s = int(starts[self.rng.integers(len(starts))])
        phys = self._physical(np.arange(s, s + K))
        return Trajectory(
            observations=_to_float(self._obs[phys]),
            actions=self._actions[phys].copy(),
            rewards=self._rewards[phys].copy(),
            next_observations=_to_float(self._next_obs[phys]),
            start_index=s,
        )

    def sample_trajectories(self, batch_size: int, K: int, as_uint8: bool = False) -> TrajectoryBatch:
        starts = self.valid_starts(K)
        if len(starts) == 0:
            raise InsufficientData(f"no contiguous window of length {K}")
        chosen = starts[self.rng.integers(len(starts), size=batch_size)]
        phys = self._physical(chosen[:, None] + np.arange(K)[None, :])
        obs = self._obs[phys]
        return TrajectoryBatch(
            observations=obs if as_uint8 else _to_float(obs),
            actions=self._actions[phys].copy(),
            start_indices=chosen.astype(np.int64),
        )

    def n_step(self, indices, n: int, gamma: float, as_uint8: bool = False):
        """n-step returns starting at each logical index.

        Returns (returns, bootstrap_obs, bootstrap_discount) where the discount is
        gamma**m for the realised horizon m and 0 when the window hit a terminal.
        Windows stop early at episode ends and at the newest stored item.
        """
        indices = np.asarray(indices, dtype=np.int64)
        B = len(indices)
        returns = np.zeros(B, dtype=np.float64)
        alive = np.ones(B, dtype=bool)
        last = indices.copy()
        horizon = np.zeros(B, dtype=np.int64)
        for j in range(n):
            logical = indices + j
            step_ok = alive & (logical < self._size)
            if not step_ok.any():
                break
            phys = self._physical(np.where(step_ok, logical, indices))
            returns += np.where(step_ok, gamma ** j * self._rewards[phys], 0.0)
            last = np.where(step_ok, logical, last)
            horizon += step_ok
            alive = step_ok & ~self._dones[phys]
        phys_last = self._physical(last)
        discount = gamma ** horizon * (~self._terminals[phys_last])
        nxt = self._next_obs[phys_last]
        return (returns.astype(np.float32), nxt if as_uint8 else _to_float(nxt),
                discount.astype(np.float32))

    # -- checkpointing -----------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "version": BUFFER_FORMAT_VERSION,
            "capacity": self.capacity,
            "obs_shape": list(self.obs_shape),
            "pos": self._pos,
            "size": self._size,
            "rng": self.rng.bit_generator.state,
            "obs": self._obs, "next_obs": self._next_obs, "actions": self._actions,
            "rewards": self._rewards, "dones": self._dones, "terminals": self._terminals,
            "priorities": self._priorities,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["version"] != BUFFER_FORMAT_VERSION:
            raise ValueError(f"unsupported buffer format {state['version']}")
        if state["capacity"] != self.capacity or tuple(state["obs_shape"]) != self.obs_shape:
            raise ShapeMismatch("buffer geometry differs from checkpoint")
        self._pos, self._size = int(state["pos"]), int(state["size"])
        self.rng.bit_generator.state = state["rng"]
        for name in ("obs", "next_obs", "actions", "rewards", "dones", "terminals", "priorities"):
            getattr(self, "_" + name)[...] = state[name]

    def save(self, path) -> None:
        """Binary dump: a JSON header line followed by an .npz payload."""
        state = self.state_dict()
        header = {k: state[k] for k in ("version", "capacity", "obs_shape", "pos", "size", "rng")}
        arrays = {k: v for k, v in state.items() if isinstance(v, np.ndarray)}
        payload = io.BytesIO()
        np.savez(payload, **arrays)
        with open(path, "wb") as f:
            f.write(b"MLRBUF " + json.dumps(header).encode() + b"\n")
            f.write(payload.getvalue())

    def load(self, path) -> None:
        with open(path, "rb") as f:
            line = f.readline()
            if not line.startswith(b"MLRBUF "):
                raise ValueError(f"{path} is not a replay buffer dump")
            header = json.loads(line[7:])
            arrays = np.load(io.BytesIO(f.read()))
            self.load_state_dict({**header, **{k: arrays[k] for k in arrays.files}})
