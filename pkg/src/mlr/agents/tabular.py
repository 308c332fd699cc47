"""Run either agent on the one-hot 2-state MDP and compare with value iteration."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..core import ReplayBuffer, Transition
from ..envs import TwoStateMDP
from .rainbow import RainbowAgent, RainbowConfig, expected_q
from .sac import SACAgent, SACConfig


class IdentityEncoder(nn.Module):
    """Pass-through 'encoder' for vector observations."""

    def __init__(self, dim: int):
        super().__init__()
        self.latent_dim = dim

    def forward(self, x):
        return x.float()


def fill_buffer(mdp: TwoStateMDP, n: int, rng: np.random.Generator, continuous: bool) -> ReplayBuffer:
    """Uniformly cover every (state, action) pair."""
    kw = {"action_dim": 1} if continuous else {"num_actions": mdp.n_actions, "prioritized": True}
    buf = ReplayBuffer(n, (mdp.n_states,), seed=rng, **kw)
    for _ in range(n):
        s = int(rng.integers(mdp.n_states))
        if continuous:
            a, a_idx = rng.uniform(-1, 1, size=1).astype(np.float32), 0
        else:
            a = a_idx = int(rng.integers(mdp.n_actions))
        buf.push(Transition(mdp.one_hot(s), a, float(mdp.reward[s, a_idx]),
                            mdp.one_hot(mdp.next_state[s, a_idx]), False))
    return buf


def sac_q_table(agent: SACAgent, mdp: TwoStateMDP) -> np.ndarray:
    """Min-critic value of each state, averaged over a grid of actions (Q ignores them)."""
    with torch.no_grad():
        obs = torch.as_tensor(np.stack([mdp.one_hot(s) for s in range(mdp.n_states)]))
        acts = torch.linspace(-0.9, 0.9, 7)
        q = []
        for a in acts:
            q1, q2 = agent.critic(obs, a.expand(mdp.n_states, 1))
            q.append(torch.min(q1, q2))
        return torch.stack(q).mean(0).numpy()[:, None]


def rainbow_q_table(agent: RainbowAgent, mdp: TwoStateMDP) -> np.ndarray:
    obs = torch.as_tensor(np.stack([mdp.one_hot(s) for s in range(mdp.n_states)]))
    agent.head.eval()
    try:
        with torch.no_grad():
            return expected_q(agent.head(obs), agent.support).numpy()
    finally:
        agent.head.train()


def run_tabular(kind: str, updates: int = 5000, seed: int = 0, mdp: TwoStateMDP = None,
                tol: float = 0.05, check_every: int = 250, early_stop: bool = True):
    """Train on the tabular MDP; returns (q_table, q_star, updates_used).

    With ``early_stop`` training ends once every entry is within ``tol`` of
    the oracle; otherwise all ``updates`` are run.
    """
    mdp = mdp or TwoStateMDP()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    continuous = kind == "sac"
    q_star = mdp.value_iteration(continuous=continuous)
    buf = fill_buffer(mdp, 2000, rng, continuous)
    if continuous:
        cfg = SACConfig(gamma=mdp.gamma, init_temperature=1e-6, learn_temperature=False,
                        batch_size=64, hidden_dim=64, critic_m=0.9)
        agent = SACAgent(cfg, IdentityEncoder(mdp.n_states), action_dim=1)
        table = sac_q_table
    elif kind == "rainbow":
        cfg = RainbowConfig(gamma=mdp.gamma, multi_step=1, hidden_dim=64, lr=1e-3, batch_size=64,
                            min_replay=1)
        agent = RainbowAgent(cfg, IdentityEncoder(mdp.n_states), num_actions=mdp.n_actions)
        table = rainbow_q_table
    else:
        raise ValueError(f"unknown agent kind {kind!r}")
    rngs = {"augment": None, "mask": None}
    q = table(agent, mdp)
    for step in range(1, updates + 1):
        if continuous:
            agent.update(buf, rngs)
        else:
            agent.update(buf, rngs, beta=agent.beta(step, updates))
        if step % check_every == 0:
            q = table(agent, mdp)
            if early_stop and np.abs(q - q_star).max() <= tol:
                return q, q_star, step
    return table(agent, mdp), q_star, updates
