"""Base RL agents that share the pixel encoder with the auxiliary objective."""
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import torch

from .rainbow import (DistributionalHead, NoisyLinear, RainbowAgent, RainbowConfig, expected_q,
                      project_distribution, rainbow_loss)
from .sac import (Actor, Critic, SACAgent, SACConfig, sac_actor_loss, sac_alpha_loss, sac_critic_loss,
                  squashed_log_prob)


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class PolicyOutput:
    action: object
    mean: Optional[np.ndarray] = None
    log_std: Optional[np.ndarray] = None
    log_prob: Optional[float] = None
    distribution: Optional[np.ndarray] = None  # [A, atoms] for discrete agents


def act(agent, obs, mode="eval"):
    return agent.act(obs, Mode(mode).value)


@torch.no_grad()
def policy_output(agent, obs, mode="eval") -> PolicyOutput:
    """Full policy readout for a single observation."""
    mode = Mode(mode)
    x = torch.as_tensor(np.asarray(obs), dtype=torch.float32).unsqueeze(0)
    if isinstance(agent, SACAgent):
        s = agent.encoder(agent._prep(x))
        mean, log_std = agent.actor.dist_params(s)
        if mode is Mode.EVAL:
            return PolicyOutput(torch.tanh(mean)[0].numpy(), mean[0].numpy(), log_std[0].numpy())
        u = mean + log_std.exp() * torch.randn_like(mean)
        return PolicyOutput(torch.tanh(u)[0].numpy(), mean[0].numpy(), log_std[0].numpy(),
                            float(squashed_log_prob(u, mean, log_std)[0]))
    agent.head.train(mode is Mode.TRAIN)
    try:
        log_p = agent.head(agent.encoder(agent._prep(x)))[0]
    finally:
        agent.head.train(True)
    q = expected_q(log_p, agent.support)
    return PolicyOutput(int(q.argmax()), distribution=log_p.exp().numpy())


__all__ = [
    "Actor", "Critic", "DistributionalHead", "Mode", "NoisyLinear", "PolicyOutput", "RainbowAgent",
    "RainbowConfig", "SACAgent", "SACConfig", "act", "expected_q", "policy_output", "project_distribution",
    "rainbow_loss", "sac_actor_loss", "sac_alpha_loss", "sac_critic_loss", "squashed_log_prob",
]
