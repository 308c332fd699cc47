"""Soft actor-critic on encoder latents, with the optional MLR auxiliary loss.

The critic loss and the auxiliary loss share one optimizer step (their
gradients sum in the encoder). The actor consumes detached latents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InsufficientData, NumericalError, ShapeMismatch
from ..nets import MomentumPair, ema_update, mlp
from ..objective import MLRConfig, MLRObjective, aux_lr, mlr_loss, total_loss
from ..pixelops import AugmentSpec, augment_batch, prepare_eval


@dataclass(frozen=True)
class SACConfig:
    gamma: float = 0.99
    init_temperature: float = 0.1
    learn_temperature: bool = True
    target_entropy: Optional[float] = None  # defaults to -action_dim
    critic_m: float = 0.99
    encoder_m: float = 0.95
    target_update_freq: int = 2  # critic heads
    encoder_update_freq: int = 1  # momentum encoder and auxiliary momentum heads
    actor_update_freq: int = 2
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-4
    alpha_betas: tuple = (0.5, 0.999)
    batch_size: int = 512
    hidden_dim: int = 1024
    twin: bool = True
    log_std_min: float = -10.0
    log_std_max: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.init_temperature <= 0:
            raise ValueError("temperature must be positive")


def squashed_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log pi(tanh(u)) for u ~ N(mean, exp(log_std)), summed over action dims."""
    normal = -0.5 * ((u - mean) / log_std.exp()) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2) written to stay finite for large |u|
    log_det = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
    return (normal - log_det).sum(-1)


class Actor(nn.Module):
    def __init__(self, latent_dim, action_dim, hidden_dim, log_std_min=-10.0, log_std_max=2.0):
        super().__init__()
        self.net = mlp(latent_dim, hidden_dim, 2 * action_dim)
        self.log_std_min, self.log_std_max = log_std_min, log_std_max

    def dist_params(self, s):
        mean, log_std = self.net(s).chunk(2, dim=-1)
        log_std = torch.tanh(log_std)
        log_std = self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (log_std + 1)
        return mean, log_std

    def forward(self, s, deterministic=False):
        """Returns (action, log_prob, mean_action)."""
        mean, log_std = self.dist_params(s)
        if deterministic:
            return torch.tanh(mean), None, torch.tanh(mean)
        u = mean + log_std.exp() * torch.randn_like(mean)
        return torch.tanh(u), squashed_log_prob(u, mean, log_std), torch.tanh(mean)


class Critic(nn.Module):
    def __init__(self, latent_dim, action_dim, hidden_dim, twin=True):
        super().__init__()
        self.q1 = mlp(latent_dim + action_dim, hidden_dim, 1)
        self.q2 = mlp(latent_dim + action_dim, hidden_dim, 1) if twin else None

    def forward(self, s, a):
        x = torch.cat([s, a], dim=-1)
        q1 = self.q1(x).squeeze(-1)
        q2 = self.q2(x).squeeze(-1) if self.q2 is not None else q1
        return q1, q2


class SACAgent:
    """SAC whose critic shares the encoder with the auxiliary objective.

    ``encoder`` is any module mapping observations to ``encoder.latent_dim``
    features. ``augment=None`` disables image augmentation (non-pixel inputs).
    """

    def __init__(self, cfg: SACConfig, encoder: nn.Module, action_dim: int,
                 augment: Optional[AugmentSpec] = None, mlr: Optional[MLRConfig] = None,
                 source_shape=None):
        self.cfg = cfg
        self.action_dim = action_dim
        self.augment = augment
        d = encoder.latent_dim
        self.encoders = MomentumPair(encoder, cfg.encoder_m)
        self.critics = MomentumPair(Critic(d, action_dim, cfg.hidden_dim, cfg.twin), cfg.critic_m)
        self.actor = Actor(d, action_dim, cfg.hidden_dim, cfg.log_std_min, cfg.log_std_max)
        self.log_alpha = torch.tensor(math.log(cfg.init_temperature), requires_grad=True)
        self.target_entropy = -float(action_dim) if cfg.target_entropy is None else cfg.target_entropy

        self.mlr_cfg = mlr if mlr is not None and mlr.lam > 0 else None
        self.mlr = None
        groups = [{"params": list(self.encoder.parameters()) + list(self.critic.parameters()),
                   "lr": cfg.critic_lr, "name": "rl"}]
        if self.mlr_cfg is not None:
            self.mlr = MLRObjective(self.mlr_cfg, self.encoders, action_dim=action_dim,
                                    source_shape=source_shape)
            groups.append({"params": self.mlr.online_parameters(), "lr": aux_lr(self.mlr_cfg, 1),
                           "name": "aux"})
        self.critic_opt = torch.optim.Adam(groups)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=cfg.alpha_lr, betas=cfg.alpha_betas)
        self.update_step = 0

    @property
    def encoder(self):
        return self.encoders.online

    @property
    def critic(self):
        return self.critics.online

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    # -- acting ----------------------------------------------------------
    def _prep(self, obs: torch.Tensor, rng=None) -> torch.Tensor:
        if self.augment is None:
            return obs
        if rng is None:
            return prepare_eval(obs, self.augment.out_size)
        return augment_batch(obs, self.augment, rng)

    @torch.no_grad()
    def act(self, obs, mode: str = "eval") -> np.ndarray:
        x = torch.as_tensor(np.asarray(obs), dtype=torch.float32)
        if self.augment is not None and x.dim() != 3:
            raise ShapeMismatch(f"expected a single [D, H, W] observation, got {tuple(x.shape)}")
        s = self.encoder(self._prep(x.unsqueeze(0)))
        action, _, _ = self.actor(s, deterministic=mode == "eval")
        return action[0].numpy()

    # -- losses ----------------------------------------------------------
    def critic_loss(self, obs, actions, rewards, next_obs, not_terminal) -> torch.Tensor:
        cfg = self.cfg
        with torch.no_grad():
            s_next = self.encoder(next_obs)
            a_next, logp_next, _ = self.actor(s_next)
            q1t, q2t = self.critics.momentum(self.encoders.momentum(next_obs), a_next)
            v_next = torch.min(q1t, q2t) - self.alpha.detach() * logp_next
            target = rewards + cfg.gamma * not_terminal * v_next
        q1, q2 = self.critic(self.encoder(obs), actions)
        loss = 0.5 * (F.mse_loss(q1, target) + F.mse_loss(q2, target))
        if not torch.isfinite(loss):
            raise NumericalError("critic loss is not finite")
        return loss

    def actor_loss(self, obs):
        with torch.no_grad():
            s = self.encoder(obs)
        a, logp, _ = self.actor(s)
        q1, q2 = self.critic(s, a)
        loss = (self.alpha.detach() * logp - torch.min(q1, q2)).mean()
        if not torch.isfinite(loss):
            raise NumericalError("actor loss is not finite")
        return loss, logp.detach()

    def alpha_loss(self, log_probs: torch.Tensor) -> torch.Tensor:
        return sac_alpha_loss(self.alpha, log_probs, self.target_entropy)

    # -- update ----------------------------------------------------------
    def _tensors(self, batch, aug_rng):
        obs = self._prep(torch.as_tensor(batch.obs), aug_rng)
        next_obs = self._prep(torch.as_tensor(batch.next_obs), aug_rng)
        actions = torch.as_tensor(batch.actions, dtype=torch.float32)
        rewards = torch.as_tensor(batch.rewards, dtype=torch.float32)
        not_terminal = 1.0 - torch.as_tensor(batch.terminals, dtype=torch.float32)
        return obs, actions, rewards, next_obs, not_terminal

    def update(self, buffer, rngs: dict, log=None) -> dict:
        """One learner step. ``rngs`` holds numpy generators 'augment' and 'mask'."""
        cfg = self.cfg
        self.update_step += 1
        metrics = {}
        batch = buffer.sample_batch(cfg.batch_size, prioritized=False)
        obs, actions, rewards, next_obs, not_terminal = self._tensors(batch, rngs.get("augment"))
        rl = self.critic_loss(obs, actions, rewards, next_obs, not_terminal)
        loss = rl
        metrics["rl_loss"] = float(rl.detach())
        if self.mlr is not None:
            lr = aux_lr(self.mlr_cfg, self.update_step)
            for g in self.critic_opt.param_groups:
                if g["name"] == "aux":
                    g["lr"] = lr
            metrics["lr_aux"] = lr
            try:
                traj = buffer.sample_trajectories(self.mlr_cfg.aux_batch, self.mlr_cfg.K, as_uint8=True)
                report = mlr_loss(self.mlr, traj.observations, traj.actions, rngs["mask"], rngs["augment"])
                loss = total_loss(rl, report, self.mlr_cfg.lam)
                metrics["mlr_loss"] = report.loss
            except (InsufficientData, NumericalError) as exc:
                metrics["mlr_skipped"] = str(exc)
        metrics["total_loss"] = float(loss.detach())
        self.critic_opt.zero_grad()
        loss.backward()
        grads = [p.grad.norm() for p in self.mlr.online_parameters() if p.grad is not None] if self.mlr else []
        if grads:
            metrics["grad_norm"] = float(torch.norm(torch.stack(grads)))
        self.critic_opt.step()

        if self.update_step % cfg.actor_update_freq == 0:
            a_loss, logp = self.actor_loss(obs)
            self.actor_opt.zero_grad()
            a_loss.backward()
            self.actor_opt.step()
            metrics["actor_loss"] = float(a_loss.detach())
            if cfg.learn_temperature:
                al = self.alpha_loss(logp)
                self.alpha_opt.zero_grad()
                al.backward()
                self.alpha_opt.step()
            metrics["alpha"] = float(self.alpha.detach())

        self.update_targets()
        return metrics

    def update_targets(self):
        if self.update_step % self.cfg.target_update_freq == 0:
            ema_update(self.critics)
        if self.update_step % self.cfg.encoder_update_freq == 0:
            ema_update(self.encoders)
            if self.mlr is not None:
                self.mlr.momentum_update(self.cfg.encoder_m)

    # -- checkpointing ---------------------------------------------------
    def modules(self) -> dict:
        mods = {"encoder": self.encoders.online, "encoder_target": self.encoders.momentum,
                "critic": self.critics.online, "critic_target": self.critics.momentum,
                "actor": self.actor}
        if self.mlr is not None:
            mods["mlr"] = self.mlr
        return mods

    def state_dict(self) -> dict:
        return {
            "modules": {k: m.state_dict() for k, m in self.modules().items()},
            "log_alpha": self.log_alpha.detach().clone(),
            "critic_opt": self.critic_opt.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "alpha_opt": self.alpha_opt.state_dict(),
            "update_step": self.update_step,
        }

    def load_state_dict(self, state: dict) -> None:
        for k, m in self.modules().items():
            m.load_state_dict(state["modules"][k])
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.alpha_opt.load_state_dict(state["alpha_opt"])
        self.update_step = state["update_step"]


def sac_alpha_loss(alpha: torch.Tensor, log_probs: torch.Tensor, target_entropy: float) -> torch.Tensor:
    """-alpha * (log pi + target_entropy), averaged over the batch."""
    return -(alpha * (log_probs.detach() + target_entropy)).mean()


def sac_critic_loss(agent: SACAgent, batch, aug_rng=None) -> torch.Tensor:
    return agent.critic_loss(*agent._tensors(batch, aug_rng))


def sac_actor_loss(agent: SACAgent, batch, aug_rng=None) -> torch.Tensor:
    obs = agent._prep(torch.as_tensor(batch.obs), aug_rng)
    return agent.actor_loss(obs)[0]
