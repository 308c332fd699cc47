"""Distributional Rainbow (data-efficient settings) with the MLR auxiliary loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InsufficientData, NumericalError
from ..nets import MomentumPair, ema_update
from ..objective import MLRConfig, MLRObjective, aux_lr, mlr_loss, total_loss
from ..pixelops import AugmentSpec, augment_batch, prepare_eval


@dataclass(frozen=True)
class RainbowConfig:
    atoms: int = 51
    v_min: float = -10.0
    v_max: float = 10.0
    multi_step: int = 10
    gamma: float = 0.99
    double_q: bool = True
    dueling: bool = True
    noisy: bool = True
    noisy_sigma: float = 0.5
    hidden_dim: int = 256
    lr: float = 1e-4
    adam_eps: float = 1.5e-4
    batch_size: int = 32
    max_grad_norm: float = 10.0
    prioritized: bool = True
    priority_exponent: float = 0.5
    priority_weight: float = 0.4  # IS exponent at the start, annealed to 1
    priority_eps: float = 1e-6
    target_update_period: int = 1
    target_m: float = 0.0
    encoder_m: float = 0.0
    updates_per_step: int = 2
    min_replay: int = 2000

    def __post_init__(self):
        if self.atoms < 2 or self.v_max <= self.v_min:
            raise ValueError("need at least two atoms on a non-empty support")
        if self.multi_step < 1:
            raise ValueError("multi_step must be >= 1")

    def support(self) -> torch.Tensor:
        return torch.linspace(self.v_min, self.v_max, self.atoms)


class NoisyLinear(nn.Module):
    """Linear layer with factorised Gaussian parameter noise.

    A fresh noise sample is drawn on every forward pass in training mode; in
    eval mode the layer uses its mean weights.
    """

    def __init__(self, in_features, out_features, sigma0=0.5):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight_mu = nn.Parameter(torch.empty(out_features, in_features).uniform_(-bound, bound))
        self.bias_mu = nn.Parameter(torch.empty(out_features).uniform_(-bound, bound))
        self.weight_sigma = nn.Parameter(torch.full((out_features, in_features), sigma0 * bound))
        self.bias_sigma = nn.Parameter(torch.full((out_features,), sigma0 * bound))

    @staticmethod
    def _f(x):
        return x.sign() * x.abs().sqrt()

    def forward(self, x):
        if not self.training:
            return F.linear(x, self.weight_mu, self.bias_mu)
        eps_in = self._f(torch.randn(self.in_features, device=x.device, dtype=x.dtype))
        eps_out = self._f(torch.randn(self.out_features, device=x.device, dtype=x.dtype))
        weight = self.weight_mu + self.weight_sigma * torch.outer(eps_out, eps_in)
        bias = self.bias_mu + self.bias_sigma * eps_out
        return F.linear(x, weight, bias)


class DistributionalHead(nn.Module):
    """Latent -> log-probabilities over atoms for every action, [B, A, atoms]."""

    def __init__(self, latent_dim, num_actions, cfg: RainbowConfig):
        super().__init__()
        self.num_actions, self.atoms, self.dueling = num_actions, cfg.atoms, cfg.dueling

        def layer(i, o):
            return NoisyLinear(i, o, cfg.noisy_sigma) if cfg.noisy else nn.Linear(i, o)

        self.advantage = nn.Sequential(layer(latent_dim, cfg.hidden_dim), nn.ReLU(),
                                       layer(cfg.hidden_dim, num_actions * cfg.atoms))
        if cfg.dueling:
            self.value = nn.Sequential(layer(latent_dim, cfg.hidden_dim), nn.ReLU(),
                                       layer(cfg.hidden_dim, cfg.atoms))

    def forward(self, s):
        adv = self.advantage(s).view(-1, self.num_actions, self.atoms)
        if self.dueling:
            logits = self.value(s).unsqueeze(1) + adv - adv.mean(1, keepdim=True)
        else:
            logits = adv
        return F.log_softmax(logits, dim=-1)


def project_distribution(probs: torch.Tensor, returns: torch.Tensor, discounts: torch.Tensor,
                         support: torch.Tensor) -> torch.Tensor:
    """Project ``returns + discounts * z`` (with probabilities ``probs``) back onto ``support``.

    probs: [B, N]; returns, discounts: [B]; support: [N] evenly spaced.
    """
    v_min, v_max = float(support[0]), float(support[-1])
    n = support.numel()
    dz = (v_max - v_min) / (n - 1)
    tz = (returns[:, None] + discounts[:, None] * support[None, :]).clamp(v_min, v_max)
    b = (tz - v_min) / dz
    lo, hi = b.floor().long(), b.ceil().long()
    w_lo = (hi.to(b.dtype) - b) + (lo == hi).to(b.dtype)
    w_hi = b - lo.to(b.dtype)
    out = torch.zeros_like(probs)
    out.scatter_add_(1, lo, probs * w_lo)
    out.scatter_add_(1, hi, probs * w_hi)
    return out


def expected_q(log_probs: torch.Tensor, support: torch.Tensor) -> torch.Tensor:
    return (log_probs.exp() * support).sum(-1)


class RainbowAgent:
    def __init__(self, cfg: RainbowConfig, encoder: nn.Module, num_actions: int,
                 augment: Optional[AugmentSpec] = None, mlr: Optional[MLRConfig] = None,
                 source_shape=None):
        self.cfg = cfg
        self.num_actions = num_actions
        self.augment = augment
        self.encoders = MomentumPair(encoder, cfg.encoder_m)
        self.heads = MomentumPair(DistributionalHead(encoder.latent_dim, num_actions, cfg), cfg.target_m)
        self.heads.momentum.train()
        self.support = cfg.support()
        self.mlr_cfg = mlr if mlr is not None and mlr.lam > 0 else None
        self.mlr = None
        groups = [{"params": list(self.encoder.parameters()) + list(self.head.parameters()),
                   "lr": cfg.lr, "name": "rl"}]
        if self.mlr_cfg is not None:
            self.mlr = MLRObjective(self.mlr_cfg, self.encoders, num_actions=num_actions,
                                    source_shape=source_shape)
            groups.append({"params": self.mlr.online_parameters(), "lr": aux_lr(self.mlr_cfg, 1),
                           "name": "aux"})
        self.optimizer = torch.optim.Adam(groups, eps=cfg.adam_eps)
        self.update_step = 0

    @property
    def encoder(self):
        return self.encoders.online

    @property
    def head(self):
        return self.heads.online

    def q_values(self, obs: torch.Tensor) -> torch.Tensor:
        return expected_q(self.head(self.encoder(obs)), self.support)

    def _prep(self, obs, rng=None):
        if self.augment is None:
            return obs
        if rng is None:
            return prepare_eval(obs, self.augment.out_size)
        return augment_batch(obs, self.augment, rng)

    @torch.no_grad()
    def act(self, obs, mode: str = "eval") -> int:
        """Greedy action; in train mode the noisy layers perturb the choice."""
        x = torch.as_tensor(np.asarray(obs), dtype=torch.float32).unsqueeze(0)
        self.head.train(mode == "train")
        try:
            q = self.q_values(self._prep(x))
        finally:
            self.head.train(True)
        return int(q.argmax(-1)[0])

    def beta(self, step: int, total_steps: int) -> float:
        frac = min(1.0, step / max(1, total_steps))
        return self.cfg.priority_weight + frac * (1.0 - self.cfg.priority_weight)

    def loss(self, obs, actions, returns, next_obs, discounts):
        """Per-item cross-entropy between the projected target and the prediction."""
        cfg = self.cfg
        with torch.no_grad():
            next_online = self.head(self.encoder(next_obs))
            next_target = self.heads.momentum(self.encoders.momentum(next_obs))
            chooser = next_online if cfg.double_q else next_target
            a_star = expected_q(chooser, self.support).argmax(-1)
            p_next = next_target.exp()[torch.arange(len(a_star)), a_star]
            target = project_distribution(p_next, returns, discounts, self.support)
        log_p = self.head(self.encoder(obs))[torch.arange(len(actions)), actions]
        per_item = -(target * log_p).sum(-1)
        return per_item

    def update(self, buffer, rngs: dict, beta: float = 1.0) -> dict:
        cfg = self.cfg
        self.update_step += 1
        metrics = {}
        idx, weights = buffer.sample_indices(cfg.batch_size, prioritized=cfg.prioritized, beta=beta)
        batch = buffer.gather(idx, weights)
        returns, next_obs, discounts = buffer.n_step(idx, cfg.multi_step, cfg.gamma)
        aug = rngs.get("augment")
        obs = self._prep(torch.as_tensor(batch.obs), aug)
        next_obs = self._prep(torch.as_tensor(next_obs), aug)
        actions = torch.as_tensor(batch.actions).long().view(-1)
        per_item = self.loss(obs, actions, torch.as_tensor(returns, dtype=torch.float32), next_obs,
                             torch.as_tensor(discounts, dtype=torch.float32))
        w = torch.as_tensor(weights, dtype=torch.float32)
        rl = (w * per_item).mean()
        if not torch.isfinite(rl):
            raise NumericalError("distributional loss is not finite")
        metrics["rl_loss"] = float(rl.detach())
        loss = rl
        if self.mlr is not None:
            lr = aux_lr(self.mlr_cfg, self.update_step)
            for g in self.optimizer.param_groups:
                if g["name"] == "aux":
                    g["lr"] = lr
            metrics["lr_aux"] = lr
            try:
                traj = buffer.sample_trajectories(self.mlr_cfg.aux_batch, self.mlr_cfg.K, as_uint8=True)
                report = mlr_loss(self.mlr, traj.observations, traj.actions.reshape(traj.actions.shape[:2]),
                                  rngs["mask"], rngs["augment"])
                loss = total_loss(rl, report, self.mlr_cfg.lam)
                metrics["mlr_loss"] = report.loss
            except (InsufficientData, NumericalError) as exc:
                metrics["mlr_skipped"] = str(exc)
        metrics["total_loss"] = float(loss.detach())
        self.optimizer.zero_grad()
        loss.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        metrics["grad_norm"] = float(nn.utils.clip_grad_norm_(params, cfg.max_grad_norm))
        self.optimizer.step()
        if cfg.prioritized:
            buffer.update_priorities(idx, per_item.detach().numpy() + cfg.priority_eps)
        if self.update_step % cfg.target_update_period == 0:
            self.update_targets()
        return metrics

    def update_targets(self):
        ema_update(self.heads)
        ema_update(self.encoders)
        if self.mlr is not None:
            self.mlr.momentum_update(self.cfg.encoder_m)

    def modules(self) -> dict:
        mods = {"encoder": self.encoders.online, "encoder_target": self.encoders.momentum,
                "head": self.heads.online, "head_target": self.heads.momentum}
        if self.mlr is not None:
            mods["mlr"] = self.mlr
        return mods

    def state_dict(self) -> dict:
        return {"modules": {k: m.state_dict() for k, m in self.modules().items()},
                "optimizer": self.optimizer.state_dict(), "update_step": self.update_step}

    def load_state_dict(self, state: dict) -> None:
        for k, m in self.modules().items():
            m.load_state_dict(state["modules"][k])
        self.optimizer.load_state_dict(state["optimizer"])
        self.update_step = state["update_step"]


def rainbow_loss(agent: RainbowAgent, batch, returns, next_obs, discounts, aug_rng=None):
    """Per-item distributional losses and the priorities derived from them."""
    obs = agent._prep(torch.as_tensor(batch.obs), aug_rng)
    nxt = agent._prep(torch.as_tensor(next_obs), aug_rng)
    per_item = agent.loss(obs, torch.as_tensor(batch.actions).long().view(-1),
                          torch.as_tensor(returns, dtype=torch.float32), nxt,
                          torch.as_tensor(discounts, dtype=torch.float32))
    if not torch.isfinite(per_item).all():
        raise NumericalError("distributional loss is not finite")
    return per_item, per_item.detach().numpy() + agent.cfg.priority_eps
