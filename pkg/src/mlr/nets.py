"""Pixel encoders, BYOL-style heads and momentum (EMA) parameter copies."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ShapeMismatch

PARAM_FORMAT_VERSION = 1


class EncoderVariant(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class EncoderConfig:
    variant: EncoderVariant = EncoderVariant.CONTINUOUS
    obs_shape: Tuple[int, int, int] = (9, 84, 84)
    latent_dim: int = 50
    num_filters: int = 32

    def __post_init__(self):
        object.__setattr__(self, "variant", EncoderVariant(self.variant))
        object.__setattr__(self, "obs_shape", tuple(self.obs_shape))


class Encoder(nn.Module):
    """Conv trunk followed by a flatten-and-project head.

    ``trunk`` and ``head`` are exposed separately so masks can be applied to
    the intermediate feature maps.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.obs_shape[0]
        if cfg.variant is EncoderVariant.CONTINUOUS:
            f = cfg.num_filters
            layers = [nn.Conv2d(D, f, 3, stride=2), nn.ReLU()]
            for _ in range(3):
                layers += [nn.Conv2d(f, f, 3, stride=1), nn.ReLU()]
        else:
            layers = [nn.Conv2d(D, 32, 8, stride=4), nn.ReLU(),
                      nn.Conv2d(32, 64, 4, stride=2), nn.ReLU(),
                      nn.Conv2d(64, 64, 3, stride=1), nn.ReLU()]
        self.convs = nn.Sequential(*layers)
        try:
            with torch.no_grad():
                fmap = self.convs(torch.zeros(1, *cfg.obs_shape))
        except RuntimeError as exc:
            raise ShapeMismatch(f"input {cfg.obs_shape} too small for the conv stack") from exc
        self.feature_shape = tuple(fmap.shape[1:])
        flat = int(fmap[0].numel())
        if cfg.variant is EncoderVariant.CONTINUOUS:
            self.proj = nn.Sequential(nn.Linear(flat, cfg.latent_dim), nn.LayerNorm(cfg.latent_dim))
        else:
            self.proj = nn.Linear(flat, cfg.latent_dim)
        self.latent_dim = cfg.latent_dim

    def trunk(self, obs: torch.Tensor) -> torch.Tensor:
        if tuple(obs.shape[-3:]) != self.cfg.obs_shape:
            raise ShapeMismatch(f"expected {self.cfg.obs_shape}, got {tuple(obs.shape[-3:])}")
        return self.convs(obs)

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.proj(fmap.flatten(1))

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        lead = obs.shape[:-3]
        out = self.head(self.trunk(obs.reshape(-1, *obs.shape[-3:])))
        return out.reshape(*lead, -1)


def encode(encoder: Encoder, obs) -> torch.Tensor:
    obs = torch.as_tensor(obs, dtype=next(encoder.parameters()).dtype)
    single = obs.dim() == 3
    out = encoder(obs.unsqueeze(0) if single else obs)
    return out[0] if single else out


@dataclass(frozen=True)
class HeadConfig:
    projection: bool = True
    prediction: bool = True
    projection_dim: int = 128
    hidden_dim: int = 256


class ProjectionHead(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))

    def forward(self, x):
        return self.net(x)


class Heads(nn.Module):
    """Online projection g and prediction q; disabled heads are identities."""

    def __init__(self, latent_dim: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        out = cfg.projection_dim if cfg.projection else latent_dim
        self.projection = ProjectionHead(latent_dim, cfg.hidden_dim, out) if cfg.projection else nn.Identity()
        self.prediction = nn.Linear(out, out) if cfg.prediction else nn.Identity()
        self.out_dim = out


class MomentumPair:
    """An online module and an EMA copy of it that never receives gradients."""

    def __init__(self, online: nn.Module, m: float):
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"EMA coefficient {m} outside [0, 1]")
        self.online = online
        self.momentum = copy.deepcopy(online)
        for p in self.momentum.parameters():
            p.requires_grad_(False)
        self.m = m

    def sync(self) -> None:
        ema_update(self, m=0.0)


@torch.no_grad()
def ema_update(pair: MomentumPair, m: float = None) -> None:
    """momentum <- m * momentum + (1 - m) * online, parameter by parameter."""
    m = pair.m if m is None else m
    online = list(pair.online.parameters())
    target = list(pair.momentum.parameters())
    if len(online) != len(target):
        raise ShapeMismatch("online and momentum modules differ in structure")
    for po, pm in zip(online, target):
        if po.shape != pm.shape:
            raise ShapeMismatch(f"parameter shapes differ: {tuple(po.shape)} vs {tuple(pm.shape)}")
        if m == 0.0:
            pm.copy_(po)
        elif m != 1.0:
            pm.mul_(m).add_(po, alpha=1.0 - m)
    for bo, bm in zip(pair.online.buffers(), pair.momentum.buffers()):
        bm.copy_(bo)


def project_predict(heads: Heads, s: torch.Tensor, branch: str = "online",
                    momentum_projection: nn.Module = None) -> torch.Tensor:
    """ONLINE: q(g(s)). TARGET: g_bar(s) with the gradient path cut."""
    if branch.lower() == "online":
        return heads.prediction(heads.projection(s))
    proj = momentum_projection if momentum_projection is not None else heads.projection
    with torch.no_grad():
        return proj(s.detach())


def save_params(module: nn.Module, path) -> None:
    state = module.state_dict()
    torch.save({
        "version": PARAM_FORMAT_VERSION,
        "params": {k: v.detach().cpu() for k, v in state.items()},
        "shapes": {k: list(v.shape) for k, v in state.items()},
    }, path)


def load_params(module: nn.Module, path) -> None:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != PARAM_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format {blob.get('version')}")
    own = module.state_dict()
    for k, shape in blob["shapes"].items():
        if k in own and list(own[k].shape) != shape:
            raise ShapeMismatch(f"{k}: checkpoint {shape} vs module {list(own[k].shape)}")
    module.load_state_dict(blob["params"])


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def mlp(in_dim: int, hidden: int, out_dim: int, depth: int = 2) -> nn.Sequential:
    layers, d = [], in_dim
    for _ in range(depth):
        layers += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def conv_output_hw(hw: Sequence[int], variant: EncoderVariant) -> Tuple[int, int]:
    enc = Encoder(EncoderConfig(variant=variant, obs_shape=(1, *hw), latent_dim=1))
    return enc.feature_shape[1:]
