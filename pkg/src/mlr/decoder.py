"""Transformer latent decoder over interleaved state/action tokens."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import LengthMismatch
from .gradcheck import finite_difference_check


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    width: int = 50
    n_heads: int = 1
    mlp_ratio: float = 2.0
    max_pos: int = 16
    use_action_tokens: bool = True
    positional: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.width < 1:
            raise ValueError("decoder needs at least one layer and positive width")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")


def sinusoidal_table(max_pos: int, width: int) -> np.ndarray:
    """p[pos, 2j] = sin(pos / 10000^(2j/d)), p[pos, 2j+1] = cos(same)."""
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    two_j = np.arange(0, width, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_j / width)
    table = np.zeros((max_pos, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : width // 2])
    return table


class ActionEmbedder(nn.Module):
    def __init__(self, width: int, action_dim: Optional[int] = None, num_actions: Optional[int] = None):
        super().__init__()
        self.discrete = num_actions is not None
        if self.discrete:
            self.embed = nn.Embedding(num_actions, width)
        else:
            self.embed = nn.Linear(action_dim, width)

    def forward(self, actions):
        if self.discrete:
            return self.embed(actions.long())
        return self.embed(actions)


class Attention(nn.Module):
    def __init__(self, width, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (width // n_heads) ** -0.5
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, T, C))


class Block(nn.Module):
    """z = MSA(LN(x)) + x;  x' = MLP(LN(z)) + z."""

    def __init__(self, width, n_heads, mlp_ratio):
        super().__init__()
        hidden = int(round(width * mlp_ratio))
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, n_heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        z = self.attn(self.norm1(x)) + x
        return self.mlp(self.norm2(z)) + z


def layer_parameter_count(width: int, mlp_ratio: float = 2.0, layers: int = 1) -> int:
    """Closed-form size of ``layers`` blocks (bias-free qkv, biased output/MLP)."""
    d, h = width, int(round(width * mlp_ratio))
    per_layer = 3 * d * d + (d * d + d) + 4 * d + (d * h + h) + (h * d + d)
    return layers * per_layer


class LatentDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, action_dim: Optional[int] = None,
                 num_actions: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        if cfg.use_action_tokens:
            if action_dim is None and num_actions is None:
                raise ValueError("action tokens need action_dim or num_actions")
            self.action_embed = ActionEmbedder(cfg.width, action_dim, num_actions)
        else:
            self.action_embed = None
        self.register_buffer("pos_table", torch.tensor(sinusoidal_table(cfg.max_pos, cfg.width),
                                                       dtype=torch.float32), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.layers))

    def layer_parameters(self) -> int:
        return sum(p.numel() for p in self.blocks.parameters())

    def build_tokens(self, states: torch.Tensor, actions: Optional[torch.Tensor] = None) -> torch.Tensor:
        """[B, K, d] states (+ [B, K, ...] actions) -> [B, T, d] tokens.

        With action tokens the order is s_0, a_0, s_1, a_1, ...; both tokens of a
        timestep receive the same positional row.
        """
        B, K, d = states.shape
        use_actions = self.cfg.use_action_tokens
        if use_actions and (actions is None or actions.shape[:2] != (B, K)):
            raise LengthMismatch(f"need {K} actions per sequence to pair with states")
        if K > self.cfg.max_pos and self.cfg.positional:
            raise LengthMismatch(f"sequence length {K} exceeds positional table ({self.cfg.max_pos})")
        pos = self.pos_table[:K].to(states.dtype) if self.cfg.positional else states.new_zeros(K, d)
        s_tok = states + pos
        if not use_actions:
            return s_tok
        a_tok = self.action_embed(actions).to(states.dtype) + pos
        return torch.stack([s_tok, a_tok], dim=2).reshape(B, 2 * K, d)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for blk in self.blocks:
            x = blk(x)
        return x[:, 0::2] if self.cfg.use_action_tokens else x

    def forward(self, states, actions=None):
        return self.decode(self.build_tokens(states, actions))


def zero_residual_branches(decoder: LatentDecoder) -> None:
    """Zero every attention/MLP weight so each block reduces to its skip path."""
    with torch.no_grad():
        for blk in decoder.blocks:
            for p in list(blk.attn.parameters()) + list(blk.mlp.parameters()):
                p.zero_()


def gradcheck_decoder(cfg: DecoderConfig, sample, seed: int = 0, eps: float = 1e-5,
                      linear: bool = False, wrt_params: bool = True) -> float:
    """Max normwise relative error between autograd and central differences.

    ``sample`` is ``(states, actions)``. The scalar loss is a fixed random
    projection of the decoded states. ``linear=True`` zeroes the residual
    branches, leaving an exactly linear map of the inputs.
    """
    states, actions = sample
    torch.manual_seed(seed)
    action_dim = None if actions is None or actions.dtype in (torch.int64, torch.int32) else actions.shape[-1]
    num_actions = int(actions.max()) + 1 if action_dim is None and actions is not None else None
    dec = LatentDecoder(cfg, action_dim=action_dim, num_actions=num_actions).double()
    if linear:
        zero_residual_branches(dec)
    states = states.detach().double().clone().requires_grad_(True)
    if actions is not None and actions.is_floating_point():
        actions = actions.double()
    g = torch.Generator().manual_seed(seed + 1)
    weights = torch.randn(states.shape[0], states.shape[1], cfg.width, generator=g, dtype=torch.float64)

    def loss():
        return (dec(states, actions) * weights).sum()

    tensors = [states]
    if wrt_params and not linear:
        tensors += [p for p in dec.parameters()]
    return finite_difference_check(loss, tensors, eps=eps)
