"""Mask-based latent reconstruction as an auxiliary loss.

The online branch masks a K-step observation window, augments it, encodes
every frame, passes the latents (with action tokens) through the latent
decoder and then the projection and prediction heads. The target branch
augments the unmasked window independently and runs it through the momentum
encoder and momentum projection with no gradient. The loss is one minus the
mean per-step cosine similarity.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import DecoderConfig, LatentDecoder
from .errors import InsufficientData, NumericalError
from .nets import Encoder, HeadConfig, Heads, MomentumPair, ema_update
from .pixelops import (AugmentSpec, CubeMaskSpec, augment_batch, batch_pixel_masks, feature_cell,
                       mask_tensor, prepare_eval)

log = logging.getLogger(__name__)


class TargetSpace(str, Enum):
    LATENT = "latent"
    PIXEL = "pixel"


class LossMetric(str, Enum):
    COSINE = "cosine"
    MSE = "mse"


class MaskSpace(str, Enum):
    PIXEL = "pixel"
    FEATURE = "feature"


@dataclass(frozen=True)
class MLRConfig:
    lam: float = 1.0
    K: int = 16
    mask: CubeMaskSpec = field(default_factory=CubeMaskSpec)
    target_space: TargetSpace = TargetSpace.LATENT
    loss_metric: LossMetric = LossMetric.COSINE
    use_action_tokens: bool = True
    momentum_decoder: bool = False
    mask_space: MaskSpace = MaskSpace.PIXEL
    heads: HeadConfig = field(default_factory=HeadConfig)
    decoder_layers: int = 2
    decoder_heads: int = 1
    decoder_mlp_ratio: float = 2.0
    positional: bool = True
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    warmup_steps: int = 6000
    warmup_normalize: bool = False
    lr: float = 5e-4
    aux_batch: int = 128

    def __post_init__(self):
        for name, enum in (("target_space", TargetSpace), ("loss_metric", LossMetric),
                           ("mask_space", MaskSpace)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        if self.lam < 0:
            raise ValueError("loss weight must be non-negative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")

    def decoder_config(self, width: int) -> DecoderConfig:
        return DecoderConfig(layers=self.decoder_layers, width=width, n_heads=self.decoder_heads,
                             mlp_ratio=self.decoder_mlp_ratio, max_pos=self.K,
                             use_action_tokens=self.use_action_tokens, positional=self.positional)


@dataclass
class MLRLossReport:
    loss: float
    per_step_similarities: np.ndarray
    grad_norm: float = float("nan")
    tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)


class PixelHead(nn.Module):
    """Latent -> pixels through three transposed convolutions (MLR-Pixel)."""

    def __init__(self, latent_dim: int, feature_shape, out_shape):
        super().__init__()
        C, Hf, Wf = feature_shape
        self.out_shape = tuple(out_shape)
        self.fc = nn.Linear(latent_dim, C * Hf * Wf)
        self.fshape = (C, Hf, Wf)
        self.deconvs = nn.Sequential(
            nn.ConvTranspose2d(C, C, 3, stride=1), nn.ReLU(),
            nn.ConvTranspose2d(C, C, 3, stride=1), nn.ReLU(),
            nn.ConvTranspose2d(C, out_shape[0], 3, stride=2, output_padding=1),
        )

    def forward(self, s):
        h = torch.relu(self.fc(s)).view(-1, *self.fshape)
        x = self.deconvs(h)
        x = F.interpolate(x, size=self.out_shape[1:], mode="bilinear", align_corners=False)
        return torch.sigmoid(x)


def warmup_lr(lr0: float, step: int, warmup_steps: int) -> float:
    """lr0 * min(step^-0.5, step * warmup_steps^-1.5)."""
    if step < 1:
        raise ValueError("warmup schedule is defined for step >= 1")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    return lr0 * min(step ** -0.5, step * warmup_steps ** -1.5)


def aux_lr(cfg: MLRConfig, step: int) -> float:
    """Learning rate of the auxiliary parameter group at optimizer step ``step``."""
    if cfg.warmup_steps == 0:
        return cfg.lr
    lr = warmup_lr(cfg.lr, max(step, 1), cfg.warmup_steps)
    return lr * math.sqrt(cfg.warmup_steps) if cfg.warmup_normalize else lr


def total_loss(rl_loss, mlr, lam: float):
    """rl_loss + lam * mlr_loss; works on floats or tensors."""
    value = mlr.tensor if isinstance(mlr, MLRLossReport) and isinstance(rl_loss, torch.Tensor) else (
        mlr.loss if isinstance(mlr, MLRLossReport) else mlr)
    out = rl_loss + lam * value if lam != 0 else rl_loss
    check = out.detach() if isinstance(out, torch.Tensor) else torch.tensor(float(out))
    if not torch.isfinite(check).all():
        raise NumericalError(f"total loss is not finite: {check}")
    return out


class MLRObjective(nn.Module):
    """Auxiliary networks (decoder, heads, momentum copies) and the loss.

    The encoder and its momentum copy are owned by the agent and passed in;
    they are not registered as submodules here so the agent's optimizer
    grouping stays in charge of them.
    """

    def __init__(self, cfg: MLRConfig, encoder_pair: MomentumPair, action_dim: Optional[int] = None,
                 num_actions: Optional[int] = None, source_shape=None):
        super().__init__()
        self.cfg = cfg
        self._encoders = encoder_pair  # plain attribute: not a submodule
        enc: Encoder = encoder_pair.online
        d = enc.latent_dim
        self.decoder = LatentDecoder(cfg.decoder_config(d), action_dim=action_dim, num_actions=num_actions)
        self.heads = Heads(d, cfg.heads)
        m = encoder_pair.m
        self.projection_pair = MomentumPair(self.heads.projection, m)
        self.momentum_projection = self.projection_pair.momentum
        self.decoder_pair = MomentumPair(self.decoder, m) if cfg.momentum_decoder else None
        if self.decoder_pair is not None:
            self.momentum_decoder = self.decoder_pair.momentum
        if cfg.target_space is TargetSpace.PIXEL:
            src = tuple(source_shape) if source_shape is not None else enc.cfg.obs_shape
            self.pixel_head = PixelHead(d, enc.feature_shape, src)
        else:
            self.pixel_head = None

    @property
    def encoder(self) -> Encoder:
        return self._encoders.online

    @property
    def momentum_encoder(self) -> Encoder:
        return self._encoders.momentum

    def online_parameters(self):
        """Parameters trained by the auxiliary loss, excluding the shared encoder."""
        mods = [self.decoder, self.heads]
        if self.pixel_head is not None:
            mods.append(self.pixel_head)
        return [p for mod in mods for p in mod.parameters()]

    def momentum_update(self, m: Optional[float] = None) -> None:
        ema_update(self.projection_pair, m)
        if self.decoder_pair is not None:
            ema_update(self.decoder_pair, m)

    def sync_momentum(self) -> None:
        self.momentum_update(0.0)

    def _online_latents(self, obs, B, K, mask_rng, aug_rng):
        cfg, enc = self.cfg, self.encoder
        H, W = obs.shape[-2:]
        if cfg.mask_space is MaskSpace.PIXEL:
            masks = batch_pixel_masks(cfg.mask, B, K, H, W, mask_rng)
            view = augment_batch(mask_tensor(obs, masks, cfg.mask.fill_value), cfg.augment, aug_rng)
            return enc(view)
        view = augment_batch(obs, cfg.augment, aug_rng)
        fmap = enc.trunk(view.reshape(B * K, *view.shape[2:]))
        Hf, Wf = fmap.shape[-2:]
        fspec = feature_cell(cfg.mask, tuple(view.shape[-2:]), (Hf, Wf))
        masks = batch_pixel_masks(fspec, B, K, Hf, Wf, mask_rng)
        fmap = mask_tensor(fmap.reshape(B, K, *fmap.shape[1:]), masks, cfg.mask.fill_value)
        return enc.head(fmap.reshape(B * K, *fmap.shape[2:])).reshape(B, K, -1)

    def forward(self, obs: torch.Tensor, actions: torch.Tensor, mask_rng: np.random.Generator,
                aug_rng: np.random.Generator) -> MLRLossReport:
        return mlr_loss(self, obs, actions, mask_rng, aug_rng)


def _as_pixels(obs, dtype) -> torch.Tensor:
    obs = torch.as_tensor(obs)
    if obs.dtype == torch.uint8:
        return obs.to(dtype) / 255.0
    return obs.to(dtype)


def mlr_loss(obj: MLRObjective, obs, actions, mask_rng: np.random.Generator,
             aug_rng: np.random.Generator) -> MLRLossReport:
    """Loss on a batch of windows ``obs [B, K, D, H, W]`` with ``actions [B, K, ...]``."""
    cfg = obj.cfg
    dtype = next(obj.encoder.parameters()).dtype
    obs = _as_pixels(obs, dtype)
    actions = torch.as_tensor(actions)
    if actions.is_floating_point():
        actions = actions.to(dtype)
    B, K = obs.shape[:2]
    if K != cfg.K:
        raise InsufficientData(f"window length {K} differs from configured K={cfg.K}")

    s_tilde = obj._online_latents(obs, B, K, mask_rng, aug_rng)
    s_hat = obj.decoder(s_tilde, actions)

    if cfg.target_space is TargetSpace.PIXEL:
        # target: the unmasked, unaugmented window, center-cropped to the head's resolution
        source = prepare_eval(obs, obj.pixel_head.out_shape[1:])
        recon = obj.pixel_head(s_hat.reshape(B * K, -1)).reshape(source.shape)
        loss = F.mse_loss(recon, source)
        sims = F.cosine_similarity(recon.flatten(2), source.flatten(2), dim=-1)
    else:
        pred = obj.heads.prediction(obj.heads.projection(s_hat))
        with torch.no_grad():
            target_view = augment_batch(obs, cfg.augment, aug_rng)
            s_bar = obj.momentum_encoder(target_view)
            if obj.decoder_pair is not None:
                s_bar = obj.momentum_decoder(s_bar, actions)
            target = obj.momentum_projection(s_bar)
        sims = F.cosine_similarity(pred, target, dim=-1)
        if cfg.loss_metric is LossMetric.COSINE:
            loss = 1.0 - sims.mean()
        else:
            loss = F.mse_loss(pred, target)
    if not torch.isfinite(loss):
        raise NumericalError("auxiliary loss is not finite")
    return MLRLossReport(loss=float(loss.detach()),
                         per_step_similarities=sims.detach().mean(0).cpu().numpy(),
                         tensor=loss)


def build_objective(cfg: MLRConfig, encoder: Encoder, m: float, action_dim=None, num_actions=None,
                    source_shape=None) -> MLRObjective:
    """Standalone objective with its own momentum encoder (pretraining, tests)."""
    return MLRObjective(cfg, MomentumPair(encoder, m), action_dim=action_dim,
                        num_actions=num_actions, source_shape=source_shape)


def pretrain_only(obj: MLRObjective, buffer, steps: int, seed: int = 0, batch_size: Optional[int] = None,
                  encoder_lr: Optional[float] = None, ema_every: int = 1, callback=None) -> dict:
    """Optimise the auxiliary loss alone for ``steps`` updates.

    Returns the encoder's state dict for initialising a downstream agent.
    """
    cfg = obj.cfg
    batch_size = batch_size or cfg.aux_batch
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    mask_rng, aug_rng = rngs
    opt = torch.optim.Adam([
        {"params": list(obj.encoder.parameters()), "lr": encoder_lr or cfg.lr},
        {"params": obj.online_parameters(), "lr": cfg.lr},
    ])
    for step in range(1, steps + 1):
        lr = aux_lr(cfg, step)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = buffer.sample_trajectories(batch_size, cfg.K, as_uint8=True)
        report = mlr_loss(obj, batch.observations, batch.actions, mask_rng, aug_rng)
        opt.zero_grad()
        report.tensor.backward()
        opt.step()
        if step % ema_every == 0:
            ema_update(obj._encoders)
            obj.momentum_update()
        if callback is not None:
            callback(step, report)
    return {k: v.detach().clone() for k, v in obj.encoder.state_dict().items()}


@torch.no_grad()
def regression_accuracy(encoder: Encoder, buffer, n: int, mask: CubeMaskSpec, K: int,
                        rng: np.random.Generator, out_size=None) -> float:
    """Mean cosine similarity between latents of masked and unmasked frames."""
    if len(buffer.valid_starts(K)) == 0:
        raise InsufficientData(f"no window of length {K} to evaluate")
    n_seq = max(1, math.ceil(n / K))
    batch = buffer.sample_trajectories(n_seq, K)
    obs = torch.as_tensor(batch.observations)
    H, W = obs.shape[-2:]
    masks = batch_pixel_masks(mask, n_seq, K, H, W, rng)
    masked = mask_tensor(obs, masks, mask.fill_value)
    out_size = out_size or encoder.cfg.obs_shape[1:]
    a = encoder(prepare_eval(masked, out_size)).reshape(-1, encoder.latent_dim)[:n]
    b = encoder(prepare_eval(obs, out_size)).reshape(-1, encoder.latent_dim)[:n]
    return float(F.cosine_similarity(a, b, dim=-1).mean())


def with_overrides(cfg: MLRConfig, **kw) -> MLRConfig:
    return replace(cfg, **kw)
