"""Space-time cube masking and image augmentation for observation sequences.

A sequence is an array ``[K, D, H, W]`` (or a batch ``[B, K, D, H, W]``).
Masks are sampled on a coarse grid of non-overlapping ``k x h x w`` cells and
expanded to pixels; cells on the far boundary are truncated to the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
import torch

from .errors import InvalidSpec, ShapeMismatch


class MaskStrategy(str, Enum):
    CUBE = "cube"
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    FEATURE = "feature"


@dataclass(frozen=True)
class CubeMaskSpec:
    k: int = 8
    h: int = 10
    w: int = 10
    eta: float = 0.5
    strategy: MaskStrategy = MaskStrategy.CUBE
    fill_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "strategy", MaskStrategy(self.strategy))
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidSpec(f"mask ratio {self.eta} outside [0, 1]")
        if min(self.k, self.h, self.w) < 1:
            raise InvalidSpec("cube extents must be >= 1")

    def validate(self, K: int, H: int, W: int) -> None:
        if self.k > K or self.h > H or self.w > W:
            raise InvalidSpec(f"cube {self.k}x{self.h}x{self.w} exceeds sequence {K}x{H}x{W}")


@dataclass
class MaskPlan:
    grid: np.ndarray  # bool [gK, gH, gW], True = masked
    pixel_mask: np.ndarray  # bool [K, H, W]
    cell: Tuple[int, int, int]  # (k, h, w) actually used for expansion

    @property
    def masked_cells(self) -> int:
        return int(self.grid.sum())


def masked_count(eta: float, n_cells: int) -> int:
    # round half up; Python's round() would send 0.5 to the even neighbour
    return int(math.floor(eta * n_cells + 0.5))


def expand_grid(grid: np.ndarray, cell: Tuple[int, int, int], shape: Tuple[int, int, int]) -> np.ndarray:
    k, h, w = cell
    K, H, W = shape
    return grid.repeat(k, 0).repeat(h, 1).repeat(w, 2)[:K, :H, :W]


def _choose(rng: np.random.Generator, n_cells: int, n_masked: int) -> np.ndarray:
    flat = np.zeros(n_cells, dtype=bool)
    flat[rng.choice(n_cells, size=n_masked, replace=False)] = True
    return flat


def sample_mask(spec: CubeMaskSpec, K: int, H: int, W: int, rng: np.random.Generator) -> MaskPlan:
    """Sample a mask plan for a ``K x H x W`` sequence.

    CUBE and FEATURE mask ``round(eta * N)`` of all N cells without replacement.
    SPATIAL uses single-frame cells and masks ``round(eta * cells_per_frame)``
    patches in each frame independently. TEMPORAL masks whole frames in
    segments of ``k`` steps. For FEATURE, pass the feature-map extents as
    ``H, W``; the cell size is scaled by the caller (see ``feature_cell``).
    """
    spec.validate(K, H, W)
    if spec.strategy in (MaskStrategy.CUBE, MaskStrategy.FEATURE):
        cell = (spec.k, spec.h, spec.w)
    elif spec.strategy is MaskStrategy.SPATIAL:
        cell = (1, spec.h, spec.w)
    else:
        cell = (spec.k, H, W)
    gshape = (math.ceil(K / cell[0]), math.ceil(H / cell[1]), math.ceil(W / cell[2]))
    if spec.strategy is MaskStrategy.SPATIAL:
        per_frame = gshape[1] * gshape[2]
        m = masked_count(spec.eta, per_frame)
        grid = np.stack([_choose(rng, per_frame, m) for _ in range(gshape[0])]).reshape(gshape)
    else:
        n = int(np.prod(gshape))
        grid = _choose(rng, n, masked_count(spec.eta, n)).reshape(gshape)
    return MaskPlan(grid=grid, pixel_mask=expand_grid(grid, cell, (K, H, W)), cell=cell)


def feature_cell(spec: CubeMaskSpec, image_hw: Tuple[int, int], feature_hw: Tuple[int, int]) -> CubeMaskSpec:
    """Rescale a pixel-space cube spec onto a feature map of a different size."""
    h = max(1, min(feature_hw[0], round(spec.h * feature_hw[0] / image_hw[0])))
    w = max(1, min(feature_hw[1], round(spec.w * feature_hw[1] / image_hw[1])))
    return CubeMaskSpec(k=spec.k, h=h, w=w, eta=spec.eta, strategy=MaskStrategy.FEATURE,
                        fill_value=spec.fill_value)


def apply_mask(seq: np.ndarray, plan: MaskPlan, spec: CubeMaskSpec) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.ndim != 4 or (seq.shape[0], *seq.shape[2:]) != plan.pixel_mask.shape:
        raise ShapeMismatch(f"sequence {seq.shape} does not match plan {plan.pixel_mask.shape}")
    out = seq.copy()
    m = np.broadcast_to(plan.pixel_mask[:, None], seq.shape)
    out[m] = spec.fill_value
    return out


def batch_pixel_masks(spec: CubeMaskSpec, B: int, K: int, H: int, W: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One independent plan per sequence, stacked to ``[B, K, H, W]``."""
    return np.stack([sample_mask(spec, K, H, W, rng).pixel_mask for _ in range(B)])


def mask_tensor(x: torch.Tensor, pixel_masks: np.ndarray, fill_value: float = 0.0) -> torch.Tensor:
    """Apply ``[B, K, H, W]`` masks to a ``[B, K, C, H, W]`` tensor."""
    m = torch.as_tensor(pixel_masks, device=x.device).unsqueeze(2)
    return torch.where(m, torch.as_tensor(fill_value, dtype=x.dtype, device=x.device), x)


# -- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    out_size: Tuple[int, int] = (84, 84)
    crop_margin: int = 0  # padding used only when the source is already out_size
    intensity_scale: float = 0.05
    intensity_clip: float = 2.0
    crop: bool = True
    intensity: bool = True

    def __post_init__(self):
        if self.intensity_scale < 0 or self.intensity_clip < 0:
            raise InvalidSpec("intensity scale and clip must be non-negative")
        if self.crop_margin < 0:
            raise InvalidSpec("crop margin must be non-negative")


def _padded(seq: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    H, W = seq.shape[-2:]
    if (H, W) == tuple(spec.out_size) and spec.crop_margin > 0:
        p = spec.crop_margin // 2
        pad = [(0, 0)] * (seq.ndim - 2) + [(p, spec.crop_margin - p)] * 2
        return np.pad(seq, pad, mode="edge")
    return seq


def crop_offsets_range(src_hw: Tuple[int, int], spec: AugmentSpec) -> Tuple[int, int]:
    H, W = src_hw
    oh, ow = spec.out_size
    if (H, W) == (oh, ow):
        return spec.crop_margin, spec.crop_margin
    if oh > H or ow > W:
        raise InvalidSpec(f"crop {spec.out_size} exceeds source {(H, W)}")
    return H - oh, W - ow


def random_crop(seq: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
                return_offset: bool = False):
    """Crop every frame of ``seq`` (``[..., H, W]``) at one shared offset."""
    seq = np.asarray(seq)
    max_y, max_x = crop_offsets_range(seq.shape[-2:], spec)
    src = _padded(seq, spec)
    y = int(rng.integers(0, max_y + 1))
    x = int(rng.integers(0, max_x + 1))
    oh, ow = spec.out_size
    out = src[..., y:y + oh, x:x + ow].copy()
    return (out, (y, x)) if return_offset else out


def center_crop(x, out_size: Tuple[int, int]):
    H, W = x.shape[-2:]
    oh, ow = out_size
    y, x0 = (H - oh) // 2, (W - ow) // 2
    return x[..., y:y + oh, x0:x0 + ow]


def intensity_multiplier(scale: float, clip: float, rng: np.random.Generator, size=None):
    r = np.clip(rng.standard_normal(size), -clip, clip)
    return 1.0 + scale * r


def random_intensity(seq: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    seq = np.asarray(seq)
    mult = intensity_multiplier(spec.intensity_scale, spec.intensity_clip, rng)
    if spec.intensity_scale == 0:
        return seq.copy()
    return np.clip(seq * mult, 0.0, 1.0).astype(seq.dtype, copy=False)


def augment_batch(x: torch.Tensor, spec: AugmentSpec, rng: np.random.Generator) -> torch.Tensor:
    """Augment ``[B, K, C, H, W]`` (or ``[B, C, H, W]``) with per-sequence parameters.

    Each sequence gets one crop offset and one intensity multiplier shared
    across its timesteps.
    """
    squeeze = x.dim() == 4
    if squeeze:
        x = x.unsqueeze(1)
    B = x.shape[0]
    H, W = x.shape[-2:]
    oh, ow = spec.out_size
    if spec.crop:
        max_y, max_x = crop_offsets_range((H, W), spec)
        if (H, W) == (oh, ow) and spec.crop_margin > 0:
            p = spec.crop_margin // 2
            flat = x.reshape(-1, *x.shape[2:])
            flat = torch.nn.functional.pad(flat, (p, spec.crop_margin - p, p, spec.crop_margin - p),
                                           mode="replicate")
            x = flat.reshape(*x.shape[:3], *flat.shape[-2:])
        ys = rng.integers(0, max_y + 1, size=B)
        xs = rng.integers(0, max_x + 1, size=B)
        x = torch.stack([x[b, ..., ys[b]:ys[b] + oh, xs[b]:xs[b] + ow] for b in range(B)])
    elif (H, W) != (oh, ow):
        x = center_crop(x, (oh, ow))
    if spec.intensity and spec.intensity_scale > 0:
        mult = intensity_multiplier(spec.intensity_scale, spec.intensity_clip, rng, size=B)
        mult = torch.as_tensor(mult, dtype=x.dtype, device=x.device).view(B, 1, 1, 1, 1)
        x = (x * mult).clamp(0.0, 1.0)
    return x.squeeze(1) if squeeze else x


def prepare_eval(x: torch.Tensor, out_size: Tuple[int, int]) -> torch.Tensor:
    """Deterministic counterpart of ``augment_batch`` used when acting."""
    if tuple(x.shape[-2:]) != tuple(out_size):
        return center_crop(x, out_size)
    return x

