import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mlr.errors import InvalidSpec, ShapeMismatch
from mlr.pixelops import (AugmentSpec, CubeMaskSpec, MaskStrategy, apply_mask, augment_batch,
                          batch_pixel_masks, center_crop, feature_cell, mask_tensor, masked_count,
                          prepare_eval, random_crop, random_intensity, sample_mask)


def test_masked_count_rounds_half_up():
    assert masked_count(0.5, 162) == 81
    assert masked_count(0.5, 3) == 2
    assert masked_count(0.25, 2) == 1
    assert masked_count(0.0, 10) == 0
    assert masked_count(1.0, 10) == 10


def test_paper_geometry_masks_81_of_162():
    spec = CubeMaskSpec(8, 10, 10, 0.5)
    plan = sample_mask(spec, 16, 84, 84, np.random.default_rng(0))
    assert plan.grid.shape == (2, 9, 9)
    assert plan.masked_cells == 81


def test_boundary_cells_are_truncated():
    spec = CubeMaskSpec(8, 10, 10, 1.0)
    plan = sample_mask(spec, 16, 84, 84, np.random.default_rng(0))
    assert plan.pixel_mask.shape == (16, 84, 84)
    assert plan.pixel_mask.all()


def test_cells_are_constant_blocks():
    spec = CubeMaskSpec(4, 5, 5, 0.5)
    plan = sample_mask(spec, 8, 20, 20, np.random.default_rng(1))
    pm = plan.pixel_mask
    for t in range(2):
        for i in range(4):
            for j in range(4):
                block = pm[4 * t:4 * t + 4, 5 * i:5 * i + 5, 5 * j:5 * j + 5]
                assert block.all() == plan.grid[t, i, j] and block.any() == plan.grid[t, i, j]


def test_oversized_cube_rejected():
    with pytest.raises(InvalidSpec):
        sample_mask(CubeMaskSpec(32, 10, 10), 16, 84, 84, np.random.default_rng(0))
    with pytest.raises(InvalidSpec):
        CubeMaskSpec(eta=1.5)


def test_eta_zero_is_identity():
    seq = np.random.default_rng(0).random((16, 3, 20, 20)).astype(np.float32)
    spec = CubeMaskSpec(8, 5, 5, 0.0)
    out = apply_mask(seq, sample_mask(spec, 16, 20, 20, np.random.default_rng(0)), spec)
    assert np.array_equal(out, seq)


def test_apply_mask_fills_and_preserves():
    rng = np.random.default_rng(2)
    seq = rng.random((8, 2, 12, 12)).astype(np.float32) + 0.1
    spec = CubeMaskSpec(4, 4, 4, 0.5, fill_value=0.0)
    plan = sample_mask(spec, 8, 12, 12, rng)
    out = apply_mask(seq, plan, spec)
    m = np.broadcast_to(plan.pixel_mask[:, None], seq.shape)
    assert (out[m] == 0).all()
    assert np.array_equal(out[~m], seq[~m])
    with pytest.raises(ShapeMismatch):
        apply_mask(seq[:, :, :10], plan, spec)


def test_spatial_strategy_masks_each_frame_independently():
    spec = CubeMaskSpec(8, 10, 10, 0.5, strategy=MaskStrategy.SPATIAL)
    plan = sample_mask(spec, 16, 84, 84, np.random.default_rng(0))
    assert plan.grid.shape == (16, 9, 9)
    assert (plan.grid.reshape(16, -1).sum(1) == 41).all()
    # frames differ (with overwhelming probability)
    assert len({plan.grid[t].tobytes() for t in range(16)}) > 1


def test_temporal_strategy_masks_whole_segments():
    spec = CubeMaskSpec(4, 10, 10, 0.5, strategy=MaskStrategy.TEMPORAL)
    plan = sample_mask(spec, 16, 84, 84, np.random.default_rng(0))
    assert plan.grid.shape == (4, 1, 1)
    per_frame = plan.pixel_mask.reshape(16, -1)
    assert ((per_frame.all(1)) | (~per_frame.any(1))).all()
    assert per_frame.all(1).sum() == 8


def test_feature_cell_scaling():
    spec = CubeMaskSpec(8, 10, 10, 0.5)
    f = feature_cell(spec, (84, 84), (35, 35))
    assert (f.h, f.w) == (4, 4) and f.k == 8
    tiny = feature_cell(spec, (84, 84), (2, 2))
    assert tiny.h >= 1 and tiny.h <= 2


def test_mask_tensor_matches_numpy():
    rng = np.random.default_rng(3)
    x = torch.rand(2, 8, 3, 12, 12)
    spec = CubeMaskSpec(4, 4, 4, 0.5)
    masks = batch_pixel_masks(spec, 2, 8, 12, 12, rng)
    out = mask_tensor(x, masks, 0.0)
    for b in range(2):
        m = torch.as_tensor(masks[b]).unsqueeze(1).expand(8, 3, 12, 12)
        assert (out[b][m] == 0).all()
        assert torch.equal(out[b][~m], x[b][~m])


def test_random_crop_shares_offset_across_sequence():
    seq = np.arange(4 * 1 * 10 * 10, dtype=np.float32).reshape(4, 1, 10, 10)
    seq = seq % 100  # identical frames
    spec = AugmentSpec(out_size=(6, 6))
    out, (y, x) = random_crop(seq, spec, np.random.default_rng(0), return_offset=True)
    assert out.shape == (4, 1, 6, 6)
    for t in range(4):
        assert np.array_equal(out[t], seq[t, :, y:y + 6, x:x + 6])


def test_crop_pads_when_source_equals_output():
    seq = np.ones((2, 1, 8, 8), dtype=np.float32)
    spec = AugmentSpec(out_size=(8, 8), crop_margin=4)
    offsets = {random_crop(seq, spec, np.random.default_rng(s), return_offset=True)[1] for s in range(30)}
    assert len(offsets) > 1
    assert max(o[0] for o in offsets) <= 4


def test_crop_larger_than_source_rejected():
    with pytest.raises(InvalidSpec):
        random_crop(np.zeros((1, 1, 5, 5)), AugmentSpec(out_size=(8, 8)), np.random.default_rng(0))


def test_intensity_bounded_and_shared():
    seq = np.full((4, 1, 3, 3), 0.5, dtype=np.float32)
    spec = AugmentSpec(intensity_scale=0.05, intensity_clip=2.0)
    out = random_intensity(seq, spec, np.random.default_rng(0))
    ratio = out / seq
    assert np.allclose(ratio, ratio.flat[0])
    assert 0.9 - 1e-6 <= ratio.flat[0] <= 1.1 + 1e-6


def test_augment_batch_per_sequence_params():
    x = torch.rand(3, 4, 2, 12, 12)
    spec = AugmentSpec(out_size=(8, 8), intensity=False)
    out = augment_batch(x, spec, np.random.default_rng(0))
    assert out.shape == (3, 4, 2, 8, 8)
    for b in range(3):
        # locate the crop of the first frame and check all frames use it
        found = [(y, xx) for y in range(5) for xx in range(5)
                 if torch.equal(out[b, 0], x[b, 0, :, y:y + 8, xx:xx + 8])]
        assert found
        y, xx = found[0]
        assert torch.equal(out[b], x[b, :, :, y:y + 8, xx:xx + 8])


def test_augment_output_in_unit_range():
    x = torch.rand(4, 2, 3, 10, 10)
    out = augment_batch(x, AugmentSpec(out_size=(8, 8), intensity_scale=0.5), np.random.default_rng(0))
    assert out.min() >= 0 and out.max() <= 1


def test_prepare_eval_is_center_crop():
    x = torch.arange(100.0).reshape(1, 1, 10, 10)
    assert torch.equal(prepare_eval(x, (6, 6)), x[..., 2:8, 2:8])
    assert torch.equal(center_crop(x, (10, 10)), x)


@settings(max_examples=60, deadline=None)
@given(K=st.integers(1, 12), H=st.integers(1, 30), W=st.integers(1, 30),
       k=st.integers(1, 12), h=st.integers(1, 30), w=st.integers(1, 30),
       eta=st.floats(0, 1), seed=st.integers(0, 2 ** 16))
def test_masked_cell_count_property(K, H, W, k, h, w, eta, seed):
    if k > K or h > H or w > W:
        return
    spec = CubeMaskSpec(k, h, w, eta)
    plan = sample_mask(spec, K, H, W, np.random.default_rng(seed))
    n = plan.grid.size
    assert n == -(-K // k) * -(-H // h) * -(-W // w)
    assert plan.masked_cells == masked_count(eta, n)
    assert plan.pixel_mask.shape == (K, H, W)
