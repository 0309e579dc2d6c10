import pytest
import torch
import torch.nn as nn

from src.model.swin import (
    PatchMerge3D,
    PatchSplit3D,
    SwinBlock3D,
    SwinConfig,
    SwinStage,
    SwinUNetBackbone,
    WindowAttention3D,
    cyclic_shift,
    effective_window,
    shifted_window_mask,
    stage_grids,
    window_partition,
    window_reverse,
)


def test_presets_mirror_decoder():
    large = SwinConfig.large()
    assert large.decoder_depths == (2, 2, 2)
    assert large.decoder_num_heads == (32, 16, 8)
    assert SwinConfig.medium().window == (1, 1, 1)
    with pytest.raises(ValueError):
        SwinConfig((2, 2), (8, 16), (1, 1, 1), decoder_depths=(2, 1))


@pytest.mark.parametrize("window", [(1, 1, 1), (2, 2, 2), (2, 4, 4), (1, 2, 4)])
def test_partition_reverse_identity(window):
    x = torch.randn(2, 2, 4, 4, 3)
    windows = window_partition(x, window)
    assert torch.equal(window_reverse(windows, window, (2, 4, 4)), x)


def test_partition_extremes():
    x = torch.randn(1, 2, 4, 4, 3)
    assert window_partition(x, (2, 4, 4)).shape == (1, 32, 3)
    assert window_partition(x, (1, 1, 1)).shape == (32, 1, 3)


def test_cyclic_shift():
    x = torch.zeros(1, 2, 4, 4, 1)
    x[0, 0, 0, 0, 0] = 1.0
    assert torch.equal(cyclic_shift(x, (0, 0, 0)), x)
    moved = cyclic_shift(x, (0, 1, 2))
    assert moved[0, 0, 1, 2, 0] == 1.0 and moved.sum() == 1.0
    assert torch.equal(cyclic_shift(moved, (0, -1, -2)), x)


def test_effective_window_clips_and_disables_shift():
    assert effective_window((2, 4, 4), (4, 2, 2), True) == ((2, 2, 2), (0, 1, 1))
    assert effective_window((2, 4, 4), (2, 2, 2), False) == ((2, 2, 2), (0, 0, 0))
    assert effective_window((1, 2, 2), (1, 4, 5), True) == ((1, 2, 2), (0, 0, 0))


def test_mask_separates_wrapped_regions():
    mask = shifted_window_mask((1, 4, 4), (1, 2, 2), (0, 1, 1))
    assert mask.shape == (4, 4, 4)
    assert torch.all(mask[0] == 0)
    corner = mask[3]
    assert torch.all(corner.diagonal() == 0)
    assert torch.all(corner[~torch.eye(4, dtype=torch.bool)] == float("-inf"))
    assert shifted_window_mask((1, 4, 4), (1, 2, 2), (0, 0, 0)) is None


def test_masked_attention_weights_vanish():
    torch.manual_seed(0)
    mask = shifted_window_mask((2, 4, 4), (2, 2, 2), (1, 1, 1))
    attn = WindowAttention3D(8, 2, (2, 2, 2))
    x = torch.randn(mask.shape[0] * 3, 8, 8)
    _, weights = attn(x, mask=mask, return_weights=True)
    blocked = (mask == float("-inf"))[None, :, None].expand(3, -1, 2, -1, -1)
    weights = weights.reshape(3, mask.shape[0], 2, 8, 8)
    assert float(weights[blocked].max()) < 1e-12
    assert torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)))


def test_padding_mask_isolates_pad_cells():
    mask = shifted_window_mask((1, 3, 4), (1, 2, 2), (0, 0, 0))
    assert mask is not None
    assert mask.shape == (4, 4, 4)
    # bottom windows hold one real row and one padded row
    assert mask[2][0, 2] == float("-inf") and mask[2][0, 1] == 0


def test_bias_is_added_before_softmax():
    torch.manual_seed(1)
    attn = WindowAttention3D(4, 1, (1, 1, 2))
    with torch.no_grad():
        idx = attn.relative_position_index[0, 1]
        attn.relative_position_bias_table[idx] = -1e9
    _, weights = attn(torch.randn(3, 2, 4), return_weights=True)
    assert float(weights[:, 0, 0, 1].max()) < 1e-12


def test_window_attention_matches_oracle():
    torch.manual_seed(2)
    attn = WindowAttention3D(4, 1, (1, 1, 2)).double()
    with torch.no_grad():
        attn.relative_position_bias_table.normal_()
    x = torch.randn(1, 2, 4, dtype=torch.float64)
    q, k, v = attn.qkv(x)[0].split(4, dim=-1)
    bias = attn.relative_position_bias()[0]
    scores = q @ k.T / 2.0 + bias
    expected = attn.proj(torch.softmax(scores, dim=-1) @ v)
    torch.testing.assert_close(attn(x)[0], expected, rtol=0, atol=1e-10)


def test_bias_table_mismatch():
    attn = WindowAttention3D(4, 2, (1, 2, 2))
    attn.relative_position_bias_table = nn.Parameter(torch.zeros(5, 2))
    with pytest.raises(ValueError):
        attn(torch.randn(1, 4, 4))


def test_single_token_windows_project_values():
    torch.manual_seed(3)
    attn = WindowAttention3D(4, 2, (1, 1, 1))
    x = torch.randn(5, 1, 4)
    v = attn.qkv(x)[..., 8:]
    torch.testing.assert_close(attn(x), attn.proj(v))


def test_full_drop_path_is_identity():
    block = SwinBlock3D(8, 2, (2, 4, 4), (2, 2, 2), shifted=True, drop_path=1.0).train()
    x = torch.randn(2, 2, 4, 4, 8)
    assert torch.equal(block(x), x)


def test_eval_mode_is_deterministic():
    block = SwinBlock3D(8, 2, (2, 4, 4), (2, 2, 2), shifted=True, drop_path=0.5).eval()
    x = torch.randn(1, 2, 4, 4, 8)
    assert torch.equal(block(x), block(x))


def test_shift_is_noop_when_window_spans_grid():
    torch.manual_seed(4)
    plain = SwinBlock3D(8, 2, (2, 4, 4), (2, 4, 4), shifted=False)
    shifted = SwinBlock3D(8, 2, (2, 4, 4), (2, 4, 4), shifted=True)
    shifted.load_state_dict(plain.state_dict())
    assert shifted.shift == (0, 0, 0)
    x = torch.randn(1, 2, 4, 4, 8)
    assert torch.equal(plain(x), shifted(x))


def test_block_handles_indivisible_grid():
    block = SwinBlock3D(8, 2, (1, 3, 5), (1, 2, 2), shifted=True)
    assert block(torch.randn(1, 1, 3, 5, 8)).shape == (1, 1, 3, 5, 8)


def test_merge_and_split_shapes():
    x = torch.randn(1, 2, 4, 4, 8)
    merged = PatchMerge3D(8)(x)
    assert merged.shape == (1, 1, 2, 2, 16)
    assert PatchSplit3D(16)(merged).shape == x.shape
    with pytest.raises(ValueError):
        PatchMerge3D(8)(torch.randn(1, 1, 4, 4, 8))


def test_three_stage_bottleneck_shape():
    grids = stage_grids((4, 8, 8), 3)
    assert grids[-1] == (1, 2, 2)
    config = SwinConfig((1, 1, 1), (1, 2, 4), (1, 2, 2))
    backbone = SwinUNetBackbone(8, (4, 8, 8), config)
    x = torch.randn(1, 4, 8, 8, 8)
    for i, stage in enumerate(backbone.encoder):
        x = stage(x)
        if i < len(backbone.merges):
            x = backbone.merges[i](x)
    assert x.shape == (1, 1, 2, 2, 32)


def test_stage_grid_error_names_stage():
    with pytest.raises(ValueError, match="Stage 1"):
        stage_grids((4, 2, 6), 3)


def test_backbone_preserves_shape():
    backbone = SwinUNetBackbone(16, (2, 4, 4), SwinConfig.desk())
    z = torch.randn(2, 32, 16)
    assert backbone(z).shape == z.shape
    with pytest.raises(ValueError):
        backbone(torch.randn(2, 30, 16))


def test_medium_windows_run_on_desk_latents():
    backbone = SwinUNetBackbone(16, (2, 4, 4), SwinConfig((2, 2), (2, 4), (1, 1, 1))).eval()
    z = torch.randn(1, 32, 16)
    out = backbone(z)
    assert torch.isfinite(out).all()
    assert torch.equal(out, backbone(z))


def test_single_stage_backbone_has_no_skip_projection():
    backbone = SwinUNetBackbone(8, (1, 2, 2), SwinConfig((2,), (2,), (1, 2, 2)))
    assert backbone.skip_proj is None
    assert backbone(torch.randn(1, 4, 8)).shape == (1, 4, 8)


def test_drop_path_rates_increase_linearly():
    config = SwinConfig((2, 2), (2, 4), (1, 2, 2), drop_path_rate=0.3)
    backbone = SwinUNetBackbone(16, (2, 4, 4), config)
    blocks = [b for stage in backbone.encoder for b in stage]
    assert isinstance(blocks[0].drop_path, nn.Identity)
    rates = [b.drop_path.drop_prob for b in blocks[1:]]
    assert rates == pytest.approx([0.1, 0.2, 0.3])


def test_stage_alternates_shift():
    stage = SwinStage(8, 4, 2, (2, 4, 4), SwinConfig.desk(), [0.0] * 4)
    assert [b.shift for b in stage] == [(0, 0, 0), (0, 1, 1), (0, 0, 0), (0, 1, 1)]
