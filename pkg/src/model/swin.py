"""
3D shifted-window transformer arranged as a U-Net over the latent grid.

Latents enter as (B, N_l, D) and are viewed as a (B, Ld, Lh, Lw, D) grid.
Encoder stages are separated by patch merging, decoder stages by patch
splitting. Skips are added, except at the highest resolution where the
decoder output and the skip are concatenated and projected back to D.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from einops import rearrange
from timm.layers import DropPath, Mlp

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

# region labels used to build shifted-window masks
_NORMAL, _WRAPPED, _PADDED = 0, 1, 2


@dataclass(frozen=True)
class SwinConfig:
    encoder_depths: Tuple[int, ...]
    encoder_num_heads: Tuple[int, ...]
    window: Triple
    decoder_depths: Tuple[int, ...] = field(default=())
    decoder_num_heads: Tuple[int, ...] = field(default=())
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    drop_rate: float = 0.0
    attn_drop_rate: float = 0.0
    drop_path_rate: float = 0.0

    def __post_init__(self):
        enc_d, enc_h = tuple(self.encoder_depths), tuple(self.encoder_num_heads)
        object.__setattr__(self, "encoder_depths", enc_d)
        object.__setattr__(self, "encoder_num_heads", enc_h)
        object.__setattr__(self, "window", tuple(self.window))
        object.__setattr__(self, "decoder_depths", tuple(self.decoder_depths) or enc_d[::-1])
        object.__setattr__(self, "decoder_num_heads", tuple(self.decoder_num_heads) or enc_h[::-1])
        if len(enc_d) < 1 or len(enc_d) != len(enc_h):
            raise ValueError(f"Need at least one stage with matching depths and heads, got {enc_d} / {enc_h}")
        if self.decoder_depths != enc_d[::-1] or self.decoder_num_heads != enc_h[::-1]:
            raise ValueError("Decoder depths and heads must mirror the encoder lists reversed")
        if len(self.window) != 3 or min(self.window) < 1:
            raise ValueError(f"Window must be three positive sizes, got {self.window}")

    @property
    def num_stages(self) -> int:
        return len(self.encoder_depths)

    @classmethod
    def medium(cls) -> "SwinConfig":
        return cls((2, 2), (8, 16), (1, 1, 1), drop_path_rate=0.1)

    @classmethod
    def large(cls) -> "SwinConfig":
        return cls((2, 2, 2), (8, 16, 32), (1, 4, 5), drop_path_rate=0.1)

    @classmethod
    def desk(cls) -> "SwinConfig":
        return cls((2, 2), (2, 4), (1, 2, 2))


def window_partition(x: torch.Tensor, window: Triple) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * nW, wd * wh * ww, C); dims must divide evenly."""
    wd, wh, ww = window
    return rearrange(x, "b (d wd) (h wh) (w ww) c -> (b d h w) (wd wh ww) c", wd=wd, wh=wh, ww=ww)


def window_reverse(windows: torch.Tensor, window: Triple, grid: Triple) -> torch.Tensor:
    wd, wh, ww = window
    D, H, W = grid
    return rearrange(
        windows,
        "(b d h w) (wd wh ww) c -> b (d wd) (h wh) (w ww) c",
        d=D // wd,
        h=H // wh,
        w=W // ww,
        wd=wd,
        wh=wh,
    )


def cyclic_shift(x: torch.Tensor, offsets: Triple) -> torch.Tensor:
    """Circular roll of the (D, H, W) axes of (B, D, H, W, C); undo with -offsets."""
    if not any(offsets):
        return x
    return torch.roll(x, shifts=tuple(offsets), dims=(1, 2, 3))


def relative_position_index_3d(window: Triple) -> torch.Tensor:
    """(N, N) index into a ((2wd-1)(2wh-1)(2ww-1), heads) bias table."""
    wd, wh, ww = window
    coords = torch.stack(torch.meshgrid(torch.arange(wd), torch.arange(wh), torch.arange(ww), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
    rel[:, :, 0] += wd - 1
    rel[:, :, 1] += wh - 1
    rel[:, :, 2] += ww - 1
    return rel[:, :, 0] * (2 * wh - 1) * (2 * ww - 1) + rel[:, :, 1] * (2 * ww - 1) + rel[:, :, 2]


def bias_table_size(window: Triple) -> int:
    wd, wh, ww = window
    return (2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1)


class WindowAttention3D(nn.Module):
    """Multi-head self attention inside 3D windows with a relative position bias."""

    def __init__(self, dim: int, heads: int, window: Triple, qkv_bias: bool = True, attn_drop: float = 0.0,
                 proj_drop: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"Width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.window = tuple(window)
        self.scale = (dim // heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros(bias_table_size(self.window), heads))
        self.register_buffer("relative_position_index", relative_position_index_3d(self.window), persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.attn_drop = nn.Dropout(attn_drop)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(proj_drop)

    def relative_position_bias(self) -> torch.Tensor:
        table = self.relative_position_bias_table
        if table.shape != (bias_table_size(self.window), self.heads):
            raise ValueError(
                f"Bias table of shape {tuple(table.shape)} does not fit window {self.window} "
                f"with {self.heads} heads"
            )
        N = self.relative_position_index.shape[0]
        bias = table[self.relative_position_index.reshape(-1)].reshape(N, N, self.heads)
        return bias.permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, return_weights: bool = False):
        """
        Args:
            x: (B * nW, N, C) window tokens.
            mask: (nW, N, N) additive mask of 0 and -inf, or None.
        """
        B_, N, C = x.shape
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.heads)
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.relative_position_bias().unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.reshape(B_ // nW, nW, self.heads, N, N) + mask[None, :, None].to(attn.dtype)
            attn = attn.reshape(B_, self.heads, N, N)
        weights = torch.softmax(attn, dim=-1)
        out = self.attn_drop(weights) @ v
        out = self.proj_drop(self.proj(rearrange(out, "b h n d -> b n (h d)")))
        return (out, weights) if return_weights else out


def effective_window(grid: Triple, window: Triple, shifted: bool) -> Tuple[Triple, Triple]:
    """Clip windows to the grid; an axis spanned by one window is never shifted."""
    win = tuple(min(w, g) for w, g in zip(window, grid))
    shift = tuple(0 if (not shifted or w >= g) else w // 2 for w, g in zip(win, grid))
    return win, shift


def _region_labels(size: int, padded: int, shift: int) -> torch.Tensor:
    labels = torch.full((padded,), _NORMAL, dtype=torch.long)
    if shift:
        labels[size - shift : size] = _WRAPPED
    labels[size:] = _PADDED
    return labels


def shifted_window_mask(grid: Triple, window: Triple, shift: Triple) -> Optional[torch.Tensor]:
    """
    (nW, N, N) additive mask: -inf between tokens of different regions.

    Regions separate cells that wrapped around by the cyclic shift and cells
    added as padding. Returns None when neither exists.
    """
    padded = tuple(g + (-g) % w for g, w in zip(grid, window))
    if not any(shift) and padded == tuple(grid):
        return None
    ld, lh, lw = (_region_labels(g, p, s) for g, p, s in zip(grid, padded, shift))
    ids = ld[:, None, None] * 9 + lh[None, :, None] * 3 + lw[None, None, :]
    windows = window_partition(ids[None, ..., None].float(), window).squeeze(-1)
    diff = windows[:, :, None] - windows[:, None, :]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class SwinBlock3D(nn.Module):
    """W-MSA or SW-MSA followed by a GELU MLP, both with stochastic-depth residuals."""

    def __init__(self, dim: int, heads: int, grid: Triple, window: Triple, shifted: bool, mlp_ratio: float = 4.0,
                 qkv_bias: bool = True, drop: float = 0.0, attn_drop: float = 0.0, drop_path: float = 0.0):
        super().__init__()
        self.grid = tuple(grid)
        self.window, self.shift = effective_window(self.grid, tuple(window), shifted)
        self.padded = tuple(g + (-g) % w for g, w in zip(self.grid, self.window))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, heads, self.window, qkv_bias, attn_drop, drop)
        self.drop_path = DropPath(drop_path) if drop_path > 0.0 else nn.Identity()
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(in_features=dim, hidden_features=int(dim * mlp_ratio), act_layer=nn.GELU, drop=drop)
        self.register_buffer("attn_mask", shifted_window_mask(self.grid, self.window, self.shift), persistent=False)

    def _attn(self, x: torch.Tensor) -> torch.Tensor:
        B, D, H, W, C = x.shape
        x = cyclic_shift(x, tuple(-s for s in self.shift))
        pd, ph, pw = (p - g for p, g in zip(self.padded, self.grid))
        if pd or ph or pw:
            x = nn.functional.pad(x, (0, 0, 0, pw, 0, ph, 0, pd))
        windows = self.attn(window_partition(x, self.window), mask=self.attn_mask)
        x = window_reverse(windows, self.window, self.padded)[:, :D, :H, :W].contiguous()
        return cyclic_shift(x, self.shift)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self._attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchMerge3D(nn.Module):
    """Concatenate 2x2x2 neighbourhoods (8C) and project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if any(s % 2 for s in x.shape[1:4]):
            raise ValueError(f"Patch merging needs even latent dims, got {tuple(x.shape[1:4])}")
        x = rearrange(x, "b (d pd) (h ph) (w pw) c -> b d h w (pd ph pw c)", pd=2, ph=2, pw=2)
        return self.reduction(self.norm(x))


class PatchSplit3D(nn.Module):
    """Expand C to 4C and redistribute it over a 2x2x2 neighbourhood of C/2."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"Patch splitting needs an even width, got {dim}")
        self.expand = nn.Linear(dim, 4 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = rearrange(self.expand(x), "b d h w (pd ph pw c) -> b (d pd) (h ph) (w pw) c", pd=2, ph=2, pw=2)
        return self.norm(x)


class SwinStage(nn.Sequential):
    def __init__(self, dim: int, depth: int, heads: int, grid: Triple, config: SwinConfig,
                 drop_path: Sequence[float]):
        super().__init__(
            *[
                SwinBlock3D(
                    dim,
                    heads,
                    grid,
                    config.window,
                    shifted=bool(i % 2),
                    mlp_ratio=config.mlp_ratio,
                    qkv_bias=config.qkv_bias,
                    drop=config.drop_rate,
                    attn_drop=config.attn_drop_rate,
                    drop_path=drop_path[i],
                )
                for i in range(depth)
            ]
        )


def stage_grids(latent_grid: Triple, num_stages: int) -> List[Triple]:
    """Latent grid of every stage; raises naming the stage that cannot be merged."""
    grids = [tuple(latent_grid)]
    for stage in range(num_stages - 1):
        g = grids[-1]
        if any(s % 2 for s in g):
            raise ValueError(f"Stage {stage}: latent grid {g} has an odd dimension and cannot be merged")
        grids.append(tuple(s // 2 for s in g))
    return grids


class SwinUNetBackbone(nn.Module):
    """
    Map a latent state (B, N_l, D) to the next latent state of the same shape.

    Args:
        embed_dim: Latent width D.
        latent_grid: (Ld, Lh, Lw) with Ld * Lh * Lw = N_l.
        config: Stage layout, windows and regularisation.
    """

    def __init__(self, embed_dim: int, latent_grid: Triple, config: SwinConfig):
        super().__init__()
        self.latent_grid = tuple(latent_grid)
        self.embed_dim = embed_dim
        self.config = config
        S = config.num_stages
        self.grids = stage_grids(self.latent_grid, S)
        dims = [embed_dim * 2**i for i in range(S)]
        for i, (d, h) in enumerate(zip(dims, config.encoder_num_heads)):
            if d % h:
                raise ValueError(f"Stage {i}: width {d} is not divisible by {h} heads")

        total = sum(config.encoder_depths)
        rates = torch.linspace(0, config.drop_path_rate, total).tolist() if total else []
        offsets = [sum(config.encoder_depths[:i]) for i in range(S)]

        self.encoder = nn.ModuleList(
            SwinStage(dims[i], config.encoder_depths[i], config.encoder_num_heads[i], self.grids[i], config,
                      rates[offsets[i] : offsets[i] + config.encoder_depths[i]])
            for i in range(S)
        )
        self.merges = nn.ModuleList(PatchMerge3D(dims[i]) for i in range(S - 1))
        self.splits = nn.ModuleList(PatchSplit3D(dims[i + 1]) for i in range(S - 1))
        self.decoder = nn.ModuleList()
        for j in range(S):
            level = S - 1 - j
            stage_rates = rates[offsets[level] : offsets[level] + config.decoder_depths[j]][::-1]
            self.decoder.append(
                SwinStage(dims[level], config.decoder_depths[j], config.decoder_num_heads[j], self.grids[level],
                          config, stage_rates)
            )
        self.skip_proj = nn.Linear(2 * embed_dim, embed_dim, bias=False) if S > 1 else None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        B, N, C = z.shape
        Ld, Lh, Lw = self.latent_grid
        if N != Ld * Lh * Lw or C != self.embed_dim:
            raise ValueError(f"Latents of shape {(N, C)} do not fit grid {self.latent_grid} x {self.embed_dim}")
        x = z.reshape(B, Ld, Lh, Lw, C)

        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x)
            skips.append(x)
            if i < len(self.merges):
                x = self.merges[i](x)

        S = len(self.encoder)
        for j, stage in enumerate(self.decoder):
            level = S - 1 - j
            if j > 0:
                x = self.splits[level](x)
                if level == 0:
                    x = self.skip_proj(torch.cat([x, skips[0]], dim=-1))
                else:
                    x = x + skips[level]
            x = stage(x)
        return x.reshape(B, N, C)
