"""
Token embedding for the encoder and query embedding for the decoder.

A channel contributes one token per patch and per timestep. Each token is a
sum of: the group-specific projection of the patch content, a projected
Fourier feature of the patch centroid, the variable embedding, the level or
species embedding (when the group has one), and the projected absolute time
and lead time encodings.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from ..data_model import BatchSchema, ChannelKey, months_since_origin

logger = logging.getLogger(__name__)

EMBEDDING_INIT_STD = 0.02
PROVENANCE_FIELDS = ("group", "variable", "level", "patch_row", "patch_col", "timestep")


def patchify(x: torch.Tensor, patch_size: int, pad: bool = False) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """
    Split the trailing (H, W) axes into non-overlapping p x p patches.

    Args:
        x: Tensor of shape (..., H, W).
        patch_size: Patch edge p.
        pad: Zero-pad the south and east edges when H or W is not divisible
            by p. Without it an indivisible grid is rejected.

    Returns:
        Patches of shape (..., N_p, p * p) in row-major patch order and the
        patch grid shape (H / p, W / p).
    """
    if patch_size < 1:
        raise ValueError(f"Patch size must be positive, got {patch_size}")
    H, W = x.shape[-2:]
    pad_h, pad_w = (-H) % patch_size, (-W) % patch_size
    if pad_h or pad_w:
        if not pad:
            raise ValueError(f"Grid {H}x{W} is not divisible by patch size {patch_size}")
        x = nn.functional.pad(x, (0, pad_w, 0, pad_h))
    patches = rearrange(x, "... (hp p1) (wp p2) -> ... (hp wp) (p1 p2)", p1=patch_size, p2=patch_size)
    return patches, ((H + pad_h) // patch_size, (W + pad_w) // patch_size)


def patch_padding_mask(height: int, width: int, patch_size: int) -> torch.Tensor:
    """(N_p, p * p) boolean mask, True where a patch entry covers a real cell."""
    valid = torch.zeros(height + (-height) % patch_size, width + (-width) % patch_size, dtype=torch.bool)
    valid[:height, :width] = True
    return rearrange(valid, "(hp p1) (wp p2) -> (hp wp) (p1 p2)", p1=patch_size, p2=patch_size)


def patch_centroids(patch_rows: int, patch_cols: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Normalized (x, y) centroids in [-1, 1]; x grows eastward, y northward."""
    cols = torch.arange(patch_cols, dtype=torch.float64)
    rows = torch.arange(patch_rows, dtype=torch.float64)
    x = 2.0 * (cols + 0.5) / patch_cols - 1.0
    y = 1.0 - 2.0 * (rows + 0.5) / patch_rows
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return xx.reshape(-1), yy.reshape(-1)


def fourier_raw_width(num_bands: int) -> int:
    return 2 * (2 * num_bands + 1)


def fourier_encode(x: torch.Tensor, y: torch.Tensor, num_bands: int, max_freq: float) -> torch.Tensor:
    """
    Fourier features of normalized coordinates.

    Per coordinate c the features are sin(s_k pi c), cos(s_k pi c) interleaved
    over k, followed by c itself; x features come first. The frequencies s_k
    are evenly spaced from 1 to max_freq inclusive.

    Returns:
        Tensor of shape (N, 2 * (2 * num_bands + 1)).
    """
    x = torch.as_tensor(x, dtype=torch.float64).reshape(-1)
    y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
    if bool((x.abs() > 1).any()) or bool((y.abs() > 1).any()):
        raise ValueError("Fourier coordinates must lie in [-1, 1]")
    if num_bands < 1:
        raise ValueError(f"Band count must be positive, got {num_bands}")
    freqs = torch.linspace(1.0, float(max_freq), num_bands, dtype=torch.float64)

    def _encode(c: torch.Tensor) -> torch.Tensor:
        angles = math.pi * c[:, None] * freqs[None, :]
        pairs = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(c.shape[0], -1)
        return torch.cat([pairs, c[:, None]], dim=-1)

    return torch.cat([_encode(x), _encode(y)], dim=-1)


def sinusoidal_time_encode(tau, dim: int) -> torch.Tensor:
    """
    Transformer-style sinusoid: component 2i is sin(tau / 10000^(2i/dim)),
    component 2i+1 the matching cosine. Accepts a scalar or a 1-D tensor and
    returns (dim,) or (N, dim) in float64.
    """
    if dim % 2:
        raise ValueError(f"Encoding width must be even, got {dim}")
    tau = torch.as_tensor(tau, dtype=torch.float64)
    scalar = tau.dim() == 0
    tau = tau.reshape(-1)
    exponents = torch.arange(0, dim, 2, dtype=torch.float64) / dim
    angles = tau[:, None] / torch.pow(torch.tensor(10000.0, dtype=torch.float64), exponents)[None, :]
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(tau.shape[0], dim)
    return out[0] if scalar else out


def lead_time_encode(delta_t, dim: int) -> torch.Tensor:
    delta = torch.as_tensor(delta_t, dtype=torch.float64)
    if bool((delta < 0).any()):
        raise ValueError(f"Lead time must be non-negative, got {delta_t}")
    return sinusoidal_time_encode(delta, dim)


@dataclass
class TokenSequence:
    """Tokens (B, N, D) with one provenance row per token (see PROVENANCE_FIELDS)."""

    tokens: torch.Tensor
    provenance: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[1]


class EmbeddingTables(nn.Module):
    """
    Learned tables shared by token and query construction.

    Args:
        schema: Variable groups the tables cover.
        embed_dim: Width D of every embedding.
        patch_size: Patch edge; None builds tables without content
            projections (decoder queries).
        num_bands: Fourier band count.
        max_freq: Highest Fourier frequency.
    """

    def __init__(
        self,
        schema: BatchSchema,
        embed_dim: int,
        patch_size: Optional[int],
        num_bands: int,
        max_freq: float,
    ):
        super().__init__()
        if embed_dim % 2:
            raise ValueError(f"Embedding width must be even, got {embed_dim}")
        self.schema = schema
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.num_bands = num_bands
        self.max_freq = max_freq

        self.patch_proj = nn.ModuleDict()
        if patch_size is not None:
            for g in schema:
                self.patch_proj[g.group_name] = nn.Linear(patch_size * patch_size, embed_dim)
        self.variable_embed = nn.ModuleDict({g.group_name: nn.Embedding(len(g.variables), embed_dim) for g in schema})
        self.level_embed = nn.ModuleDict(
            {g.group_name: nn.Embedding(len(g.levels), embed_dim) for g in schema if g.levels is not None}
        )
        self.fourier_proj = nn.Linear(fourier_raw_width(num_bands), embed_dim)
        self.time_proj = nn.Linear(embed_dim, embed_dim)
        self.lead_proj = nn.Linear(embed_dim, embed_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, std=EMBEDDING_INIT_STD)
            if isinstance(module, nn.Linear):
                nn.init.zeros_(module.bias)

    def _dtype(self) -> torch.dtype:
        return self.fourier_proj.weight.dtype

    def channel_index(self, key: ChannelKey) -> Tuple[int, int]:
        """(variable index, level index or -1) of a channel in these tables."""
        g = self.schema.group(key.group)
        v = g.variable_index(key.variable)
        if key.level is None:
            return v, -1
        if g.levels is None or key.level not in g.levels:
            raise ValueError(f"Level {key.level} unknown for group '{key.group}'")
        return v, g.levels.index(key.level)

    def channel_embedding(self, keys: Sequence[ChannelKey]) -> torch.Tensor:
        """Variable plus level/species embedding per channel, (C, D)."""
        rows = []
        for key in keys:
            v, lvl = self.channel_index(key)
            device = self.variable_embed[key.group].weight.device
            e = self.variable_embed[key.group](torch.tensor(v, device=device))
            if lvl >= 0:
                e = e + self.level_embed[key.group](torch.tensor(lvl, device=device))
            rows.append(e)
        return torch.stack(rows)

    def position_embedding(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        features = fourier_encode(x, y, self.num_bands, self.max_freq).to(self._dtype())
        return self.fourier_proj(features)

    def time_embedding(self, months: Sequence[int]) -> torch.Tensor:
        return self.time_proj(sinusoidal_time_encode(torch.tensor(list(months)), self.embed_dim).to(self._dtype()))

    def lead_embedding(self, lead_time: int) -> torch.Tensor:
        return self.lead_proj(lead_time_encode(lead_time, self.embed_dim).to(self._dtype()))


def embed_tokens(
    patches: torch.Tensor,
    tables: EmbeddingTables,
    schema: BatchSchema,
    timestamps: Sequence,
    lead_time: int,
    patch_grid: Tuple[int, int],
) -> TokenSequence:
    """
    Sum content and positional embeddings for every (timestep, channel, patch).

    Args:
        patches: (B, T, C, N_p, p * p) from patchify.
        tables: Learned tables whose schema covers `schema`.
        schema: Schema of the patched channels.
        timestamps: T month timestamps, one per timestep.
        lead_time: Forecast lead in months.
        patch_grid: (H / p, W / p).

    Returns:
        TokenSequence of B x (T * C * N_p) tokens ordered timestep, channel,
        patch.
    """
    if tables.patch_size is None:
        raise ValueError("Embedding tables were built without patch projections")
    B, T, C, N_p, _ = patches.shape
    if C != schema.channel_count or T != len(timestamps):
        raise ValueError(
            f"Patches of shape {tuple(patches.shape)} do not match {schema.channel_count} channels "
            f"and {len(timestamps)} timesteps"
        )
    if N_p != patch_grid[0] * patch_grid[1]:
        raise ValueError(f"{N_p} patches do not fill a {patch_grid} patch grid")

    content = torch.cat(
        [tables.patch_proj[name](patches[:, :, sl]) for name, sl in schema.group_slices().items()], dim=2
    )
    keys = schema.channel_keys()
    channel = tables.channel_embedding(keys)
    x, y = patch_centroids(*patch_grid)
    position = tables.position_embedding(x, y)
    time = tables.time_embedding([months_since_origin(t) for t in timestamps])
    lead = tables.lead_embedding(lead_time)

    tokens = (
        content
        + channel[None, None, :, None, :]
        + position[None, None, None, :, :]
        + time[None, :, None, None, :]
        + lead
    )
    tokens = tokens.reshape(B, T * C * N_p, tables.embed_dim)

    group_ids = {name: i for i, name in enumerate(schema.group_names)}
    per_channel = np.array([(group_ids[k.group],) + tables.channel_index(k) for k in keys], dtype=np.int64)
    t_idx, c_idx, p_idx = np.meshgrid(np.arange(T), np.arange(C), np.arange(N_p), indexing="ij")
    t_idx, c_idx, p_idx = t_idx.ravel(), c_idx.ravel(), p_idx.ravel()
    provenance = np.column_stack(
        [per_channel[c_idx], p_idx // patch_grid[1], p_idx % patch_grid[1], t_idx]
    ).astype(np.int64)
    return TokenSequence(tokens, provenance)
