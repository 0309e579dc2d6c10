"""
Perceiver machinery: grouped-query attention, pre-norm cross and self
attention blocks, the latent encoder and the query decoder.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
from einops import rearrange
from timm.layers import Mlp

LATENT_INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    heads: int
    kv_groups: int
    depth: int
    dropout: float = 0.0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"Embedding width {self.embed_dim} is not divisible by {self.heads} heads")
        if self.heads % self.kv_groups:
            raise ValueError(f"{self.heads} heads cannot be split into {self.kv_groups} key/value groups")
        if self.depth < 0:
            raise ValueError(f"Depth must be non-negative, got {self.depth}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


class GroupedQueryAttention(nn.Module):
    """
    Multi-head attention where groups of query heads share one key/value head.

    With kv_groups == heads this is standard multi-head attention.
    """

    def __init__(self, dim: int, heads: int, kv_groups: int, dropout: float = 0.0, bias: bool = True):
        super().__init__()
        if dim % heads or heads % kv_groups:
            raise ValueError(f"Invalid attention shape: dim={dim}, heads={heads}, kv_groups={kv_groups}")
        self.heads = heads
        self.kv_groups = kv_groups
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5

        self.wq = nn.Linear(dim, dim, bias=bias)
        self.wk = nn.Linear(dim, kv_groups * self.head_dim, bias=bias)
        self.wv = nn.Linear(dim, kv_groups * self.head_dim, bias=bias)
        self.out_proj = nn.Linear(dim, dim, bias=bias)
        self.attn_drop = nn.Dropout(dropout)

    def forward(
        self, queries: torch.Tensor, context: torch.Tensor, return_weights: bool = False
    ) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        """
        Args:
            queries: (B, N_q, D).
            context: (B, N_c, D).

        Returns:
            (B, N_q, D), plus the (B, heads, N_q, N_c) softmax weights when
            requested.
        """
        if context.shape[-2] == 0:
            raise ValueError("Attention context is empty")
        q = rearrange(self.wq(queries), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.wk(context), "b n (g d) -> b g n d", g=self.kv_groups)
        v = rearrange(self.wv(context), "b n (g d) -> b g n d", g=self.kv_groups)
        repeats = self.heads // self.kv_groups
        if repeats > 1:
            k = k.repeat_interleave(repeats, dim=1)
            v = v.repeat_interleave(repeats, dim=1)

        weights = torch.softmax((q * self.scale) @ k.transpose(-2, -1), dim=-1)
        out = self.attn_drop(weights) @ v
        out = self.out_proj(rearrange(out, "b h n d -> b n (h d)"))
        return (out, weights) if return_weights else out


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross attention of queries over a context, then an MLP."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        D = config.embed_dim
        self.norm_q = nn.LayerNorm(D)
        self.norm_kv = nn.LayerNorm(D)
        self.attn = GroupedQueryAttention(D, config.heads, config.kv_groups, config.dropout)
        self.norm_mlp = nn.LayerNorm(D)
        self.mlp = Mlp(in_features=D, hidden_features=int(D * config.mlp_ratio), drop=config.dropout)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = queries + self.attn(self.norm_q(queries), self.norm_kv(context))
        return x + self.mlp(self.norm_mlp(x))


class SelfAttentionBlock(nn.Module):
    def __init__(self, config: AttentionConfig):
        super().__init__()
        D = config.embed_dim
        self.norm1 = nn.LayerNorm(D)
        self.attn = GroupedQueryAttention(D, config.heads, config.kv_groups, config.dropout)
        self.norm2 = nn.LayerNorm(D)
        self.mlp = Mlp(in_features=D, hidden_features=int(D * config.mlp_ratio), drop=config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class SelfAttentionTower(nn.Sequential):
    """`depth` self-attention blocks; depth 0 is the identity."""

    def __init__(self, config: AttentionConfig):
        super().__init__(*[SelfAttentionBlock(config) for _ in range(config.depth)])


class PerceiverEncoder(nn.Module):
    """
    Map a variable-length token sequence onto a fixed number of latents with
    one cross attention block followed by the self-attention tower.
    """

    def __init__(self, config: AttentionConfig, num_latents: int):
        super().__init__()
        if num_latents < 1:
            raise ValueError(f"Latent count must be positive, got {num_latents}")
        self.latents = nn.Parameter(torch.randn(num_latents, config.embed_dim) * LATENT_INIT_STD)
        self.cross = CrossAttentionBlock(config)
        self.tower = SelfAttentionTower(config)

    def forward(self, tokens: torch.Tensor, latent_queries: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, N, D) tokens -> (B, N_l, D) latents."""
        if tokens.shape[1] == 0:
            raise ValueError("Cannot encode an empty token sequence")
        queries = self.latents if latent_queries is None else latent_queries
        queries = queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        return self.tower(self.cross(queries, tokens))


class PerceiverDecoder(nn.Module):
    """
    One cross attention pass of output queries over the backbone latents.

    Queries are layer-normalized before they enter the residual stream;
    decoded rows are layer-normalized on the way out.
    """

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.norm_queries = nn.LayerNorm(config.embed_dim)
        self.cross = CrossAttentionBlock(config)
        self.norm_out = nn.LayerNorm(config.embed_dim)

    def forward(self, latents: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        if queries.shape[-2] < 1:
            raise ValueError("At least one output query is required")
        if queries.dim() == 2:
            queries = queries.unsqueeze(0).expand(latents.shape[0], -1, -1)
        return self.norm_out(self.cross(self.norm_queries(queries), latents))


def latent_grid_size(latent_grid: Tuple[int, int, int]) -> int:
    return math.prod(latent_grid)
