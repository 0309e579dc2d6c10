"""
Decoder queries (one per output channel map) and the per-group heads that
turn decoded embeddings back into gridded maps.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data_model import Batch, BatchSchema, GridSpec, months_since_origin
from .encodings import EMBEDDING_INIT_STD, EmbeddingTables


@dataclass(frozen=True)
class QuerySpec:
    group: str
    variable: str
    level: Optional[int]
    lead_time: int
    height: int
    width: int


def query_specs(schema: BatchSchema, grid: GridSpec, lead_time: int) -> List[QuerySpec]:
    return [QuerySpec(k.group, k.variable, k.level, lead_time, grid.height, grid.width) for k in schema.channel_keys()]


def grid_centroids(grid: GridSpec):
    """Normalized (x, y) of every cell, rows north to south."""
    H, W = grid.shape
    x = 2.0 * (torch.arange(W, dtype=torch.float64) + 0.5) / W - 1.0
    y = 1.0 - 2.0 * (torch.arange(H, dtype=torch.float64) + 0.5) / H
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return xx.reshape(-1), yy.reshape(-1)


def build_queries(
    schema: BatchSchema,
    grid: GridSpec,
    lead_time: int,
    tables: EmbeddingTables,
    timestamp=None,
) -> torch.Tensor:
    """
    Sum variable, level/species, spatial Fourier and lead-time embeddings
    into one (N_q, D) query per output channel.

    The spatial term embeds every grid cell and is linearly interpolated along
    the cell axis down to N_q rows. An absolute time term is added only when
    `timestamp` is given.
    """
    keys = schema.channel_keys()
    n_q = len(keys)
    channel = tables.channel_embedding(keys)
    x, y = grid_centroids(grid)
    cells = tables.position_embedding(x, y)
    spatial = F.interpolate(cells.T.unsqueeze(0), size=n_q, mode="linear", align_corners=True)[0].T
    queries = channel + spatial + tables.lead_embedding(lead_time)
    if timestamp is not None:
        queries = queries + tables.time_embedding([months_since_origin(timestamp)])
    return queries


class OutputHeads(nn.Module):
    """One linear head per variable group mapping D to a full H * W map."""

    def __init__(self, schema: BatchSchema, grid: GridSpec, embed_dim: int):
        super().__init__()
        self.schema = schema
        self.grid = grid
        self.heads = nn.ModuleDict({g.group_name: nn.Linear(embed_dim, grid.height * grid.width) for g in schema})
        for head in self.heads.values():
            nn.init.normal_(head.weight, std=EMBEDDING_INIT_STD)
            nn.init.zeros_(head.bias)

    def forward(self, decoded: torch.Tensor) -> torch.Tensor:
        """(B, N_q, D) -> (B, C, H, W); row i of the input feeds channel i only."""
        B, n_q, _ = decoded.shape
        if n_q != self.schema.channel_count:
            raise ValueError(f"{n_q} decoded rows do not align with {self.schema.channel_count} output channels")
        maps = [self.heads[name](decoded[:, sl]) for name, sl in self.schema.group_slices().items()]
        return torch.cat(maps, dim=1).reshape(B, n_q, self.grid.height, self.grid.width)


def project_outputs(
    decoded: torch.Tensor,
    heads: OutputHeads,
    timestamp,
    lead_time: int,
) -> Batch:
    """Project one sample's decoded rows (N_q, D) to a single-timestep Batch."""
    if decoded.dim() == 2:
        decoded = decoded.unsqueeze(0)
    if decoded.shape[0] != 1:
        raise ValueError("project_outputs handles one sample at a time")
    maps = heads(decoded)
    return Batch.from_channels(maps, heads.grid, heads.schema, (timestamp,), lead_time)


def group_maps(batch: Batch, group_name: str) -> torch.Tensor:
    """(vars, levels or species, H, W) view of a single-timestep prediction."""
    return batch.level_view(group_name)[0]
