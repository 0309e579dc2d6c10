"""
The emulator: normalize, tokenize, encode, advance the latent state, decode
and project back to gridded maps. Predictions are increments added to the
current state; channels listed as static are carried over unchanged.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..data_model import Batch, BatchSchema, GridSpec, NormStats, normalize
from ..errors import NumericalFailure, SchemaError
from ..metrics import per_channel_mae
from .config import ModelConfig
from .decoder_heads import OutputHeads, build_queries
from .encodings import EmbeddingTables, embed_tokens, patchify
from .perceiver import AttentionConfig, PerceiverDecoder, PerceiverEncoder
from .swin import SwinUNetBackbone

logger = logging.getLogger(__name__)


@dataclass
class RolloutTrajectory:
    steps: List[Batch]
    diagnostics: List[Dict[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def timestamps(self) -> List[np.datetime64]:
        return [s.timestamps[0] for s in self.steps]


class BiodiversityEmulator(nn.Module):
    def __init__(self, config: ModelConfig, schema: BatchSchema, grid: GridSpec):
        super().__init__()
        self.config = config
        self.schema = schema
        self.grid = grid
        D = config.embed_dim
        self.tables = EmbeddingTables(schema, D, config.patch_size, config.num_bands, config.max_freq)
        self.query_tables = EmbeddingTables(schema, D, None, config.num_bands, config.max_freq)
        attention = AttentionConfig(D, config.heads, config.kv_groups, config.depth, config.dropout)
        self.encoder = PerceiverEncoder(attention, config.num_latents)
        self.backbone = SwinUNetBackbone(D, config.latent_grid, config.swin)
        self.decoder = PerceiverDecoder(attention)
        self.heads = OutputHeads(schema, grid, D)

        labels = [f"{k.group}/{k.variable}" for k in schema.channel_keys()]
        static = torch.tensor([label in config.static_channels for label in labels], dtype=torch.bool)
        self.register_buffer("static_mask", static, persistent=False)

    def _check(self, *batches: Batch) -> None:
        for b in batches:
            if b.schema != self.schema or b.grid != self.grid:
                raise SchemaError("Input batch schema or grid does not match the model")

    def decode_normalized(self, x_prev: torch.Tensor, x_curr: torch.Tensor, timestamps: Sequence, lead_time: int):
        """(B, C, H, W) normalized states -> (B, N_q, D) decoded embeddings."""
        x = torch.stack([x_prev, x_curr], dim=1)
        patches, patch_grid = patchify(x, self.config.patch_size)
        tokens = embed_tokens(patches, self.tables, self.schema, timestamps, lead_time, patch_grid)
        latents = self.backbone(self.encoder(tokens.tokens))
        target = timestamps[-1] + np.timedelta64(lead_time, "M")
        queries = build_queries(
            self.schema,
            self.grid,
            lead_time,
            self.query_tables,
            target if self.config.decoder_time_encoding else None,
        )
        return self.decoder(latents, queries)

    def step_normalized(self, x_prev: torch.Tensor, x_curr: torch.Tensor, timestamps: Sequence, lead_time: int):
        """Predicted normalized increment (B, C, H, W); zero on static channels."""
        delta = self.heads(self.decode_normalized(x_prev, x_curr, timestamps, lead_time))
        return delta.masked_fill(self.static_mask[None, :, None, None], 0.0)

    def forward(self, x_prev: Batch, x_curr: Batch, stats: NormStats) -> Batch:
        """
        Predict the state one lead time after `x_curr`.

        The increment is predicted in normalized space; adding it scaled back
        to physical units equals denormalizing the normalized sum.
        """
        self._check(x_prev, x_curr)
        timestamps = (x_prev.timestamps[0], x_curr.timestamps[0])
        lead_time = x_curr.lead_time
        prev_n = normalize(x_prev, stats).to_channels()
        curr_n = normalize(x_curr, stats).to_channels()
        delta = self.step_normalized(prev_n, curr_n, timestamps, lead_time)
        _, scale = stats.vectors(self.schema)
        scale_t = torch.as_tensor(scale, dtype=delta.dtype, device=delta.device).view(1, -1, 1, 1)
        curr = x_curr.to_channels()
        out = curr + delta * scale_t
        target = x_curr.timestamps[0] + np.timedelta64(lead_time, "M")
        if not bool(torch.isfinite(out).all()):
            raise NumericalFailure(f"Non-finite prediction for {target}", diagnostics={"target": str(target)})
        return Batch.from_channels(out, self.grid, self.schema, (target,), lead_time)

    def decoder_embeddings(self, x_prev: Batch, x_curr: Batch, stats: NormStats) -> torch.Tensor:
        """Decoded (N_q, D) rows for one sample, before the output heads."""
        self._check(x_prev, x_curr)
        prev_n = normalize(x_prev, stats).to_channels()
        curr_n = normalize(x_curr, stats).to_channels()
        timestamps = (x_prev.timestamps[0], x_curr.timestamps[0])
        return self.decode_normalized(prev_n, curr_n, timestamps, x_curr.lead_time)[0]

    def rollout(
        self,
        x_prev: Batch,
        x_curr: Batch,
        steps: int,
        stats: NormStats,
        truth: Optional[Sequence[Batch]] = None,
    ) -> RolloutTrajectory:
        """
        Autoregressive rollout: each step feeds the two most recent states,
        observed ones first and predictions thereafter. Runs in eval mode
        without gradients; when `truth` is given, per-channel MAE is recorded
        for every step it covers.
        """
        if steps < 1:
            raise ValueError(f"Rollout needs at least one step, got {steps}")
        was_training = self.training
        self.eval()
        trajectory = RolloutTrajectory([])
        try:
            with torch.no_grad():
                prev, curr = x_prev, x_curr
                for k in range(steps):
                    pred = self(prev, curr, stats)
                    trajectory.steps.append(pred)
                    if truth is not None and k < len(truth):
                        trajectory.diagnostics.append(per_channel_mae(pred, truth[k]))
                    prev, curr = curr, pred
        finally:
            self.train(was_training)
        return trajectory
