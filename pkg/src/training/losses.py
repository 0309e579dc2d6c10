"""
Weighted L1 objectives. Every loss takes the spatial mean per channel,
multiplies it by the channel's variable weight and sums over channels;
leading sample dimensions are averaged.
"""

from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import torch

from ..data_model import Batch, BatchSchema
from ..errors import ConfigError, DataError

TensorOrBatch = Union[torch.Tensor, Batch]

_DEFAULT_WEIGHTS = {
    "surface": {"t2m": 2.50, "msl": 1.50, "slt": 0.80, "z": 1.00, "u10": 0.77, "v10": 0.66, "lsm": 1.20},
    "edaphic": {"swvl1": 1.10, "swvl2": 0.90, "stl1": 0.70, "stl2": 0.60},
    "atmospheric": {"z": 2.80, "t": 1.70, "u": 0.87, "v": 0.60, "q": 0.78},
    "climate": {
        "smlt": 1.00,
        "tp": 2.20,
        "csfr": 0.60,
        "avg_sdswrf": 0.90,
        "avg_snswrf": 0.70,
        "avg_snlwrf": 0.50,
        "avg_tprate": 2.00,
        "avg_sdswrfcs": 0.50,
        "sd": 0.90,
        "t2m": 2.50,
        "d2m": 1.30,
    },
    "vegetation": {"NDVI": 0.80},
    "land": {"Land": 0.60},
    "agriculture": {"Agriculture": 0.40, "Arable": 0.30, "Cropland": 0.40},
    "forest": {"Forest": 1.20},
    "redlist": {"RLI": 1.30},
    "miscellaneous": {"avg_slhtf": 1.20, "avg_pevr": 1.00},
    "species": {"species": 10.00},
}


@dataclass
class VariableWeights:
    """Loss weight per (group, variable); levels and species share their variable's weight."""

    table: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, w in self.table.items():
            if not w > 0:
                raise ConfigError(f"Weight for {key[0]}/{key[1]} must be positive, got {w}")

    @classmethod
    def default(cls) -> "VariableWeights":
        return cls({(g, v): w for g, entries in _DEFAULT_WEIGHTS.items() for v, w in entries.items()})

    @classmethod
    def uniform(cls, schema: BatchSchema) -> "VariableWeights":
        return cls({(g.group_name, v): 1.0 for g in schema for v in g.variables})

    def __getitem__(self, key: Tuple[str, str]) -> float:
        try:
            return self.table[key]
        except KeyError:
            raise DataError(f"No loss weight for {key[0]}/{key[1]}") from None

    def for_schema(self, schema: BatchSchema) -> torch.Tensor:
        """Per-channel weights (C,) in schema order, float64."""
        return torch.tensor([self[(k.group, k.variable)] for k in schema.channel_keys()], dtype=torch.float64)

    def with_overrides(self, overrides: Dict[str, float]) -> "VariableWeights":
        """Apply {"group/variable": weight} overrides."""
        table = dict(self.table)
        for label, w in overrides.items():
            group, _, variable = label.partition("/")
            table[(group, variable)] = float(w)
        return VariableWeights(table)


def _channels(x: TensorOrBatch) -> torch.Tensor:
    return x.to_channels() if isinstance(x, Batch) else x


def weighted_l1(diff: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """diff (..., C, H, W); per-channel spatial mean of |diff|, weighted, summed over C."""
    if diff.dim() < 3 or diff.shape[-3] != weights.shape[0]:
        raise ValueError(f"Difference of shape {tuple(diff.shape)} does not match {weights.shape[0]} weights")
    per_channel = diff.abs().mean(dim=(-2, -1))
    per_channel = per_channel.reshape(-1, per_channel.shape[-1]).mean(dim=0)
    return (per_channel * weights.to(per_channel.dtype)).sum()


def _check(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"Shape mismatch: {sorted(shapes)}")


def mae_loss(pred: TensorOrBatch, target: TensorOrBatch, weights: torch.Tensor) -> torch.Tensor:
    pred, target = _channels(pred), _channels(target)
    _check(pred, target)
    return weighted_l1(pred - target, weights)


def td_loss(pred_increment: torch.Tensor, x_t: TensorOrBatch, x_next: TensorOrBatch, weights: torch.Tensor):
    """Weighted L1 between the predicted increment and x_next - x_t."""
    x_t, x_next = _channels(x_t), _channels(x_next)
    _check(pred_increment, x_t, x_next)
    return weighted_l1(pred_increment - (x_next - x_t), weights)


def group_losses(
    pred_increment: torch.Tensor, x_t: torch.Tensor, x_next: torch.Tensor, weights: torch.Tensor,
    schema: BatchSchema,
) -> Dict[str, float]:
    with torch.no_grad():
        diff = pred_increment - (x_next - x_t)
        return {
            name: float(weighted_l1(diff[..., sl, :, :], weights[sl]))
            for name, sl in schema.group_slices().items()
        }


def ft_loss(
    model,
    states: Sequence[torch.Tensor],
    timestamps: Sequence,
    weights: torch.Tensor,
    steps: int,
    lead_time: int = 1,
    breakdown: Optional[Dict[str, float]] = None,
) -> torch.Tensor:
    """
    Multi-step rollout objective with push-forward gradients.

    Args:
        model: Emulator exposing `step_normalized`.
        states: At least steps + 2 normalized states (B, C, H, W), oldest first.
        timestamps: Month of each state.
        weights: Per-channel weights (C,).
        steps: Rollout length K.
        breakdown: When given, receives per-group losses of the last step.

    Returns:
        Mean of the K per-step increment losses. Steps before the last run
        without gradient tracking, so only the final forward pass receives
        gradients.
    """
    if steps < 1:
        raise ValueError(f"Rollout length must be at least 1, got {steps}")
    if len(states) < steps + 2 or len(timestamps) < steps + 2:
        raise ValueError(f"A {steps}-step rollout needs {steps + 2} states, got {len(states)}")

    prev, curr = states[0], states[1]
    losses = []
    for k in range(steps):
        last = k == steps - 1
        with nullcontext() if last else torch.no_grad():
            delta = model.step_normalized(prev, curr, (timestamps[k], timestamps[k + 1]), lead_time)
            losses.append(td_loss(delta, curr, states[k + 2], weights))
        if last and breakdown is not None:
            breakdown.update(group_losses(delta, curr, states[k + 2], weights, model.schema))
        prev, curr = curr, (curr + delta).detach()
    return torch.stack(losses).mean()
