"""Linear probing of frozen decoder embeddings against gridded targets."""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn

from .metrics import r_squared, rmse
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    rmse: float
    r2: float
    losses: List[float] = field(default_factory=list)


class LinearProbe(nn.Module):
    """Regression head mapping one embedding row to an (H, W) map."""

    def __init__(self, embed_dim: int, height: int, width: int):
        super().__init__()
        self.shape = (height, width)
        self.head = nn.Linear(embed_dim, height * width)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.head(features).reshape(*features.shape[:-1], *self.shape)


def evaluate_probe(probe: LinearProbe, features: torch.Tensor, targets: torch.Tensor) -> ProbeResult:
    with torch.no_grad():
        pred = probe(features)
    return ProbeResult(rmse(pred[None], targets[None]).aggregate, r_squared(pred, targets))


def fit_linear_probe(
    features: torch.Tensor,
    targets: torch.Tensor,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
) -> Tuple[LinearProbe, ProbeResult]:
    """
    Fit a probe with MSE on detached features (samples, D) against targets
    (samples, H, W) and score it on the same data.
    """
    if features.shape[0] != targets.shape[0] or features.shape[0] < 2:
        raise ValueError(f"Need matching sample counts >= 2, got {features.shape[0]} and {targets.shape[0]}")
    features, targets = features.detach(), targets.detach().to(features.dtype)
    torch.manual_seed(derive_seed(seed, "init", 2))
    probe = LinearProbe(features.shape[-1], *targets.shape[-2:]).to(features.dtype)
    optimizer = torch.optim.Adam(probe.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        optimizer.zero_grad(set_to_none=True)
        loss = nn.functional.mse_loss(probe(features), targets)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    result = evaluate_probe(probe, features, targets)
    result.losses = losses
    logger.info(f"Linear probe: RMSE {result.rmse:.4g}, R^2 {result.r2:.4g}")
    return probe, result
