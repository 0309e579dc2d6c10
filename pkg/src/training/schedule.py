import math
from dataclasses import dataclass
from typing import Iterable, Tuple

import torch

from ..errors import ConfigError


@dataclass(frozen=True)
class OptimSchedule:
    base_lr: float = 5e-5
    weight_decay: float = 5e-6
    period: int = 8000
    floor: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.period < 1:
            raise ConfigError(f"optim.period must be at least 1, got {self.period}")
        if self.base_lr < 0 or self.floor < 0 or self.floor > self.base_lr:
            raise ConfigError(f"Need 0 <= floor <= base_lr, got floor={self.floor}, base_lr={self.base_lr}")


def lr_at(step: int, schedule: OptimSchedule) -> float:
    """Cosine annealing from base_lr to floor within each period, restarting at every multiple of it."""
    if step < 0:
        raise ValueError(f"Step must be non-negative, got {step}")
    t = step % schedule.period
    return schedule.floor + (schedule.base_lr - schedule.floor) * (1 + math.cos(math.pi * t / schedule.period)) / 2


def build_optimizer(parameters: Iterable[torch.nn.Parameter], schedule: OptimSchedule):
    """AdamW with the schedule's warm-restart cosine scheduler attached."""
    optimizer = torch.optim.AdamW(
        parameters,
        lr=schedule.base_lr,
        betas=schedule.betas,
        eps=schedule.eps,
        weight_decay=schedule.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        optimizer, T_0=schedule.period, eta_min=schedule.floor
    )
    return optimizer, scheduler
