"""
Single-process training loop: AdamW with warm-restart cosine schedule,
global-norm clipping, push-forward rollout loss and a JSON-lines log.
"""

import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from ..data_model import Batch, NormStats, normalize
from ..errors import DataError, NumericalFailure
from ..seeding import derive_seed
from .losses import VariableWeights, ft_loss
from .schedule import OptimSchedule, build_optimizer

logger = logging.getLogger(__name__)


@dataclass
class TrainingWindow:
    """steps + 2 consecutive normalized states (1, C, H, W) with their months."""

    states: List[torch.Tensor]
    timestamps: List[np.datetime64]
    lead_time: int = 1


def state_sequence(batches: Sequence[Batch]) -> List[Batch]:
    """
    Consecutive single-month states from overlapping two-month batches.

    Batch i covers months (m_i, m_i + 1); consecutive batches must start one
    month apart.
    """
    if not batches:
        raise DataError("No batches to build a state sequence from")
    states = [b.slice(0) for b in batches] + [batches[-1].slice(1)]
    months = [s.timestamps[0] for s in states]
    gaps = np.diff(np.array(months, dtype="datetime64[M]")).astype(int)
    if np.any(gaps != 1):
        raise DataError(f"Batches are not consecutive months: {[str(m) for m in months]}")
    return states


def make_windows(states: Sequence[Batch], stats: NormStats, steps: int) -> List[TrainingWindow]:
    """All sliding windows of steps + 2 normalized states."""
    if len(states) < steps + 2:
        raise DataError(f"A {steps}-step rollout needs {steps + 2} states, got {len(states)}")
    normalized = [normalize(s, stats).to_channels() for s in states]
    months = [s.timestamps[0] for s in states]
    lead = states[0].lead_time
    return [
        TrainingWindow(normalized[i : i + steps + 2], months[i : i + steps + 2], lead)
        for i in range(len(states) - steps - 1)
    ]


class Trainer:
    """
    Owns the optimizer state of one model.

    Args:
        model: The emulator; only parameters with requires_grad are optimized.
        weights: Variable loss weights.
        schedule: Optimizer and learning-rate schedule.
        rollout_steps: K of the rollout objective; 1 is plain one-step training.
        log_path: JSON-lines file receiving one record per step.
        seed: Root seed for the data order.
    """

    def __init__(
        self,
        model: torch.nn.Module,
        weights: VariableWeights,
        schedule: OptimSchedule,
        rollout_steps: int = 1,
        log_path: Optional[str] = None,
        seed: int = 0,
    ):
        self.model = model
        self.schedule = schedule
        self.rollout_steps = rollout_steps
        self.log_path = log_path
        self.seed = seed
        self.channel_weights = weights.for_schema(model.schema)
        self.trainable = [p for p in model.parameters() if p.requires_grad]
        if not self.trainable:
            raise NumericalFailure("Model has no trainable parameters")
        self.optimizer, self.scheduler = build_optimizer(self.trainable, schedule)
        self.step = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def train_step(self, window: TrainingWindow) -> float:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        breakdown = {}
        loss = ft_loss(
            self.model,
            window.states,
            window.timestamps,
            self.channel_weights,
            self.rollout_steps,
            window.lead_time,
            breakdown,
        )
        lr = self.lr
        if not torch.isfinite(loss):
            raise NumericalFailure(
                f"Non-finite loss at step {self.step}",
                diagnostics={"step": self.step, "lr": lr, "loss": float(loss), "group_losses": breakdown},
            )
        loss.backward()
        if self.schedule.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.trainable, self.schedule.clip_norm)
        self.optimizer.step()
        self.scheduler.step()

        value = float(loss.detach())
        self._log({"step": self.step, "lr": lr, "loss": value, "group_losses": breakdown})
        self.step += 1
        return value

    def fit(self, windows: Sequence[TrainingWindow], steps: int, progress: bool = True) -> List[float]:
        """Run `steps` updates, reshuffling the windows every pass."""
        if not windows:
            raise DataError("No training windows")
        losses: List[float] = []
        order: List[int] = []
        epoch = 0
        for _ in tqdm(range(steps), desc="training", disable=not progress):
            if not order:
                rng = np.random.default_rng(derive_seed(self.seed, "data", epoch))
                order = rng.permutation(len(windows)).tolist()
                epoch += 1
            losses.append(self.train_step(windows[order.pop(0)]))
        logger.info(f"Finished {steps} steps, final loss {losses[-1]:.6g}")
        return losses

    def _log(self, record: dict) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a") as f:
            f.write(json.dumps(record) + "\n")
