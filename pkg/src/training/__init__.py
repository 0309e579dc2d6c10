from .adapters import AdapterConfig, VeRALinear, inject_adapters, parameter_census
from .losses import VariableWeights, ft_loss, mae_loss, td_loss
from .schedule import OptimSchedule, build_optimizer, lr_at
from .trainer import Trainer, TrainingWindow, make_windows, state_sequence

__all__ = [
    "AdapterConfig",
    "VeRALinear",
    "inject_adapters",
    "parameter_census",
    "VariableWeights",
    "ft_loss",
    "mae_loss",
    "td_loss",
    "OptimSchedule",
    "build_optimizer",
    "lr_at",
    "Trainer",
    "TrainingWindow",
    "make_windows",
    "state_sequence",
]
