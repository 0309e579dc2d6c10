from .config import ModelConfig
from .emulator import BiodiversityEmulator, RolloutTrajectory
from .swin import SwinConfig

__all__ = ["ModelConfig", "BiodiversityEmulator", "RolloutTrajectory", "SwinConfig"]
