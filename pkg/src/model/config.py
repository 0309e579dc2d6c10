from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Tuple

from ..errors import ConfigError
from .swin import SwinConfig

MODEL_PRESETS = ("desk", "small", "medium")


@dataclass(frozen=True)
class ModelConfig:
    """
    Architectural hyperparameters of the emulator.

    `static_channels` lists channel labels ("group/variable") copied from the
    current state instead of being predicted.
    """

    patch_size: int
    embed_dim: int
    heads: int
    kv_groups: int
    depth: int
    latent_grid: Tuple[int, int, int]
    swin: SwinConfig
    num_bands: int
    max_freq: float
    dropout: float = 0.0
    decoder_time_encoding: bool = False
    static_channels: Tuple[str, ...] = field(default=("surface/lsm",))

    def __post_init__(self):
        object.__setattr__(self, "latent_grid", tuple(self.latent_grid))
        object.__setattr__(self, "static_channels", tuple(self.static_channels))
        if self.embed_dim % self.heads or self.heads % self.kv_groups:
            raise ConfigError(
                f"embed_dim={self.embed_dim}, heads={self.heads}, kv_groups={self.kv_groups} are inconsistent"
            )
        if self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even, got {self.embed_dim}")
        if len(self.latent_grid) != 3 or min(self.latent_grid) < 1:
            raise ConfigError(f"latent_grid must be three positive sizes, got {self.latent_grid}")

    @property
    def num_latents(self) -> int:
        d, h, w = self.latent_grid
        return d * h * w

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["latent_grid"] = list(self.latent_grid)
        d["static_channels"] = list(self.static_channels)
        d["swin"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["swin"].items()}
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        swin = d.pop("swin")
        return cls(swin=swin if isinstance(swin, SwinConfig) else SwinConfig(**swin), **d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "desk":
            base = cls(4, 64, 4, 2, 2, (2, 4, 4), SwinConfig.desk(), num_bands=8, max_freq=32.0)
        elif name == "small":
            base = cls(4, 384, 12, 4, 6, (2, 8, 14), SwinConfig.medium(), num_bands=64, max_freq=224.0)
        elif name == "medium":
            base = cls(2, 512, 16, 4, 10, (4, 16, 20), SwinConfig.large(), num_bands=64, max_freq=224.0)
        else:
            raise ConfigError(f"Unknown model preset '{name}', expected one of {MODEL_PRESETS}")
        return replace(base, **overrides) if overrides else base
