import argparse
import ast
import dataclasses
import logging
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import git
import yaml

from .data_model import BatchSchema, GridSpec
from .errors import ConfigError
from .model.config import ModelConfig
from .training.adapters import AdapterConfig
from .training.losses import VariableWeights
from .training.schedule import OptimSchedule

logger = logging.getLogger(name="Config")

COMMANDS = ("build-batches", "compute-stats", "train", "finetune", "rollout", "evaluate", "gradcheck")


@dataclass
class RunSection:
    seed: int = 0
    first_month: str = "2010-01"
    num_windows: int = 12


@dataclass
class GridSection:
    preset: str = "desk"
    lat_min: Optional[float] = None
    lat_max: Optional[float] = None
    lon_min: Optional[float] = None
    lon_max: Optional[float] = None
    resolution: Optional[float] = None


@dataclass
class SchemaSection:
    preset: str = "desk"
    species: Optional[List[int]] = None


@dataclass
class ModelSection:
    preset: str = "desk"
    patch_size: Optional[int] = None
    embed_dim: Optional[int] = None
    heads: Optional[int] = None
    kv_groups: Optional[int] = None
    depth: Optional[int] = None
    latent_grid: Optional[List[int]] = None
    num_bands: Optional[int] = None
    max_freq: Optional[float] = None
    dropout: Optional[float] = None
    decoder_time_encoding: Optional[bool] = None
    static_channels: Optional[List[str]] = None


@dataclass
class OptimSection:
    base_lr: float = 5e-5
    weight_decay: float = 5e-6
    period: int = 8000
    floor: float = 0.0
    clip_norm: float = 1.0


@dataclass
class TrainingSection:
    steps: int = 500
    rollout_steps: int = 1
    weights: Dict[str, float] = field(default_factory=dict)
    progress: bool = True


@dataclass
class FinetuneSection:
    steps: int = 200
    rollout_steps: int = 6
    use_adapters: bool = True


@dataclass
class AdaptersSection:
    rank: int = 8
    targets: List[str] = field(default_factory=lambda: ["attn.qkv", "attn.proj"])
    d_init: float = 0.1
    train_heads: bool = True


@dataclass
class EvaluationSection:
    rollout_steps: int = 12
    presence_threshold: float = 0.0
    land_channel: Optional[str] = None


@dataclass
class PathsSection:
    sources: str = "data/sources.yaml"
    batches: str = "data/batches"
    stats: str = "data/norm_stats.yaml"
    output: str = "runs"
    checkpoint: Optional[str] = None


@dataclass
class LoggingSection:
    log_level: str = "INFO"
    train_log: str = "train_log.jsonl"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    grid: GridSection = field(default_factory=GridSection)
    schema: SchemaSection = field(default_factory=SchemaSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    adapters: AdaptersSection = field(default_factory=AdaptersSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)
    logging: LoggingSection = field(default_factory=LoggingSection)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, values: Any, path: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"'{path or 'config'}' must be a mapping, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        where = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"Unknown configuration key(s): {where}")
    kwargs = {}
    for name, value in values.items():
        hint = hints[name]
        dotted = f"{path}.{name}" if path else name
        kwargs[name] = _build(hint, value, dotted) if dataclasses.is_dataclass(hint) else value
    return cls(**kwargs)


def parse_value(value: str) -> Any:
    """Python literal when possible, plain string otherwise."""
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        return value


def update_nested_dict(d: Dict, key_path: str, value: Any) -> None:
    keys = key_path.split(".")
    current = d
    for key in keys[:-1]:
        current = current.setdefault(key, {})
        if not isinstance(current, dict):
            raise ConfigError(f"Cannot override '{key_path}': '{key}' is not a section")
    current[keys[-1]] = value


def load_run_config(config_path: Optional[str], overrides: List[str] = ()) -> RunConfig:
    """
    Load a YAML run configuration and apply `section.key=value` overrides.

    Raises:
        ConfigError: Unreadable file, malformed override or unknown key.
    """
    raw: Dict[str, Any] = {}
    if config_path is not None:
        try:
            with open(config_path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot read configuration {config_path}: {e}") from e
    for override in overrides:
        key_path, sep, value_str = override.partition("=")
        if not sep or not key_path:
            raise ConfigError(f"Invalid override format '{override}'. Use section.key=value")
        update_nested_dict(raw, key_path, parse_value(value_str))
    return _build(RunConfig, raw, "")


def resolve_grid(cfg: RunConfig) -> GridSpec:
    presets = {"desk": GridSpec.desk, "europe": GridSpec.europe, "mini": GridSpec.mini}
    if cfg.grid.preset not in presets:
        raise ConfigError(f"Unknown grid preset '{cfg.grid.preset}', expected one of {sorted(presets)}")
    grid = presets[cfg.grid.preset]().to_dict()
    grid.update({k: v for k, v in asdict(cfg.grid).items() if k != "preset" and v is not None})
    try:
        return GridSpec.from_dict(grid)
    except ValueError as e:
        raise ConfigError(f"Invalid grid: {e}") from e


def resolve_schema(cfg: RunConfig) -> BatchSchema:
    presets = {"desk": BatchSchema.desk, "pretraining": BatchSchema.pretraining, "extended": BatchSchema.extended}
    if cfg.schema.preset not in presets:
        raise ConfigError(f"Unknown schema preset '{cfg.schema.preset}', expected one of {sorted(presets)}")
    schema = presets[cfg.schema.preset]()
    if cfg.schema.species is not None:
        groups = schema.to_dict()
        for g in groups:
            if g["group"] == "species":
                g["levels"] = [int(s) for s in cfg.schema.species]
        schema = BatchSchema.from_dict(groups)
    return schema


def resolve_model_config(cfg: RunConfig) -> ModelConfig:
    overrides = {k: v for k, v in asdict(cfg.model).items() if k != "preset" and v is not None}
    return ModelConfig.preset(cfg.model.preset, **overrides)


def resolve_schedule(cfg: RunConfig) -> OptimSchedule:
    return OptimSchedule(**asdict(cfg.optim))


def resolve_adapters(cfg: RunConfig) -> AdapterConfig:
    return AdapterConfig(seed=cfg.run.seed, **asdict(cfg.adapters))


def resolve_weights(cfg: RunConfig) -> VariableWeights:
    return VariableWeights.default().with_overrides(cfg.training.weights)


def git_revision() -> Optional[str]:
    try:
        repo = git.Repo(search_parent_directories=True)
        return repo.head.object.hexsha
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError):
        return None


def log_resolved_config(cfg: RunConfig) -> None:
    logger.info(f"Resolved configuration (revision {git_revision() or 'unknown'}):\n{cfg.to_yaml()}")


def build_parser(default_config_path: str) -> argparse.ArgumentParser:
    """
    Command-line surface: a subcommand plus --config and repeated --set.

    Usage example:
    python main.py train --config config.yaml --set optim.base_lr=1e-4
                         --set training.steps=200
    """
    parser = argparse.ArgumentParser(description="Biodiversity forecast emulator")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", default=default_config_path, help="Path to the configuration file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        help="Override config values. Format: section.key=value",
    )
    return parser


def parse_cli(argv: Optional[List[str]], default_config_path: str) -> Tuple[str, RunConfig]:
    args = build_parser(default_config_path).parse_args(argv)
    return args.command, load_run_config(args.config, args.set)
