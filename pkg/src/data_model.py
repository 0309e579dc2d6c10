"""
Grids, variable-group schemas, batches and normalization statistics.

Every other module consumes these types. Arrays inside a Batch are torch
tensors of shape (T, C_g, H, W); channels inside a group are ordered
variable-major, then level (or species). Groups are always laid out in
GROUP_ORDER, so flattening a batch to (T, C, H, W) is reproducible.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from .errors import DataError, MissingStatisticError, SchemaError

logger = logging.getLogger(__name__)

GROUP_ORDER = (
    "surface",
    "edaphic",
    "atmospheric",
    "climate",
    "miscellaneous",
    "vegetation",
    "land",
    "agriculture",
    "redlist",
    "forest",
    "species",
)

BATCH_TIMESTEPS = 2
TIME_ORIGIN = np.datetime64("2000-01", "M")

PRESSURE_LEVELS = (1000, 925, 850, 700, 600, 500, 400, 300, 250, 200, 150, 100, 50)


@dataclass(frozen=True)
class SpeciesInfo:
    species_id: int
    category: str
    scientific_name: str


MASTER_SPECIES = (
    SpeciesInfo(8077224, "farmland birds", "Alauda arvensis"),
    SpeciesInfo(2491534, "farmland birds", "Emberiza citrinella"),
    SpeciesInfo(2473958, "farmland birds", "Perdix perdix"),
    SpeciesInfo(4408498, "farmland birds", "Crex crex"),
    SpeciesInfo(9809229, "farmland birds", "Sturnus vulgaris"),
    SpeciesInfo(2431885, "herptiles", "Triturus cristatus"),
    SpeciesInfo(8909809, "herptiles", "Emys orbicularis"),
    SpeciesInfo(2430567, "herptiles", "Pelobates fuscus"),
    SpeciesInfo(8002952, "invasive alien species", "Ambrosia artemisiifolia"),
    SpeciesInfo(2437394, "invasive alien species", "Callosciurus erythraeus"),
    SpeciesInfo(3034825, "invasive alien species", "Heracleum mantegazzianum"),
    SpeciesInfo(2891770, "invasive alien species", "Impatiens glandulifera"),
    SpeciesInfo(5218786, "invasive alien species", "Procyon lotor"),
    SpeciesInfo(5219173, "large carnivores", "Canis lupus"),
    SpeciesInfo(2433433, "large carnivores", "Ursus arctos"),
    SpeciesInfo(2435240, "large carnivores", "Lynx lynx"),
    SpeciesInfo(5219219, "large carnivores", "Canis aureus"),
    SpeciesInfo(5219073, "large carnivores", "Gulo gulo"),
    SpeciesInfo(2435261, "mediterranean species", "Lynx pardinus"),
    SpeciesInfo(5844449, "mediterranean species", "Aquila fasciata"),
    SpeciesInfo(2441454, "mediterranean species", "Testudo hermanni"),
    SpeciesInfo(2434779, "mediterranean species", "Monachus monachus"),
    SpeciesInfo(8894817, "mediterranean species", "Caretta caretta"),
    SpeciesInfo(1340503, "pollinators", "Bombus terrestris"),
    SpeciesInfo(1340361, "pollinators", "Bombus hyperboreus"),
    SpeciesInfo(1898286, "pollinators", "Vanessa atalanta"),
    SpeciesInfo(1920506, "pollinators", "Pieris brassicae"),
    SpeciesInfo(1536449, "pollinators", "Episyrphus balteatus"),
)
MASTER_SPECIES_IDS = tuple(s.species_id for s in MASTER_SPECIES)

GROUP_VARIABLES = {
    "surface": ("t2m", "msl", "slt", "z", "u10", "v10", "lsm"),
    "edaphic": ("swvl1", "swvl2", "stl1", "stl2"),
    "atmospheric": ("z", "t", "u", "v", "q"),
    "climate": (
        "smlt",
        "tp",
        "csfr",
        "avg_sdswrf",
        "avg_snswrf",
        "avg_snlwrf",
        "avg_tprate",
        "avg_sdswrfcs",
        "sd",
        "t2m",
        "d2m",
    ),
    "miscellaneous": ("avg_slhtf", "avg_pevr"),
    "vegetation": ("NDVI",),
    "land": ("Land",),
    "agriculture": ("Agriculture", "Arable", "Cropland"),
    "redlist": ("RLI",),
    "forest": ("Forest",),
    "species": ("species",),
}


def to_month(value: Any) -> np.datetime64:
    """Coerce a date-like value to a month-resolution datetime64."""
    return np.datetime64(value).astype("datetime64[M]")


def months_since_origin(timestamp: Any) -> int:
    return int((to_month(timestamp) - TIME_ORIGIN).astype(int))


@dataclass(frozen=True)
class GridSpec:
    """
    Regular lat/lon grid. Grid points sit at lat_min + k * resolution and
    lon_min + k * resolution. Rows run north to south.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    resolution: float

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ValueError(f"lat_min {self.lat_min} must be below lat_max {self.lat_max}")
        if not self.lon_min < self.lon_max:
            raise ValueError(f"lon_min {self.lon_min} must be below lon_max {self.lon_max}")
        for lon in (self.lon_min, self.lon_max):
            if not -180.0 < lon <= 180.0:
                raise ValueError(f"Longitude bound {lon} outside (-180, 180]")
        if self.resolution <= 0:
            raise ValueError(f"Resolution must be positive, got {self.resolution}")

    @property
    def height(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.resolution))

    @property
    def width(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.resolution))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def latitudes(self) -> np.ndarray:
        """Row coordinates, descending (north to south)."""
        k = np.arange(self.height - 1, -1, -1, dtype=np.float64)
        return self.lat_min + k * self.resolution

    def longitudes(self) -> np.ndarray:
        return self.lon_min + np.arange(self.width, dtype=np.float64) * self.resolution

    def to_dict(self) -> Dict[str, float]:
        return {
            "lat_min": self.lat_min,
            "lat_max": self.lat_max,
            "lon_min": self.lon_min,
            "lon_max": self.lon_max,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "GridSpec":
        return cls(**{k: float(d[k]) for k in ("lat_min", "lat_max", "lon_min", "lon_max", "resolution")})

    @classmethod
    def europe(cls) -> "GridSpec":
        return cls(32.0, 72.0, -25.0, 45.0, 0.25)

    @classmethod
    def desk(cls) -> "GridSpec":
        return cls(32.0, 36.0, -25.0, -18.0, 0.25)

    @classmethod
    def mini(cls) -> "GridSpec":
        return cls(32.0, 34.0, -25.0, -21.5, 0.25)


class ChannelKey(NamedTuple):
    group: str
    variable: str
    level: Optional[int] = None

    def label(self) -> str:
        if self.level is None:
            return f"{self.group}/{self.variable}"
        return f"{self.group}/{self.variable}@{self.level}"


@dataclass(frozen=True)
class VariableGroupSchema:
    group_name: str
    variables: Tuple[str, ...]
    levels: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.group_name not in GROUP_ORDER:
            raise SchemaError(f"Unknown variable group '{self.group_name}'")
        if not self.variables:
            raise SchemaError(f"Group '{self.group_name}' has no variables")
        if self.levels is not None and len(self.levels) == 0:
            object.__setattr__(self, "levels", None)

    @property
    def channel_count(self) -> int:
        return len(self.variables) * max(1, len(self.levels or ()))

    def channel_keys(self) -> List[ChannelKey]:
        if self.levels is None:
            return [ChannelKey(self.group_name, v) for v in self.variables]
        return [ChannelKey(self.group_name, v, int(lvl)) for v in self.variables for lvl in self.levels]

    def variable_index(self, variable: str) -> int:
        try:
            return self.variables.index(variable)
        except ValueError:
            raise SchemaError(f"Variable '{variable}' not in group '{self.group_name}'") from None


@dataclass(frozen=True)
class BatchSchema:
    """Ordered collection of variable groups."""

    groups: Tuple[VariableGroupSchema, ...]

    def __post_init__(self):
        names = [g.group_name for g in self.groups]
        if len(set(names)) != len(names):
            raise SchemaError(f"Duplicate groups in schema: {names}")
        ordered = sorted(self.groups, key=lambda g: GROUP_ORDER.index(g.group_name))
        object.__setattr__(self, "groups", tuple(ordered))

    def __iter__(self) -> Iterator[VariableGroupSchema]:
        return iter(self.groups)

    def __contains__(self, group_name: str) -> bool:
        return any(g.group_name == group_name for g in self.groups)

    def group(self, group_name: str) -> VariableGroupSchema:
        for g in self.groups:
            if g.group_name == group_name:
                return g
        raise SchemaError(f"Group '{group_name}' not in schema")

    @property
    def group_names(self) -> Tuple[str, ...]:
        return tuple(g.group_name for g in self.groups)

    @property
    def channel_count(self) -> int:
        return sum(g.channel_count for g in self.groups)

    def channel_keys(self) -> List[ChannelKey]:
        keys: List[ChannelKey] = []
        for g in self.groups:
            keys.extend(g.channel_keys())
        return keys

    def group_slices(self) -> Dict[str, slice]:
        slices, start = {}, 0
        for g in self.groups:
            slices[g.group_name] = slice(start, start + g.channel_count)
            start += g.channel_count
        return slices

    @property
    def species_ids(self) -> Tuple[int, ...]:
        if "species" not in self:
            return ()
        return tuple(self.group("species").levels or ())

    @property
    def pressure_levels(self) -> Tuple[int, ...]:
        if "atmospheric" not in self:
            return ()
        return tuple(self.group("atmospheric").levels or ())

    def to_dict(self) -> List[Dict[str, Any]]:
        return [
            {
                "group": g.group_name,
                "variables": list(g.variables),
                "levels": None if g.levels is None else list(g.levels),
            }
            for g in self.groups
        ]

    @classmethod
    def from_dict(cls, groups: Sequence[Dict[str, Any]]) -> "BatchSchema":
        return cls(
            tuple(
                VariableGroupSchema(
                    d["group"],
                    tuple(d["variables"]),
                    None if d.get("levels") is None else tuple(int(x) for x in d["levels"]),
                )
                for d in groups
            )
        )

    @classmethod
    def pretraining(cls) -> "BatchSchema":
        """The 10-group, 113-channel pre-training configuration."""
        return cls._from_groups([g for g in GROUP_ORDER if g != "climate"])

    @classmethod
    def extended(cls) -> "BatchSchema":
        return cls._from_groups(list(GROUP_ORDER))

    @classmethod
    def desk(cls) -> "BatchSchema":
        return cls(
            (
                VariableGroupSchema("surface", ("t2m", "msl")),
                VariableGroupSchema("atmospheric", ("t",), (1000, 850)),
                VariableGroupSchema("species", ("species",), (1920506, 1898286, 8077224)),
            )
        )

    @classmethod
    def _from_groups(cls, names: Sequence[str]) -> "BatchSchema":
        groups = []
        for name in names:
            levels = None
            if name == "atmospheric":
                levels = PRESSURE_LEVELS
            elif name == "species":
                levels = MASTER_SPECIES_IDS
            groups.append(VariableGroupSchema(name, GROUP_VARIABLES[name], levels))
        return cls(tuple(groups))


@dataclass
class Batch:
    """
    Multi-group gridded observation cube.

    Built batches carry BATCH_TIMESTEPS consecutive months; single-month
    slices (T=1) are used as model inputs and predictions.
    """

    grid: GridSpec
    schema: BatchSchema
    timestamps: Tuple[np.datetime64, ...]
    lead_time: int
    groups: Dict[str, torch.Tensor]

    def __post_init__(self):
        self.timestamps = tuple(to_month(t) for t in self.timestamps)
        self.validate()

    @property
    def num_timesteps(self) -> int:
        return len(self.timestamps)

    @property
    def species_ids(self) -> Tuple[int, ...]:
        return self.schema.species_ids

    @property
    def pressure_levels(self) -> Tuple[int, ...]:
        return self.schema.pressure_levels

    def validate(self) -> None:
        if self.num_timesteps not in (1, BATCH_TIMESTEPS):
            raise SchemaError(f"Batch must carry 1 or {BATCH_TIMESTEPS} timesteps, got {self.num_timesteps}")
        if set(self.groups) != set(self.schema.group_names):
            raise SchemaError(
                f"Batch groups {sorted(self.groups)} do not match schema groups {list(self.schema.group_names)}"
            )
        H, W = self.grid.shape
        for g in self.schema:
            array = self.groups[g.group_name]
            expected = (self.num_timesteps, g.channel_count, H, W)
            if tuple(array.shape) != expected:
                raise SchemaError(f"Group '{g.group_name}' has shape {tuple(array.shape)}, expected {expected}")
            if not bool(torch.isfinite(array).all()):
                bad = int((~torch.isfinite(array)).sum())
                raise DataError(f"Group '{g.group_name}' holds {bad} non-finite values")

    def has_nan(self) -> bool:
        return any(bool(torch.isnan(a).any()) for a in self.groups.values())

    def to_channels(self) -> torch.Tensor:
        """Flatten all groups to a (T, C, H, W) tensor in schema order."""
        return torch.cat([self.groups[name] for name in self.schema.group_names], dim=1)

    @classmethod
    def from_channels(
        cls,
        channels: torch.Tensor,
        grid: GridSpec,
        schema: BatchSchema,
        timestamps: Sequence[Any],
        lead_time: int,
    ) -> "Batch":
        if channels.dim() != 4 or channels.shape[1] != schema.channel_count:
            raise SchemaError(
                f"Channel tensor of shape {tuple(channels.shape)} does not match schema with "
                f"{schema.channel_count} channels"
            )
        groups = {name: channels[:, sl] for name, sl in schema.group_slices().items()}
        return cls(grid, schema, tuple(timestamps), lead_time, groups)

    def slice(self, t: int) -> "Batch":
        return Batch(
            self.grid,
            self.schema,
            (self.timestamps[t],),
            self.lead_time,
            {k: v[t : t + 1] for k, v in self.groups.items()},
        )

    def level_view(self, group_name: str) -> torch.Tensor:
        """(T, V, L, H, W) view of a group with levels or species."""
        g = self.schema.group(group_name)
        T, _, H, W = self.groups[group_name].shape
        return self.groups[group_name].reshape(T, len(g.variables), max(1, len(g.levels or ())), H, W)

    def with_groups(self, groups: Dict[str, torch.Tensor]) -> "Batch":
        return replace(self, groups=groups)

    @staticmethod
    def concat_time(first: "Batch", second: "Batch") -> "Batch":
        if first.schema != second.schema or first.grid != second.grid:
            raise SchemaError("Cannot join batches with different schema or grid")
        return Batch(
            first.grid,
            first.schema,
            first.timestamps + second.timestamps,
            first.lead_time,
            {k: torch.cat([first.groups[k], second.groups[k]], dim=0) for k in first.groups},
        )


@dataclass
class NormStats:
    """Per (group, variable, level) centre/scale pairs."""

    entries: Dict[ChannelKey, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for key, (_, scale) in self.entries.items():
            if not scale > 0:
                raise DataError(f"Scale for {key.label()} must be positive, got {scale}")

    def lookup(self, key: ChannelKey) -> Tuple[float, float]:
        try:
            return self.entries[key]
        except KeyError:
            raise MissingStatisticError(key.group, key.variable, key.level) from None

    def vectors(self, schema: BatchSchema) -> Tuple[np.ndarray, np.ndarray]:
        """centre and scale as float64 arrays in schema channel order."""
        pairs = [self.lookup(k) for k in schema.channel_keys()]
        centre = np.array([p[0] for p in pairs], dtype=np.float64)
        scale = np.array([p[1] for p in pairs], dtype=np.float64)
        return centre, scale

    def to_dict(self) -> List[Dict[str, Any]]:
        return [
            {"group": k.group, "variable": k.variable, "level": k.level, "centre": c, "scale": s}
            for k, (c, s) in self.entries.items()
        ]

    @classmethod
    def from_dict(cls, rows: Sequence[Dict[str, Any]]) -> "NormStats":
        entries = {}
        for row in rows:
            level = row.get("level")
            key = ChannelKey(row["group"], row["variable"], None if level is None else int(level))
            entries[key] = (float(row["centre"]), float(row["scale"]))
        return cls(entries)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            yaml.safe_dump({"norm_stats": self.to_dict()}, f, sort_keys=False)

    @classmethod
    def load(cls, path: str) -> "NormStats":
        with open(path, "r") as f:
            return cls.from_dict(yaml.safe_load(f)["norm_stats"])


def compute_norm_stats(dataset: Sequence[Batch]) -> NormStats:
    """
    Dataset-wide mean and standard deviation per (group, variable, level).

    Accumulation runs in float64 by merging per-batch moments. A zero
    standard deviation (constant field) is replaced by 1.
    """
    if len(dataset) == 0:
        raise DataError("Cannot compute normalization statistics of an empty dataset")
    schema = dataset[0].schema
    count = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    for i, batch in enumerate(dataset):
        if batch.schema != schema:
            raise SchemaError(f"Batch {i} schema differs from batch 0")
        x = batch.to_channels().detach().cpu().numpy().astype(np.float64)
        x = np.moveaxis(x, 1, 0).reshape(schema.channel_count, -1)
        n_b = x.shape[1]
        mean_b = x.mean(axis=1)
        m2_b = ((x - mean_b[:, None]) ** 2).sum(axis=1)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * n_b / total
        m2 = m2 + m2_b + delta**2 * count * n_b / total
        count = total

    std = np.sqrt(m2 / count)
    entries = {}
    for key, c, s in zip(schema.channel_keys(), mean, std):
        if s == 0.0:
            logger.debug(f"Constant field {key.label()}, using scale 1")
            s = 1.0
        entries[key] = (float(c), float(s))
    return NormStats(entries)


def _affine(batch: Batch, stats: NormStats, inverse: bool) -> Batch:
    centre, scale = stats.vectors(batch.schema)
    x = batch.to_channels()
    c = torch.as_tensor(centre, dtype=torch.float64, device=x.device).view(1, -1, 1, 1)
    s = torch.as_tensor(scale, dtype=torch.float64, device=x.device).view(1, -1, 1, 1)
    x64 = x.to(torch.float64)
    y = x64 * s + c if inverse else (x64 - c) / s
    return Batch.from_channels(y.to(x.dtype), batch.grid, batch.schema, batch.timestamps, batch.lead_time)


def normalize(batch: Batch, stats: NormStats) -> Batch:
    """Map every cell x to (x - centre) / scale."""
    return _affine(batch, stats, inverse=False)


def denormalize(batch: Batch, stats: NormStats) -> Batch:
    """Exact inverse of normalize: x * scale + centre."""
    return _affine(batch, stats, inverse=True)
