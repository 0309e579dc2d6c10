import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
import xarray as xr

from ..data_model import ChannelKey, GridSpec, VariableGroupSchema, to_month
from ..errors import DataError, MalformedRowError

logger = logging.getLogger(name="Batch sources")

SOURCE_KINDS = ("gridded_reanalysis", "tabular_indicator", "species_records")
TABULAR_LAYOUTS = ("A", "B")
SPECIES_COLUMNS = ("species_id", "lat", "lon", "timestamp", "distribution_value")

_LAT_NAMES = ("lat", "latitude")
_LON_NAMES = ("lon", "longitude")
_TIME_NAMES = ("time", "valid_time")
_LEVEL_NAMES = ("level", "pressure_level", "plev", "isobaricInhPa")
_YEAR_COLUMN = re.compile(r"^\d{4}$")

# netCDF4/HDF5 is not thread-safe; every file access goes through this lock
_NETCDF_LOCK = threading.Lock()


@dataclass(frozen=True)
class MonthWindow:
    """Two consecutive calendar months starting at `start`."""

    start: np.datetime64

    def __post_init__(self):
        object.__setattr__(self, "start", to_month(self.start))

    @property
    def months(self) -> Tuple[np.datetime64, np.datetime64]:
        return self.start, self.start + np.timedelta64(1, "M")

    @property
    def label(self) -> str:
        return str(self.start)

    @classmethod
    def series(cls, first: str, count: int) -> List["MonthWindow"]:
        start = to_month(first)
        return [cls(start + np.timedelta64(i, "M")) for i in range(count)]


@dataclass(frozen=True)
class SourceDescriptor:
    kind: str
    path: str
    group: str
    layout: Optional[str] = None

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise DataError(f"Unknown source kind '{self.kind}' for {self.path}")
        if self.kind == "tabular_indicator" and self.layout not in TABULAR_LAYOUTS:
            raise DataError(f"Unknown tabular layout '{self.layout}' for {self.path}")


@dataclass
class IngestResult:
    """
    Rasters of shape (2, H, W) keyed by channel, plus missing-entry log.

    `filled` lists channels that are zero placeholders for data the source
    does not carry at all.
    """

    rasters: Dict[ChannelKey, np.ndarray] = field(default_factory=dict)
    missing: List[str] = field(default_factory=list)
    filled: Set[ChannelKey] = field(default_factory=set)

    def note_missing(self, message: str) -> None:
        logger.warning(message)
        self.missing.append(message)


def wrap_longitude(lon: float) -> float:
    """
    Wrap a longitude into (-180, 180].

    Examples:
        >>> wrap_longitude(190.0)
        -170.0
        >>> wrap_longitude(-540.0)
        180.0
    """
    if not math.isfinite(lon):
        raise ValueError(f"Longitude must be finite, got {lon}")
    return 180.0 - ((180.0 - lon) % 360.0)


def wrap_longitudes(lons: np.ndarray) -> np.ndarray:
    lons = np.asarray(lons, dtype=np.float64)
    if not np.all(np.isfinite(lons)):
        raise ValueError("Longitudes must be finite")
    return 180.0 - np.mod(180.0 - lons, 360.0)


def _snap_index(coord, origin: float, resolution: float):
    # ties go to the higher coordinate
    return np.floor((coord - origin) / resolution + 0.5).astype(np.int64)


def snap_to_grid(lat: float, lon: float, grid: GridSpec) -> Optional[Tuple[int, int]]:
    """
    Nearest grid point as (row, col), or None when the point is outside the grid.

    Rows count from the north. Equidistant points go to the higher coordinate.
    """
    k_lat = int(_snap_index(np.float64(lat), grid.lat_min, grid.resolution))
    k_lon = int(_snap_index(np.float64(lon), grid.lon_min, grid.resolution))
    if not (0 <= k_lat < grid.height and 0 <= k_lon < grid.width):
        return None
    return grid.height - 1 - k_lat, k_lon


def snap_points(lats: np.ndarray, lons: np.ndarray, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized snap_to_grid; returns rows, cols and a validity mask."""
    k_lat = _snap_index(np.asarray(lats, dtype=np.float64), grid.lat_min, grid.resolution)
    k_lon = _snap_index(np.asarray(lons, dtype=np.float64), grid.lon_min, grid.resolution)
    valid = (k_lat >= 0) & (k_lat < grid.height) & (k_lon >= 0) & (k_lon < grid.width)
    rows = np.where(valid, grid.height - 1 - k_lat, 0)
    cols = np.where(valid, k_lon, 0)
    return rows, cols, valid


def regrid_to(values: np.ndarray, lats: np.ndarray, lons: np.ndarray, grid: GridSpec) -> np.ndarray:
    """
    Area-weighted (cos latitude) mean of source points falling in each target
    cell. Non-finite source values are ignored; empty cells are zero.
    """
    lat2d, lon2d = np.meshgrid(np.asarray(lats, np.float64), wrap_longitudes(lons), indexing="ij")
    rows, cols, valid = snap_points(lat2d.ravel(), lon2d.ravel(), grid)
    vals = np.asarray(values, dtype=np.float64).ravel()
    ok = valid & np.isfinite(vals)
    weights = np.cos(np.deg2rad(lat2d.ravel()[ok]))
    flat = rows[ok] * grid.width + cols[ok]
    size = grid.height * grid.width
    num = np.bincount(flat, weights=weights * vals[ok], minlength=size)
    den = np.bincount(flat, weights=weights, minlength=size)
    out = np.zeros(size, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out.reshape(grid.shape).astype(np.float32)


def _first_present(names: Sequence[str], candidates: Sequence[str]) -> Optional[str]:
    for name in candidates:
        if name in names:
            return name
    return None


def load_gridded(path: str) -> xr.Dataset:
    """Read a netCDF file fully into memory under the module netCDF lock."""
    with _NETCDF_LOCK:
        try:
            return xr.load_dataset(path)
        except (OSError, RuntimeError, ValueError, TypeError) as e:
            raise DataError(f"Cannot read gridded source {path}: {e}") from e


def ingest_gridded_source(
    src: SourceDescriptor, window: MonthWindow, grid: GridSpec, group: VariableGroupSchema
) -> IngestResult:
    """
    Read a self-describing gridded file (netCDF) and return two monthly slices
    per schema channel, regridded to `grid`.

    Dimensions are looked up by name (time, lat, lon and optionally level).
    When a month holds several slices only the earliest one is kept. Missing
    variables, levels and months are logged and zero-filled.
    """
    ds = load_gridded(src.path)
    result = IngestResult()
    H, W = grid.shape
    with ds:
        dims = list(ds.dims) + list(ds.coords)
        lat_name = _first_present(dims, _LAT_NAMES)
        lon_name = _first_present(dims, _LON_NAMES)
        time_name = _first_present(dims, _TIME_NAMES)
        if lat_name is None or lon_name is None or time_name is None:
            raise DataError(f"{src.path}: expected time, lat and lon dimensions, found {sorted(ds.dims)}")
        level_name = _first_present(dims, _LEVEL_NAMES)

        times = np.asarray(ds[time_name].values).astype("datetime64[ns]")
        months = times.astype("datetime64[M]")
        slice_index: List[Optional[int]] = []
        for month in window.months:
            candidates = np.flatnonzero(months == month)
            if candidates.size == 0:
                result.note_missing(f"{src.path}: no time slice in {month}, filling zeros")
                slice_index.append(None)
            else:
                slice_index.append(int(candidates[np.argmin(times[candidates])]))

        lats = np.asarray(ds[lat_name].values, dtype=np.float64)
        lons = np.asarray(ds[lon_name].values, dtype=np.float64)
        levels = group.levels if group.levels is not None else (None,)
        available_levels = (
            [int(v) for v in np.asarray(ds[level_name].values)] if level_name is not None else []
        )

        for key in group.channel_keys():
            raster = np.zeros((2, H, W), dtype=np.float32)
            result.rasters[key] = raster
            if key.variable not in ds.data_vars:
                result.filled.add(key)
                if key.level is None or key.level == levels[0]:
                    result.note_missing(f"{src.path}: variable '{key.variable}' absent, filling zeros")
                continue
            da = ds[key.variable]
            if key.level is not None:
                if level_name is None or level_name not in da.dims or key.level not in available_levels:
                    result.filled.add(key)
                    result.note_missing(f"{src.path}: '{key.variable}' has no level {key.level}, filling zeros")
                    continue
                da = da.sel({level_name: key.level})
            da = da.transpose(time_name, lat_name, lon_name)
            for t, idx in enumerate(slice_index):
                if idx is not None:
                    raster[t] = regrid_to(da.isel({time_name: idx}).values, lats, lons, grid)
    return result


def _numeric(df: pd.DataFrame, column: str, path: str, allow_missing: bool) -> np.ndarray:
    raw = df[column]
    values = pd.to_numeric(raw, errors="coerce")
    blank = raw.isna() | (raw.astype(str).str.strip() == "")
    bad = values.isna() & ~blank
    if not allow_missing:
        bad |= blank
    if bad.any():
        idx = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedRowError(path, idx, f"column '{column}' holds '{raw.iloc[idx]}'")
    return values.fillna(0.0).to_numpy(dtype=np.float64)


def _read_table(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot read table {path}: {e}") from e


def _accumulate(values: np.ndarray, rows: np.ndarray, cols: np.ndarray, grid: GridSpec) -> np.ndarray:
    raster = np.zeros(grid.shape, dtype=np.float64)
    np.add.at(raster, (rows, cols), values)
    return raster.astype(np.float32)


def ingest_tabular_source(
    src: SourceDescriptor, window: MonthWindow, grid: GridSpec, group: VariableGroupSchema
) -> IngestResult:
    """
    Rasterize an annual indicator table (layout A or B) for the two months of
    the window.

    Layout A carries a `Variable` column and one column per year; layout B
    carries `<Variable>_<year>` columns. Annual values hold for every month of
    their year. Rows landing in the same cell are summed; cells without rows
    are zero.
    """
    if src.layout not in TABULAR_LAYOUTS:
        raise DataError(f"Unknown tabular layout '{src.layout}' for {src.path}")
    df = _read_table(src.path)
    result = IngestResult()
    H, W = grid.shape
    if df.empty:
        result.note_missing(f"{src.path}: table has no rows")
    for column in ("lat", "lon"):
        if column not in df.columns and not df.empty:
            raise DataError(f"{src.path}: missing '{column}' column")
    if src.layout == "A" and not df.empty and "Variable" not in df.columns:
        raise DataError(f"{src.path}: layout A requires a 'Variable' column")

    if df.empty:
        rows = cols = np.zeros(0, dtype=np.int64)
        in_grid = np.zeros(0, dtype=bool)
    else:
        lats = _numeric(df, "lat", src.path, allow_missing=False)
        lons = wrap_longitudes(_numeric(df, "lon", src.path, allow_missing=False))
        rows, cols, in_grid = snap_points(lats, lons, grid)
        if not in_grid.all():
            logger.debug(f"{src.path}: {int((~in_grid).sum())} rows outside the grid")

    years = [int(str(m)[:4]) for m in window.months]
    for key in group.channel_keys():
        raster = np.zeros((2, H, W), dtype=np.float32)
        result.rasters[key] = raster
        if src.layout == "A":
            selector = (df["Variable"] == key.variable).to_numpy() if "Variable" in df.columns else np.zeros(0, bool)
            columns = {y: str(y) for y in years if str(y) in df.columns}
            if not selector.any():
                result.filled.add(key)
                result.note_missing(f"{src.path}: no rows for variable '{key.variable}'")
        else:
            selector = np.ones(len(df), dtype=bool)
            columns = {y: f"{key.variable}_{y}" for y in years if f"{key.variable}_{y}" in df.columns}
            if not columns:
                result.filled.add(key)
        for t, year in enumerate(years):
            if year not in columns:
                result.note_missing(f"{src.path}: '{key.variable}' has no value for {year}, filling zeros")
                continue
            if df.empty:
                continue
            values = _numeric(df, columns[year], src.path, allow_missing=True)
            take = selector & in_grid
            raster[t] = _accumulate(values[take], rows[take], cols[take], grid)
    return result


def _read_species(path: str) -> pd.DataFrame:
    try:
        if os.path.splitext(path)[1] == ".parquet":
            return pd.read_parquet(path)
        return pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(SPECIES_COLUMNS))
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot read species records {path}: {e}") from e


def _utc_months(stamps: pd.Series, path: str) -> np.ndarray:
    ts = pd.to_datetime(stamps)
    tz = getattr(ts.dt, "tz", None)
    if tz is not None:
        if str(tz) != "UTC":
            raise DataError(f"{path}: timestamps must be UTC, found {tz}")
        ts = ts.dt.tz_localize(None)
    return ts.to_numpy().astype("datetime64[M]")


def ingest_species_records(
    src: SourceDescriptor,
    window: MonthWindow,
    grid: GridSpec,
    species_master_list: Sequence[int],
) -> IngestResult:
    """
    Accumulate species distribution values per species, month and cell.

    Every species in the master list gets a (2, H, W) raster even when it has
    no records. Records of species outside the master list are skipped.
    """
    df = _read_species(src.path)
    missing_columns = [c for c in SPECIES_COLUMNS if c not in df.columns]
    if missing_columns:
        raise DataError(f"{src.path}: missing columns {missing_columns}")

    H, W = grid.shape
    species_index = {int(s): i for i, s in enumerate(species_master_list)}
    cube = np.zeros((len(species_master_list), 2, H, W), dtype=np.float64)
    result = IngestResult()

    if len(df):
        ids = _numeric(df, "species_id", src.path, allow_missing=False).astype(np.int64)
        lats = _numeric(df, "lat", src.path, allow_missing=False)
        lons = wrap_longitudes(_numeric(df, "lon", src.path, allow_missing=False))
        values = _numeric(df, "distribution_value", src.path, allow_missing=True)
        negative = np.flatnonzero(values < 0)
        if negative.size:
            raise MalformedRowError(src.path, int(negative[0]), "negative distribution value")
        months = _utc_months(df["timestamp"], src.path)

        known = np.array([i in species_index for i in ids], dtype=bool)
        if not known.all():
            unknown = sorted(set(ids[~known].tolist()))
            logger.warning(f"{src.path}: skipping {int((~known).sum())} records of unknown species {unknown}")
        t_index = np.full(len(df), -1, dtype=np.int64)
        for t, month in enumerate(window.months):
            t_index[months == month] = t
        rows, cols, in_grid = snap_points(lats, lons, grid)
        take = known & in_grid & (t_index >= 0)
        s_index = np.array([species_index.get(i, 0) for i in ids], dtype=np.int64)
        np.add.at(cube, (s_index[take], t_index[take], rows[take], cols[take]), values[take])

    for i, species_id in enumerate(species_master_list):
        result.rasters[ChannelKey("species", "species", int(species_id))] = cube[i].astype(np.float32)
    return result


def ingest_source(
    src: SourceDescriptor, window: MonthWindow, grid: GridSpec, group: VariableGroupSchema
) -> IngestResult:
    if src.kind == "gridded_reanalysis":
        return ingest_gridded_source(src, window, grid, group)
    if src.kind == "tabular_indicator":
        return ingest_tabular_source(src, window, grid, group)
    return ingest_species_records(src, window, grid, group.levels or ())
