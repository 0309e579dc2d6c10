#!/usr/bin/env python3
"""
Write a small synthetic source corpus (NetCDF reanalysis, a wide indicator
table and species records) plus the matching sources.yaml, so the whole
pipeline can be run without downloading anything:

    python scripts/make_synthetic_corpus.py --out data --months 14
    python main.py build-batches --set paths.sources=data/sources.yaml
"""

import argparse
import os
import sys

import numpy as np
import pandas as pd
import xarray as xr
import yaml

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from src.data_model import BatchSchema, GridSpec  # noqa: E402


def seasonal(months: int, shape, amplitude: float, rng) -> np.ndarray:
    phase = 2 * np.pi * np.arange(months) / 12.0
    cycle = amplitude * np.sin(phase).reshape(-1, *([1] * len(shape)))
    return cycle + rng.normal(scale=amplitude / 5, size=(months, *shape))


def write_reanalysis(out: str, grid: GridSpec, first: str, months: int, rng) -> None:
    H, W = grid.shape
    times = np.array([np.datetime64(first, "M") + np.timedelta64(i, "M") for i in range(months)])
    times = times.astype("datetime64[D]").astype("datetime64[ns]")
    coords = {"time": times, "lat": grid.latitudes(), "lon": grid.longitudes()}
    surface = xr.Dataset(
        {
            "t2m": (("time", "lat", "lon"), (288 + seasonal(months, (H, W), 8.0, rng)).astype(np.float32)),
            "msl": (("time", "lat", "lon"), (101325 + seasonal(months, (H, W), 400.0, rng)).astype(np.float32)),
        },
        coords=coords,
    )
    surface.to_netcdf(os.path.join(out, "surface.nc"))

    levels = [1000, 850]
    temps = np.stack([270 + seasonal(months, (H, W), 6.0, rng) - 10 * i for i in range(len(levels))], axis=1)
    atmos = xr.Dataset(
        {"t": (("time", "level", "lat", "lon"), temps.astype(np.float32))},
        coords={**coords, "level": levels},
    )
    atmos.to_netcdf(os.path.join(out, "atmospheric.nc"))
    print(f"Wrote reanalysis for {months} months on a {H} x {W} grid")


def write_species(out: str, grid: GridSpec, species, first: str, months: int, records: int, rng) -> None:
    start = pd.Timestamp(f"{first}-01", tz="UTC")
    offsets = rng.integers(0, months, records)
    days = rng.integers(0, 28, records)
    stamps = [(start + pd.DateOffset(months=int(m), days=int(d))).isoformat() for m, d in zip(offsets, days)]
    frame = pd.DataFrame(
        {
            "species_id": rng.choice(species, records),
            "lat": rng.uniform(grid.lat_min, grid.lat_max - grid.resolution, records).round(3),
            "lon": rng.uniform(grid.lon_min, grid.lon_max - grid.resolution, records).round(3),
            "timestamp": stamps,
            "distribution_value": rng.gamma(2.0, 0.5, records).round(4),
        }
    )
    frame.to_csv(os.path.join(out, "species.csv"), index=False)
    print(f"Wrote {records} species records for {len(species)} species")


def main():
    parser = argparse.ArgumentParser(description="Generate a synthetic source corpus")
    parser.add_argument("--out", default="data", help="Output folder")
    parser.add_argument("--grid", default="desk", choices=["desk", "mini"], help="Grid preset")
    parser.add_argument("--first-month", default="2010-01", help="First month, YYYY-MM")
    parser.add_argument("--months", type=int, default=14, help="Number of months")
    parser.add_argument("--records", type=int, default=2000, help="Species records to draw")
    parser.add_argument("--seed", type=int, default=0, help="Random seed")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    grid = GridSpec.desk() if args.grid == "desk" else GridSpec.mini()
    species = list(BatchSchema.desk().group("species").levels)

    write_reanalysis(args.out, grid, args.first_month, args.months, rng)
    write_species(args.out, grid, species, args.first_month, args.months, args.records, rng)

    sources = {
        "sources": [
            {"kind": "gridded_reanalysis", "path": "surface.nc", "group": "surface"},
            {"kind": "gridded_reanalysis", "path": "atmospheric.nc", "group": "atmospheric"},
            {"kind": "species_records", "path": "species.csv", "group": "species"},
        ]
    }
    with open(os.path.join(args.out, "sources.yaml"), "w") as f:
        yaml.safe_dump(sources, f, sort_keys=False)
    print(f"Source list written to {os.path.join(args.out, 'sources.yaml')}")


if __name__ == "__main__":
    main()
