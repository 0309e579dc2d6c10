import json

import numpy as np
import pandas as pd
import pytest
import xarray as xr
import yaml

from main import main
from src.batching import load_batch
from src.batching.container import read_container
from src.commands import load_batches, load_sources, run_command
from src.config_manager import load_run_config
from src.data_model import GridSpec, NormStats
from src.errors import ConfigError, DataError
from src.model.checkpoint import load_checkpoint

MONTHS = 6


@pytest.fixture
def workspace(tmp_path):
    """Six months of surface, pressure-level and species data on the mini grid."""
    grid = GridSpec.mini()
    rng = np.random.default_rng(5)
    lats, lons = grid.latitudes(), grid.longitudes()
    times = np.array([f"2010-{m:02d}-01" for m in range(1, MONTHS + 1)], dtype="datetime64[ns]")
    data = tmp_path / "data"
    data.mkdir()
    xr.Dataset(
        {
            "t2m": (("time", "lat", "lon"), rng.normal(285, 3, (MONTHS, 8, 14)).astype(np.float32)),
            "msl": (("time", "lat", "lon"), rng.normal(1.01e5, 80, (MONTHS, 8, 14)).astype(np.float32)),
        },
        coords={"time": times, "lat": lats, "lon": lons},
    ).to_netcdf(data / "surface.nc")
    xr.Dataset(
        {"t": (("time", "level", "lat", "lon"), rng.normal(260, 4, (MONTHS, 2, 8, 14)).astype(np.float32))},
        coords={"time": times, "level": [1000, 850], "lat": lats, "lon": lons},
    ).to_netcdf(data / "atmos.nc")
    rows = 60
    pd.DataFrame(
        {
            "species_id": rng.choice([1920506, 1898286, 8077224], rows),
            "lat": rng.uniform(32.0, 33.75, rows).round(2),
            "lon": rng.uniform(-25.0, -21.75, rows).round(2),
            "timestamp": [f"2010-{m:02d}-15T00:00:00Z" for m in rng.integers(1, MONTHS + 1, rows)],
            "distribution_value": rng.uniform(0.1, 1.0, rows).round(3),
        }
    ).to_csv(data / "species.csv", index=False)
    with open(data / "sources.yaml", "w") as f:
        yaml.safe_dump(
            {
                "sources": [
                    {"kind": "gridded_reanalysis", "path": "surface.nc", "group": "surface"},
                    {"kind": "gridded_reanalysis", "path": "atmos.nc", "group": "atmospheric"},
                    {"kind": "species_records", "path": "species.csv", "group": "species"},
                ]
            },
            f,
        )
    return tmp_path


def overrides(root):
    return [
        "grid.preset=mini",
        f"run.num_windows={MONTHS - 1}",
        f"paths.sources={root / 'data' / 'sources.yaml'}",
        f"paths.batches={root / 'batches'}",
        f"paths.stats={root / 'norm_stats.yaml'}",
        f"paths.output={root / 'runs'}",
        "model.patch_size=2",
        "model.embed_dim=16",
        "model.depth=1",
        "model.latent_grid=[2, 2, 2]",
        "optim.base_lr=1e-3",
        "training.steps=3",
        "training.progress=False",
        "finetune.steps=2",
        "finetune.rollout_steps=2",
        "evaluation.rollout_steps=3",
    ]


def test_load_sources_resolves_relative_paths(workspace):
    sources = load_sources(str(workspace / "data" / "sources.yaml"))
    assert [s.group for s in sources] == ["surface", "atmospheric", "species"]
    assert sources[0].path == str(workspace / "data" / "surface.nc")


def test_empty_source_list(tmp_path):
    path = tmp_path / "sources.yaml"
    path.write_text("sources: []\n")
    with pytest.raises(ConfigError):
        load_sources(str(path))


def test_load_batches_needs_files(tmp_path):
    with pytest.raises(DataError):
        load_batches(str(tmp_path))


@pytest.mark.slow
def test_full_pipeline(workspace):
    base = overrides(workspace)
    cfg = load_run_config(None, base)
    assert run_command("build-batches", cfg) == 0
    manifest = pd.read_csv(workspace / "batches" / "manifest.csv")
    assert manifest["window"].tolist() == ["2010-01", "2010-02", "2010-03", "2010-04", "2010-05"]
    assert load_batch(str(workspace / "batches" / "batch_2010-03.bbc")).to_channels().shape == (2, 7, 8, 14)

    assert run_command("compute-stats", cfg) == 0
    assert len(NormStats.load(str(workspace / "norm_stats.yaml")).entries) == 7

    assert run_command("train", cfg) == 0
    runs = workspace / "runs"
    log = [json.loads(line) for line in (runs / "pretrained_train_log.jsonl").read_text().splitlines()]
    assert len(log) == 3
    _, stats, extra = load_checkpoint(str(runs / "pretrained.bbc"))
    assert stats is not None and extra["steps"] == 3

    tuned = load_run_config(None, base + [f"paths.checkpoint={runs / 'pretrained.bbc'}"])
    assert run_command("finetune", tuned) == 0
    model, _, extra = load_checkpoint(str(runs / "finetuned.bbc"))
    assert model.adapter_config.rank == 8
    assert extra["rollout_steps"] == 2

    scored = load_run_config(None, base + [f"paths.checkpoint={runs / 'finetuned.bbc'}"])
    assert run_command("rollout", scored) == 0
    trajectory = pd.read_csv(runs / "trajectory.csv")
    assert trajectory["month"].tolist() == ["2010-03", "2010-04", "2010-05"]
    assert load_batch(str(runs / "rollout_step_03.bbc")).timestamps[0] == np.datetime64("2010-05", "M")

    assert run_command("evaluate", scored) == 0
    metrics = yaml.safe_load((runs / "metrics.yaml").read_text())
    assert metrics["steps"] == 3
    assert len(metrics["mae_by_step"]) == 3
    assert 0.0 <= metrics["f1_sites"] <= 1.0
    scorecard = pd.read_csv(runs / "scorecard.csv")
    assert len(scorecard) == 7
    kind, _, arrays = read_container((runs / "richness_observed.bbc").read_bytes())
    assert kind == "map"
    assert next(iter(arrays.values())).shape == (8, 14)


def test_build_batches_is_reproducible(workspace):
    cfg = load_run_config(None, overrides(workspace))
    run_command("build-batches", cfg)
    first = pd.read_csv(workspace / "batches" / "manifest.csv")["checksum"].tolist()
    run_command("build-batches", cfg)
    assert pd.read_csv(workspace / "batches" / "manifest.csv")["checksum"].tolist() == first


def test_missing_months_reported(workspace):
    cfg = load_run_config(None, overrides(workspace) + [f"run.num_windows={MONTHS}"])
    run_command("build-batches", cfg)
    report = yaml.safe_load((workspace / "batches" / "ingest_report.yaml").read_text())
    assert "2010-06" in report["missing"]
    assert "2010-01" not in report["missing"]


def test_main_exit_codes(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
    config = tmp_path / "run.yaml"
    config.write_text(yaml.safe_dump({"paths": {"batches": str(tmp_path / "empty"), "stats": str(tmp_path / "s.yaml")}}))
    assert main(["compute-stats", "--config", str(config)]) == 3
    assert main(["rollout", "--config", str(config)]) == 2
