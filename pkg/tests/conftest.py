import numpy as np
import pytest
import torch

from src.data_model import Batch, BatchSchema, GridSpec, compute_norm_stats
from src.model import BiodiversityEmulator, ModelConfig


def make_batch(schema, grid, start="2010-01", seed=0, timesteps=2, offset=0.0):
    """Random fields with a month-dependent drift, species non-negative."""
    rng = np.random.default_rng(seed)
    H, W = grid.shape
    months = [np.datetime64(start, "M") + np.timedelta64(t, "M") for t in range(timesteps)]
    groups = {}
    for g in schema:
        base = rng.normal(size=(1, g.channel_count, H, W))
        drift = np.arange(timesteps).reshape(-1, 1, 1, 1) * 0.1
        values = base + drift + offset
        if g.group_name == "species":
            values = np.clip(values, 0.0, None)
        groups[g.group_name] = torch.tensor(values, dtype=torch.float32)
    return Batch(grid, schema, tuple(months), 1, groups)


def make_series(schema, grid, first="2010-01", count=5, seed=0):
    """`count` overlapping two-month batches over consecutive months."""
    H, W = grid.shape
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(count + 1, schema.channel_count, H, W)).astype(np.float32)
    if "species" in schema:
        sl = schema.group_slices()["species"]
        states[:, sl] = np.abs(states[:, sl])
    start = np.datetime64(first, "M")
    batches = []
    for i in range(count):
        months = (start + np.timedelta64(i, "M"), start + np.timedelta64(i + 1, "M"))
        batches.append(Batch.from_channels(torch.from_numpy(states[i : i + 2].copy()), grid, schema, months, 1))
    return batches


def make_smooth_series(schema, grid, first="2010-01", count=2, step=0.25, seed=0):
    """
    Overlapping two-month batches of smooth fields: a fixed spatial pattern
    per channel plus a smooth monthly change of amplitude `step`.
    """
    rng = np.random.default_rng(seed)
    H, W = grid.shape
    yy, xx = np.meshgrid(np.linspace(0, np.pi, H), np.linspace(0, 2 * np.pi, W), indexing="ij")

    def pattern():
        k = rng.integers(1, 4, size=(3, 2))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        waves = [np.sin(k[i, 0] * yy + k[i, 1] * xx + phase[i]) for i in range(3)]
        return sum(waves) / np.sqrt(1.5)

    C = schema.channel_count
    base = np.stack([pattern() for _ in range(C)])
    change = np.stack([pattern() for _ in range(C)])
    if "species" in schema:
        base[schema.group_slices()["species"]] += 4.0
    states = np.stack([base + step * t * change for t in range(count + 1)]).astype(np.float32)
    start = np.datetime64(first, "M")
    batches = []
    for i in range(count):
        months = (start + np.timedelta64(i, "M"), start + np.timedelta64(i + 1, "M"))
        batches.append(Batch.from_channels(torch.from_numpy(states[i : i + 2].copy()), grid, schema, months, 1))
    return batches


def tiny_config(**overrides):
    params = dict(patch_size=2, embed_dim=16, depth=1, latent_grid=(2, 2, 2))
    params.update(overrides)
    return ModelConfig.preset("desk", **params)


@pytest.fixture
def desk_grid():
    return GridSpec.desk()


@pytest.fixture
def mini_grid():
    return GridSpec.mini()


@pytest.fixture
def desk_schema():
    return BatchSchema.desk()


@pytest.fixture
def desk_batch(desk_schema, desk_grid):
    return make_batch(desk_schema, desk_grid)


@pytest.fixture
def mini_series(desk_schema, mini_grid):
    return make_series(desk_schema, mini_grid, count=6)


@pytest.fixture
def mini_stats(mini_series):
    return compute_norm_stats(mini_series)


@pytest.fixture
def tiny_model(desk_schema, mini_grid):
    torch.manual_seed(0)
    return BiodiversityEmulator(tiny_config(), desk_schema, mini_grid)
