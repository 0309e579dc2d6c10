import numpy as np
import pytest
import torch

from src.data_model import (
    Batch,
    BatchSchema,
    ChannelKey,
    GridSpec,
    NormStats,
    VariableGroupSchema,
    compute_norm_stats,
    denormalize,
    months_since_origin,
    normalize,
)
from src.errors import DataError, MissingStatisticError, SchemaError

from .conftest import make_batch


def single_variable_batch(values, grid=None):
    grid = grid or GridSpec.mini()
    schema = BatchSchema((VariableGroupSchema("surface", ("t2m",)),))
    H, W = grid.shape
    data = torch.as_tensor(values, dtype=torch.float32).reshape(2, 1, H, W)
    return Batch(grid, schema, ("2010-01", "2010-02"), 1, {"surface": data})


def test_europe_grid_shape():
    grid = GridSpec.europe()
    assert grid.shape == (160, 280)
    assert grid.latitudes()[0] > grid.latitudes()[-1]


def test_grid_rejects_bad_bounds():
    with pytest.raises(ValueError):
        GridSpec(40.0, 30.0, 0.0, 10.0, 0.25)
    with pytest.raises(ValueError):
        GridSpec(30.0, 40.0, -190.0, 10.0, 0.25)


def test_pretraining_schema_has_113_channels():
    schema = BatchSchema.pretraining()
    assert schema.channel_count == 113
    assert len(schema.pressure_levels) == 13
    assert len(schema.species_ids) == 28
    assert "climate" not in schema


def test_desk_schema_channel_arithmetic():
    schema = BatchSchema.desk()
    assert schema.channel_count == 2 + 2 + 3
    assert [k.label() for k in schema.channel_keys()][:4] == [
        "surface/t2m",
        "surface/msl",
        "atmospheric/t@1000",
        "atmospheric/t@850",
    ]


def test_schema_orders_groups_canonically():
    schema = BatchSchema(
        (VariableGroupSchema("species", ("species",), (1,)), VariableGroupSchema("surface", ("t2m",)))
    )
    assert schema.group_names == ("surface", "species")


def test_unknown_group_rejected():
    with pytest.raises(SchemaError):
        VariableGroupSchema("oceanic", ("sst",))


def test_batch_validates_shapes(desk_schema, desk_grid):
    batch = make_batch(desk_schema, desk_grid)
    groups = dict(batch.groups)
    groups["surface"] = groups["surface"][:, :1]
    with pytest.raises(SchemaError):
        Batch(desk_grid, desk_schema, batch.timestamps, 1, groups)
    with pytest.raises(SchemaError):
        Batch(desk_grid, desk_schema, ("2010-01", "2010-02", "2010-03"), 1, batch.groups)


def test_channels_round_trip(desk_batch):
    channels = desk_batch.to_channels()
    assert channels.shape == (2, 7, 16, 28)
    rebuilt = Batch.from_channels(channels, desk_batch.grid, desk_batch.schema, desk_batch.timestamps, 1)
    for name in desk_batch.schema.group_names:
        assert torch.equal(rebuilt.groups[name], desk_batch.groups[name])


def test_slice_and_concat(desk_batch):
    first, second = desk_batch.slice(0), desk_batch.slice(1)
    assert first.timestamps == (np.datetime64("2010-01", "M"),)
    joined = Batch.concat_time(first, second)
    assert torch.equal(joined.to_channels(), desk_batch.to_channels())


def test_level_view(desk_batch):
    view = desk_batch.level_view("atmospheric")
    assert view.shape == (2, 1, 2, 16, 28)


def test_months_since_origin():
    assert months_since_origin("2000-01") == 0
    assert months_since_origin("2010-03-15") == 122


def test_constant_field_gets_unit_scale():
    stats = compute_norm_stats([single_variable_batch(np.full(2 * 8 * 14, 5.0))])
    assert stats.lookup(ChannelKey("surface", "t2m")) == (5.0, 1.0)


def test_two_valued_field_stats():
    values = np.tile([0.0, 2.0], 8 * 14)
    centre, scale = compute_norm_stats([single_variable_batch(values)]).lookup(ChannelKey("surface", "t2m"))
    assert centre == pytest.approx(1.0)
    assert scale == pytest.approx(1.0)


def test_stats_are_per_level(desk_schema, desk_grid):
    batch = make_batch(desk_schema, desk_grid)
    groups = dict(batch.groups)
    atmos = groups["atmospheric"].clone()
    atmos[:, 0] += 300.0
    atmos[:, 1] -= 50.0
    groups["atmospheric"] = atmos
    stats = compute_norm_stats([batch.with_groups(groups)])
    low = stats.lookup(ChannelKey("atmospheric", "t", 1000))
    high = stats.lookup(ChannelKey("atmospheric", "t", 850))
    assert low[0] > 250.0 and high[0] < -40.0


def test_perturbing_one_level_leaves_others(desk_schema, desk_grid):
    batch = make_batch(desk_schema, desk_grid)
    before = compute_norm_stats([batch])
    groups = dict(batch.groups)
    species = groups["species"].clone()
    species[:, 1] *= 3.0
    groups["species"] = species
    after = compute_norm_stats([batch.with_groups(groups)])
    for key in desk_schema.channel_keys():
        if key == ChannelKey("species", "species", 1898286):
            assert after.lookup(key) != before.lookup(key)
        else:
            assert after.lookup(key) == before.lookup(key)


def test_stats_merge_across_batches(desk_schema, desk_grid):
    batches = [make_batch(desk_schema, desk_grid, seed=s) for s in range(3)]
    stats = compute_norm_stats(batches)
    stacked = torch.cat([b.to_channels() for b in batches]).double()
    expected_mean = stacked.mean(dim=(0, 2, 3))
    expected_std = stacked.std(dim=(0, 2, 3), unbiased=False)
    centre, scale = stats.vectors(desk_schema)
    np.testing.assert_allclose(centre, expected_mean.numpy(), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(scale, expected_std.numpy(), rtol=1e-9)


def test_stats_errors(desk_schema, desk_grid):
    with pytest.raises(DataError):
        compute_norm_stats([])
    other = make_batch(BatchSchema((VariableGroupSchema("surface", ("t2m",)),)), desk_grid)
    with pytest.raises(SchemaError):
        compute_norm_stats([make_batch(desk_schema, desk_grid), other])


def test_normalize_formula():
    stats = NormStats({ChannelKey("surface", "t2m"): (280.0, 10.0)})
    batch = single_variable_batch(np.full(2 * 8 * 14, 300.0))
    assert torch.all(normalize(batch, stats).groups["surface"] == 2.0)
    zeros = single_variable_batch(np.zeros(2 * 8 * 14))
    assert torch.all(denormalize(zeros, stats).groups["surface"] == 280.0)
    centred = single_variable_batch(np.full(2 * 8 * 14, 280.0))
    assert torch.all(normalize(centred, stats).groups["surface"] == 0.0)


def test_normalize_round_trip(desk_schema, desk_grid):
    batch = make_batch(desk_schema, desk_grid, offset=250.0)
    stats = compute_norm_stats([batch])
    restored = denormalize(normalize(batch, stats), stats)
    x, y = batch.to_channels(), restored.to_channels()
    assert torch.max(torch.abs(x - y) / torch.abs(x).clamp_min(1e-6)) <= 1e-6


def test_normalized_moments(desk_schema, desk_grid):
    batches = [make_batch(desk_schema, desk_grid, seed=s, offset=10.0) for s in range(2)]
    stats = compute_norm_stats(batches)
    x = torch.cat([normalize(b, stats).to_channels() for b in batches]).double()
    assert torch.allclose(x.mean(dim=(0, 2, 3)), torch.zeros(7, dtype=torch.float64), atol=1e-3)
    assert torch.allclose(x.std(dim=(0, 2, 3), unbiased=False), torch.ones(7, dtype=torch.float64), atol=1e-3)


def test_missing_statistic_names_variable(desk_batch):
    stats = NormStats({ChannelKey("surface", "t2m"): (0.0, 1.0)})
    with pytest.raises(MissingStatisticError, match="surface/msl"):
        normalize(desk_batch, stats)


def test_non_positive_scale_rejected():
    with pytest.raises(DataError):
        NormStats({ChannelKey("surface", "t2m"): (0.0, 0.0)})


def test_stats_yaml_round_trip(tmp_path, desk_batch):
    stats = compute_norm_stats([desk_batch])
    path = str(tmp_path / "stats.yaml")
    stats.save(path)
    assert NormStats.load(path) == stats


def test_non_finite_values_rejected():
    values = np.zeros(2 * 8 * 14)
    values[5] = np.nan
    with pytest.raises(DataError, match="surface"):
        single_variable_batch(values)
    values[5] = np.inf
    with pytest.raises(DataError, match="1 non-finite"):
        single_variable_batch(values)
