import numpy as np
import pytest
import torch

from src.data_model import BatchSchema, GridSpec
from src.model.decoder_heads import OutputHeads, build_queries, group_maps, project_outputs, query_specs
from src.model.encodings import EmbeddingTables


def tables_for(schema, dim=16):
    return EmbeddingTables(schema, dim, None, 4, 8.0)


def test_one_spec_per_channel():
    specs = query_specs(BatchSchema.desk(), GridSpec.desk(), 1)
    assert len(specs) == 7
    assert specs[-1].level == 8077224 and specs[-1].height == 16
    assert len(query_specs(BatchSchema.pretraining(), GridSpec.europe(), 1)) == 113


def test_query_counts():
    desk = BatchSchema.desk()
    assert build_queries(desk, GridSpec.desk(), 1, tables_for(desk)).shape == (7, 16)
    full = BatchSchema.pretraining()
    assert build_queries(full, GridSpec.mini(), 1, tables_for(full)).shape == (113, 16)


def test_species_queries_differ_only_by_species_embedding():
    schema = BatchSchema.desk()
    tables = tables_for(schema)
    with torch.no_grad():
        tables.fourier_proj.weight.zero_()
        tables.fourier_proj.bias.zero_()
    queries = build_queries(schema, GridSpec.desk(), 1, tables)
    species = tables.level_embed["species"].weight
    torch.testing.assert_close(queries[6] - queries[5], species[2] - species[1], rtol=0, atol=1e-6)


def test_lead_time_changes_every_query():
    schema = BatchSchema.desk()
    tables = tables_for(schema)
    delta = build_queries(schema, GridSpec.desk(), 2, tables) - build_queries(schema, GridSpec.desk(), 1, tables)
    expected = tables.lead_embedding(2) - tables.lead_embedding(1)
    torch.testing.assert_close(delta, expected.expand(7, -1), rtol=0, atol=1e-6)


def test_optional_time_term():
    schema = BatchSchema.desk()
    tables = tables_for(schema)
    plain = build_queries(schema, GridSpec.desk(), 1, tables)
    timed = build_queries(schema, GridSpec.desk(), 1, tables, np.datetime64("2010-03", "M"))
    torch.testing.assert_close(timed - plain, tables.time_embedding([122]).expand(7, -1), rtol=0, atol=1e-6)


def test_zero_embeddings_give_zero_maps():
    heads = OutputHeads(BatchSchema.desk(), GridSpec.desk(), 16)
    out = heads(torch.zeros(1, 7, 16))
    assert out.shape == (1, 7, 16, 28)
    assert torch.all(out == 0)


def test_one_query_feeds_one_channel():
    heads = OutputHeads(BatchSchema.desk(), GridSpec.desk(), 16)
    decoded = torch.randn(1, 7, 16)
    base = heads(decoded)
    bumped = decoded.clone()
    bumped[0, 3] += 1.0
    changed = (heads(bumped) != base).flatten(2).any(-1)[0]
    assert changed.tolist() == [False, False, False, True, False, False, False]


def test_misaligned_rows():
    heads = OutputHeads(BatchSchema.desk(), GridSpec.desk(), 16)
    with pytest.raises(ValueError):
        heads(torch.zeros(1, 6, 16))


def test_project_outputs_builds_single_month_batch():
    schema, grid = BatchSchema.desk(), GridSpec.desk()
    heads = OutputHeads(schema, grid, 16)
    batch = project_outputs(torch.randn(7, 16), heads, "2010-03", 1)
    assert batch.to_channels().shape == (1, 7, 16, 28)
    assert batch.timestamps == (np.datetime64("2010-03", "M"),)
    assert group_maps(batch, "atmospheric").shape == (1, 2, 16, 28)
    assert group_maps(batch, "species").shape == (1, 3, 16, 28)
    with pytest.raises(ValueError):
        project_outputs(torch.randn(2, 7, 16), heads, "2010-03", 1)
