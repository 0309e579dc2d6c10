from .builder import assemble_batch
from .container import deserialize_batch, load_batch, save_batch, save_map, serialize_batch
from .sources import (
    IngestResult,
    MonthWindow,
    SourceDescriptor,
    ingest_gridded_source,
    ingest_species_records,
    ingest_tabular_source,
    snap_to_grid,
    wrap_longitude,
)

__all__ = [
    "assemble_batch",
    "deserialize_batch",
    "load_batch",
    "save_batch",
    "save_map",
    "serialize_batch",
    "IngestResult",
    "MonthWindow",
    "SourceDescriptor",
    "ingest_gridded_source",
    "ingest_species_records",
    "ingest_tabular_source",
    "snap_to_grid",
    "wrap_longitude",
]
