"""
Deterministic batch assembly.

Independent sources are ingested concurrently; results are merged by schema
channel position, never by completion order, so repeated runs over the same
inputs produce byte-identical containers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..data_model import Batch, BatchSchema, ChannelKey, GridSpec
from ..errors import SchemaError
from .sources import IngestResult, MonthWindow, SourceDescriptor, ingest_source

logger = logging.getLogger(name="Batch builder")


def assemble_batch(
    sources: Sequence[SourceDescriptor],
    window: MonthWindow,
    grid: GridSpec,
    schema: BatchSchema,
    max_workers: Optional[int] = None,
    missing: Optional[List[str]] = None,
    lead_time: int = 1,
) -> Batch:
    """
    Build one two-month Batch from a list of sources.

    Args:
        sources: Source descriptors, each naming the group it feeds.
        window: The two consecutive months to extract.
        grid: Target grid.
        schema: Variable groups the batch must carry.
        max_workers: Ingestion threads; None lets the executor decide.
        missing: When given, receives every missing-entry message.
        lead_time: Months between consecutive slices.

    Raises:
        SchemaError: A source targets a group absent from the schema, or two
            sources provide the same channel.
    """
    for src in sources:
        if src.group not in schema:
            raise SchemaError(f"Source {src.path} feeds group '{src.group}' which is not in the schema")
        if src.kind == "species_records" and src.group != "species":
            raise SchemaError(f"Species records {src.path} must feed the 'species' group")

    def _ingest(src: SourceDescriptor) -> IngestResult:
        logger.debug(f"Ingesting {src.kind} source {src.path} for {window.label}")
        return ingest_source(src, window, grid, schema.group(src.group))

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(_ingest, sources))

    merged: Dict[ChannelKey, np.ndarray] = {}
    placeholders = set()
    wanted = set(schema.channel_keys())
    for src, result in zip(sources, results):
        if missing is not None:
            missing.extend(result.missing)
        for key, raster in result.rasters.items():
            if key not in wanted:
                continue
            filled = key in result.filled
            if key in merged:
                if filled:
                    continue
                if key not in placeholders:
                    raise SchemaError(f"Channel {key.label()} provided by more than one source")
            merged[key] = raster
            if filled:
                placeholders.add(key)
            else:
                placeholders.discard(key)

    H, W = grid.shape
    groups: Dict[str, torch.Tensor] = {}
    for g in schema:
        planes = []
        for key in g.channel_keys():
            if key not in merged:
                message = f"No source provides {key.label()} for {window.label}, filling zeros"
                logger.warning(message)
                if missing is not None:
                    missing.append(message)
                planes.append(np.zeros((2, H, W), dtype=np.float32))
            else:
                planes.append(merged[key])
        groups[g.group_name] = torch.from_numpy(np.ascontiguousarray(np.stack(planes, axis=1), dtype=np.float32))

    return Batch(grid, schema, window.months, lead_time, groups)
