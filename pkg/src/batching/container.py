"""
Portable `.bbc` container: magic, header length, JSON header, raw payload.

Layout (all integers little-endian):

    bytes 0..7    magic b"BIOCUBE1"
    bytes 8..11   uint32 header length N
    bytes 12..    N bytes of UTF-8 JSON header (sorted keys)
    remainder     payload, arrays concatenated in header order, row-major

See docs/batch_format.md for the header fields.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
import torch

from ..data_model import Batch, BatchSchema, GridSpec
from ..errors import (
    ContainerChecksumError,
    ContainerError,
    ContainerShapeError,
    ContainerTruncatedError,
    ContainerVersionError,
)

MAGIC = b"BIOCUBE1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")
_PREFIX = len(MAGIC) + _LENGTH.size
SUPPORTED_DTYPES = ("<f4", "<f8")


@dataclass
class ArrayEntry:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    offset: int
    nbytes: int


def write_container(kind: str, metadata: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    entries: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, array in arrays.items():
        dtype = np.dtype(array.dtype).newbyteorder("<")
        if dtype.str not in SUPPORTED_DTYPES:
            raise ContainerError(f"Array '{name}' has unsupported dtype {array.dtype}")
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dtype.str, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "metadata": metadata,
        "arrays": entries,
        "payload_nbytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + payload


def read_header(data: bytes) -> Tuple[Dict[str, Any], int]:
    """Parse the header; returns it with the payload start offset."""
    if len(data) < _PREFIX:
        raise ContainerTruncatedError(f"Container of {len(data)} bytes is shorter than its prefix")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError("Not a .bbc container (bad magic)")
    (header_len,) = _LENGTH.unpack_from(data, len(MAGIC))
    start = _PREFIX + header_len
    if len(data) < start:
        raise ContainerTruncatedError("Container truncated inside its header")
    try:
        header = json.loads(data[_PREFIX:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"Unreadable container header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerVersionError(f"Unsupported container format version {version!r}")
    return header, start


def read_container(data: bytes) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    header, start = read_header(data)
    payload = data[start:]
    expected = int(header["payload_nbytes"])
    if len(payload) < expected:
        raise ContainerTruncatedError(f"Payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise ContainerShapeError(f"Payload has {len(payload)} bytes, header declares {expected}")

    entries = [
        ArrayEntry(e["name"], e["dtype"], tuple(int(s) for s in e["shape"]), int(e["offset"]), int(e["nbytes"]))
        for e in header["arrays"]
    ]
    cursor = 0
    for entry in entries:
        if entry.dtype not in SUPPORTED_DTYPES:
            raise ContainerShapeError(f"Array '{entry.name}' has unsupported dtype {entry.dtype}")
        itemsize = np.dtype(entry.dtype).itemsize
        if int(np.prod(entry.shape, dtype=np.int64)) * itemsize != entry.nbytes:
            raise ContainerShapeError(
                f"Array '{entry.name}' shape {entry.shape} does not match its {entry.nbytes} payload bytes"
            )
        if entry.offset != cursor:
            raise ContainerShapeError(f"Array '{entry.name}' starts at {entry.offset}, expected {cursor}")
        cursor += entry.nbytes
    if cursor != expected:
        raise ContainerShapeError(f"Array sizes sum to {cursor} bytes, header declares {expected}")

    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ContainerChecksumError("Payload checksum mismatch")

    arrays = {
        e.name: np.frombuffer(payload, dtype=e.dtype, count=e.nbytes // np.dtype(e.dtype).itemsize, offset=e.offset)
        .reshape(e.shape)
        .copy()
        for e in entries
    }
    return header["kind"], header["metadata"], arrays


def container_checksum(data: bytes) -> str:
    header, _ = read_header(data)
    return header["checksum"]


def serialize_batch(batch: Batch) -> bytes:
    metadata = {
        "grid": batch.grid.to_dict(),
        "schema": batch.schema.to_dict(),
        "timestamps": [str(t) for t in batch.timestamps],
        "lead_time": int(batch.lead_time),
        "species_ids": list(batch.species_ids),
        "pressure_levels": list(batch.pressure_levels),
    }
    arrays = {
        name: batch.groups[name].detach().cpu().numpy().astype(np.float32, copy=False)
        for name in batch.schema.group_names
    }
    return write_container("batch", metadata, arrays)


def deserialize_batch(data: bytes) -> Batch:
    kind, metadata, arrays = read_container(data)
    if kind != "batch":
        raise ContainerError(f"Container holds a '{kind}', not a batch")
    try:
        schema = BatchSchema.from_dict(metadata["schema"])
        grid = GridSpec.from_dict(metadata["grid"])
        timestamps = tuple(np.datetime64(t, "M") for t in metadata["timestamps"])
        lead_time = int(metadata["lead_time"])
    except KeyError as e:
        raise ContainerError(f"Batch metadata lacks {e}") from None
    absent = [name for name in schema.group_names if name not in arrays]
    if absent:
        raise ContainerShapeError(f"Batch container has no arrays for groups {absent}")
    groups = {name: torch.from_numpy(arrays[name]) for name in schema.group_names}
    return Batch(grid=grid, schema=schema, timestamps=timestamps, lead_time=lead_time, groups=groups)


def save_batch(path: str, batch: Batch) -> str:
    """Write a batch container; returns its payload checksum."""
    data = serialize_batch(batch)
    with open(path, "wb") as f:
        f.write(data)
    return container_checksum(data)


def load_batch(path: str) -> Batch:
    with open(path, "rb") as f:
        return deserialize_batch(f.read())


def save_map(path: str, values: np.ndarray, metadata: Dict[str, Any]) -> str:
    data = write_container("map", metadata, {"values": np.asarray(values, dtype=np.float32)})
    with open(path, "wb") as f:
        f.write(data)
    return container_checksum(data)
