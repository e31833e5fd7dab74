"""
Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"NCRECKPT"
    version    uint32    FORMAT_VERSION
    count      uint32    number of entries
    entries    count times:
        name_len  uint16
        name      name_len bytes, UTF-8
        frozen    uint8 (0 or 1)
        ndim      uint8
        dims      ndim x uint32
        values    prod(dims) x float64 little-endian, row-major

Entries are written in the order given, so saving the same parameters twice
yields identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from autodiff.base import Parameter
from errors import CheckpointError

MAGIC = b"NCRECKPT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sII")
_NAME_LEN = struct.Struct("<H")
_FLAGS = struct.Struct("<BB")


@dataclass(frozen=True)
class CheckpointEntry:
    name: str
    values: np.ndarray
    frozen: bool


def encode_checkpoint(params: Iterable[Parameter]) -> bytes:
    params = list(params)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(params))]
    for parameter in params:
        name = parameter.name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(name)))
        chunks.append(name)
        chunks.append(_FLAGS.pack(int(parameter.frozen), parameter.data.ndim))
        chunks.append(struct.pack(f"<{parameter.data.ndim}I", *parameter.shape))
        chunks.append(np.ascontiguousarray(parameter.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> list[CheckpointEntry]:
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint is truncated before its header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a parameter checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    entries = []
    offset = _HEADER.size
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(blob, offset)
            offset += _NAME_LEN.size
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            frozen, ndim = _FLAGS.unpack_from(blob, offset)
            offset += _FLAGS.size
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            entries.append(CheckpointEntry(name, values.astype(np.float64).reshape(dims), bool(frozen)))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"checkpoint is truncated or corrupt: {exc}") from exc
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the last checkpoint entry")
    return entries


def save_checkpoint(params: Iterable[Parameter], path: Path | str) -> bytes:
    blob = encode_checkpoint(params)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path: Path | str) -> list[CheckpointEntry]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def restore_parameters(
    params: Iterable[Parameter],
    entries: Iterable[CheckpointEntry],
    rename: Mapping[str, str] | None = None,
) -> None:
    """
    Copy checkpoint values and frozen flags into ``params`` by name.

    ``rename`` maps checkpoint names to parameter names. Every parameter must be
    covered; extra checkpoint entries are ignored.
    """
    rename = rename or {}
    by_name = {rename.get(entry.name, entry.name): entry for entry in entries}
    for parameter in params:
        entry = by_name.get(parameter.name)
        if entry is None:
            raise CheckpointError(f"checkpoint has no entry for parameter {parameter.name!r}")
        if entry.values.shape != parameter.shape:
            raise CheckpointError(
                f"checkpoint entry {entry.name!r} has shape {entry.values.shape}, "
                f"parameter {parameter.name!r} has {parameter.shape}"
            )
        parameter.data[...] = entry.values
        parameter.frozen = entry.frozen
        parameter.zero_grad()
