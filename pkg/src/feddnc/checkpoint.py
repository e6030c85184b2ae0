"""Binary checkpoint files for parameter sets.

Layout: the ASCII header line ``FDNC1\n``, then two records per parameterized
layer (weight first, then bias). Each record is::

    layer_index  u32 LE
    name_length  u32 LE, followed by that many UTF-8 bytes (the layer name)
    rank         u32 LE, followed by `rank` u32 LE dims
    payload      rank-product IEEE-754 float32 LE values, row-major

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import ParamEntry, ParameterSet

HEADER = b"FDNC1\n"


def _write_record(out: list[bytes], layer_index: int, name: str, tensor: np.ndarray) -> None:
    name_bytes = name.encode("utf-8")
    out.append(struct.pack("<II", layer_index, len(name_bytes)))
    out.append(name_bytes)
    out.append(struct.pack("<I", tensor.ndim))
    out.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
    out.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def save_checkpoint(params: ParameterSet, path: str | Path) -> None:
    chunks: list[bytes] = [HEADER]
    for e in params.entries:
        _write_record(chunks, e.layer_index, e.layer_name, e.weight)
        _write_record(chunks, e.layer_index, e.layer_name, e.bias)
    Path(path).write_bytes(b"".join(chunks))


@dataclass(frozen=True)
class CheckpointRecord:
    layer_index: int
    name: str
    shape: tuple[int, ...]
    values: np.ndarray


def read_records(path: str | Path) -> list[CheckpointRecord]:
    data = Path(path).read_bytes()
    if not data.startswith(HEADER):
        raise FormatError(f"{path}: missing FDNC1 header")
    pos = len(HEADER)
    records: list[CheckpointRecord] = []

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        layer_index, name_len = struct.unpack("<II", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        records.append(CheckpointRecord(layer_index, name, tuple(shape), values.copy()))
    return records


def load_checkpoint(path: str | Path) -> ParameterSet:
    records = read_records(path)
    if len(records) % 2:
        raise FormatError(f"{path}: expected weight/bias record pairs, got {len(records)} records")
    entries = []
    for i in range(0, len(records), 2):
        w, b = records[i], records[i + 1]
        if w.layer_index != b.layer_index or w.name != b.name:
            raise FormatError(
                f"{path}: weight/bias pair mismatch at records {i},{i + 1} "
                f"({w.layer_index}:'{w.name}' vs {b.layer_index}:'{b.name}')"
            )
        entries.append(ParamEntry(w.layer_index, w.name, w.values, b.values))
    return ParameterSet(tuple(entries))
