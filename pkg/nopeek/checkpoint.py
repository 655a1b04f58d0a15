"""
Binary checkpoint format.

Layout (all integers little-endian):

    b"NPAE"                           magic
    u8                                format version
    u32 length, UTF-8 JSON            {"arch": ..., "metadata": ...}
    u32                               blob count
    per blob: u32 name length, UTF-8 name, u32 element count, float32[count]
    u32                               CRC-32 of every preceding byte
"""

import json
import struct
import zlib
from typing import Dict

import numpy as np

from .artifacts import PathLike, atomic_write_bytes
from .autoencoder import CHECKPOINT_FORMAT_VERSION, ArchConfig, Checkpoint, TrainingMetadata, expected_shapes
from .errors import CorruptCheckpointError, RejectedInputError

MAGIC = b"NPAE"


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"arch": ckpt.arch.to_dict(), "metadata": ckpt.metadata.to_dict()}, sort_keys=True
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<B", ckpt.format_version), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(ckpt.blobs)))
    for name, blob in ckpt.blobs.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", blob.size))
        parts.append(np.ascontiguousarray(blob, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    """Sequential reader that reports which field ran out of bytes."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, field: str) -> bytes:
        if self.offset + count > len(self.data):
            raise CorruptCheckpointError(field, f"truncated at byte {len(self.data)}")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    """
    @raises CorruptCheckpointError: naming the field at fault for a bad magic,
            unsupported version, truncation, inconsistent blob or CRC mismatch
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CorruptCheckpointError("magic", "not a checkpoint file")
    version = reader.take(1, "version")[0]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CorruptCheckpointError("version", f"unsupported format version {version}")

    header_bytes = reader.take(reader.u32("config length"), "config")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
        arch = ArchConfig.from_dict(header["arch"])
        metadata = TrainingMetadata.from_dict(header["metadata"])
    except (ValueError, KeyError, TypeError) as err:
        raise CorruptCheckpointError("config", str(err)) from err

    shapes = expected_shapes(arch)
    blobs: Dict[str, np.ndarray] = {}
    count = reader.u32("blob count")
    for index in range(count):
        field = f"blob[{index}]"
        try:
            name = reader.take(reader.u32(f"{field}.name length"), f"{field}.name").decode("utf-8")
        except UnicodeDecodeError as err:
            raise CorruptCheckpointError(f"{field}.name", "name is not UTF-8") from err
        if name not in shapes:
            raise CorruptCheckpointError(f"{field}.name", f"unknown tensor '{name}'")
        if name in blobs:
            raise CorruptCheckpointError(f"{field}.name", f"duplicate tensor '{name}'")
        elements = reader.u32(f"{name}.count")
        shape = shapes[name]
        if elements != int(np.prod(shape)):
            raise CorruptCheckpointError(f"{name}.count", f"{elements} elements, expected shape {shape}")
        raw = reader.take(4 * elements, f"{name}.data")
        blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)

    missing = set(shapes) - set(blobs)
    if missing:
        raise CorruptCheckpointError("blob count", f"missing tensors {sorted(missing)}")
    body_end = reader.offset
    stored_crc = reader.u32("crc")
    if reader.offset != len(data):
        raise CorruptCheckpointError("crc", f"{len(data) - reader.offset} trailing bytes")
    if zlib.crc32(data[:body_end]) != stored_crc:
        raise CorruptCheckpointError("crc", "checksum mismatch")
    try:
        return Checkpoint(arch, blobs, metadata, version)
    except (AssertionError, RejectedInputError) as err:
        raise CorruptCheckpointError("blobs", str(err)) from err


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> None:
    """Write ckpt to path atomically."""
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    @raises FileNotFoundError: if path does not exist
    @raises CorruptCheckpointError: if the file is malformed
    """
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())

