"""Round messages and their binary wire format.

Layout (all integers little-endian)::

    "FSTM" | u16 version | u8 direction | u32 round | u32 site_id | u32 n_entries
    n_entries x ( u16 path_len | path utf-8 | u8 dtype | u32 rank | rank x u32 dim | payload )
    u32 crc32 of every preceding byte

The sample count travels as one reserved entry named ``@sample_count`` (u64
scalar); reserved entries start with ``@`` and are never parameters.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping

import numpy as np

from ..errors import ProtocolError

MAGIC = b"FSTM"
VERSION = 1
SAMPLE_COUNT_KEY = "@sample_count"

_HEAD = struct.Struct("<4sHBIII")
_CRC = struct.Struct("<I")

DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2, np.dtype("<u8"): 3}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class Direction(IntEnum):
    SITE_TO_SERVER = 1
    SERVER_TO_SITE = 2


@dataclass
class RoundMessage:
    direction: Direction
    round: int
    site_id: int
    payload: dict[str, np.ndarray] = field(default_factory=dict)
    sample_count: int = 0

    def paths(self) -> frozenset[str]:
        return frozenset(self.payload)


def check_paths(paths, shared: frozenset[str] | set[str]) -> None:
    leaked = sorted(set(paths) - set(shared))
    if leaked:
        raise ProtocolError(f"non-shared paths in payload: {leaked}")


def _entry(path: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in DTYPE_TAGS:
        raise ProtocolError(f"{path}: unsupported dtype {arr.dtype}")
    name = path.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ProtocolError("path too long")
    head = struct.pack(f"<H{len(name)}sBI{arr.ndim}I", len(name), name, DTYPE_TAGS[dt], arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def encode_message(msg: RoundMessage, *, shared: frozenset[str] | set[str] | None) -> bytes:
    """Serialize ``msg``; refuses any payload path outside ``shared``.

    Pass ``shared=None`` only for payloads that are not parameter trees.
    """
    if shared is not None:
        check_paths(msg.payload, shared)
    if any(k.startswith("@") for k in msg.payload):
        raise ProtocolError("payload paths may not start with '@'")
    entries = [_entry(k, msg.payload[k]) for k in sorted(msg.payload)]
    entries.append(_entry(SAMPLE_COUNT_KEY, np.array(msg.sample_count, dtype="<u8")))
    body = _HEAD.pack(MAGIC, VERSION, int(msg.direction), msg.round, msg.site_id, len(entries))
    body += b"".join(entries)
    return body + _CRC.pack(zlib.crc32(body))


def decode_message(buf: bytes, *, shared: frozenset[str] | set[str] | None = None) -> RoundMessage:
    if len(buf) < _HEAD.size + _CRC.size:
        raise ProtocolError("message truncated")
    body, (crc,) = buf[:-_CRC.size], _CRC.unpack(buf[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise ProtocolError("checksum mismatch")
    magic, version, direction, rnd, site_id, n = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported message version {version}")
    try:
        direction = Direction(direction)
    except ValueError:
        raise ProtocolError(f"unknown direction {direction}") from None
    off = _HEAD.size
    payload: dict[str, np.ndarray] = {}
    sample_count = 0
    try:
        for _ in range(n):
            (plen,) = struct.unpack_from("<H", body, off)
            off += 2
            path = body[off:off + plen].decode("utf-8")
            off += plen
            tag, rank = struct.unpack_from("<BI", body, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            dt = TAG_DTYPES[tag]
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(dims).copy()
            off += count * dt.itemsize
            if path == SAMPLE_COUNT_KEY:
                sample_count = int(arr)
            else:
                payload[path] = arr
    except (struct.error, KeyError, ValueError) as exc:
        raise ProtocolError(f"malformed message: {exc}") from None
    if off != len(body):
        raise ProtocolError("trailing bytes after last entry")
    if shared is not None:
        check_paths(payload, shared)
    return RoundMessage(direction, rnd, site_id, payload, sample_count)


def payload_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """Bit-level equality of two payloads (same paths, dtypes, shapes and bytes)."""
    if set(a) != set(b):
        return False
    return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
               and a[k].tobytes() == b[k].tobytes() for k in a)
