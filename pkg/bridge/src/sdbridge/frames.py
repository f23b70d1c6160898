"""Client-side codec for the engine's tensor frame format.

magic ``DMT1`` + u8 rank + rank x u32 little-endian dims + row-major
float32 payload.  Implemented here independently; the wire format is the
contract between this package and the engine.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DMT1"


class FrameError(ValueError):
    pass


def encode_array(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<B", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < 5 or payload[:4] != MAGIC:
        raise FrameError("bad tensor frame header")
    rank = payload[4]
    offset = 5 + 4 * rank
    if len(payload) < offset:
        raise FrameError("tensor frame truncated in dims")
    dims = struct.unpack(f"<{rank}I", payload[5:offset])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(payload) != offset + 4 * count:
        raise FrameError("tensor frame payload length mismatch")
    return np.frombuffer(payload, dtype="<f4", offset=offset, count=count).reshape(dims).copy()
