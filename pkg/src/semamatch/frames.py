"""Tensor frame serialization.

One frame = magic ``DMT1``, u8 rank, rank little-endian u32 dims, then the
row-major float32 payload (little-endian).  The same encoding is used for
frame files on disk and for tensors embedded in wire-protocol messages.
Masks travel as rank-3 frames with C=1, flows as rank-3 frames with C=2.
"""

from __future__ import annotations

import struct

import numpy as np

from .grids import FlowField, GridError, MaskGrid, TensorGrid

MAGIC = b"DMT1"


class FrameError(ValueError):
    """Raised on malformed frame bytes."""


def encode_array(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    if data.ndim > 255:
        raise FrameError("rank exceeds u8")
    header = MAGIC + struct.pack("<B", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < 5:
        raise FrameError("frame shorter than header")
    if payload[:4] != MAGIC:
        raise FrameError(f"bad frame magic {payload[:4]!r}")
    rank = payload[4]
    offset = 5 + 4 * rank
    if len(payload) < offset:
        raise FrameError("frame truncated inside dims")
    dims = struct.unpack(f"<{rank}I", payload[5:offset])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + 4 * count
    if len(payload) != expected:
        raise FrameError(f"frame payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f4", offset=offset, count=count)
    return flat.reshape(dims).astype(np.float32)


def encode_grid(grid: TensorGrid) -> bytes:
    return encode_array(grid.data)


def encode_mask(mask: MaskGrid) -> bytes:
    return encode_array(mask.values[:, :, None])


def encode_flow(flow: FlowField) -> bytes:
    return encode_array(flow.displacement)


def decode_grid(payload: bytes) -> TensorGrid:
    arr = decode_array(payload)
    if arr.ndim != 3:
        raise FrameError(f"expected rank-3 grid frame, got rank {arr.ndim}")
    try:
        return TensorGrid(arr.astype(np.float64))
    except GridError as exc:
        raise FrameError(str(exc)) from exc


def decode_mask(payload: bytes) -> MaskGrid:
    arr = decode_array(payload)
    if arr.ndim != 3 or arr.shape[2] != 1:
        raise FrameError(f"expected rank-3 mask frame with C=1, got {arr.shape}")
    try:
        return MaskGrid(arr[:, :, 0].astype(np.float64))
    except GridError as exc:
        raise FrameError(str(exc)) from exc


def decode_flow(payload: bytes) -> FlowField:
    arr = decode_array(payload)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise FrameError(f"expected rank-3 flow frame with C=2, got {arr.shape}")
    try:
        return FlowField(arr.astype(np.float64))
    except GridError as exc:
        raise FrameError(str(exc)) from exc


def write_frame(path, arr_or_grid) -> None:
    if isinstance(arr_or_grid, TensorGrid):
        payload = encode_grid(arr_or_grid)
    elif isinstance(arr_or_grid, MaskGrid):
        payload = encode_mask(arr_or_grid)
    elif isinstance(arr_or_grid, FlowField):
        payload = encode_flow(arr_or_grid)
    else:
        payload = encode_array(np.asarray(arr_or_grid))
    with open(path, "wb") as fh:
        fh.write(payload)


def read_frame(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_array(fh.read())
