"""Tensor frame encode/decode."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semamatch import frames
from semamatch.grids import FlowField, MaskGrid, TensorGrid


def test_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    payload = frames.encode_array(arr)
    assert payload[:4] == b"DMT1"
    assert payload[4] == 3
    assert struct.unpack("<3I", payload[5:17]) == (1, 2, 3)
    assert len(payload) == 17 + 6 * 4


@given(
    hnp.arrays(
        dtype=np.float32,
        shape=hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=6),
        elements=st.floats(-1e6, 1e6, width=32),
    )
)
@settings(max_examples=80, deadline=None)
def test_roundtrip_is_identity(arr):
    decoded = frames.decode_array(frames.encode_array(arr))
    assert decoded.shape == arr.shape
    np.testing.assert_array_equal(decoded, arr)


def test_typed_roundtrips():
    rng = np.random.default_rng(5)
    grid = TensorGrid(rng.standard_normal((3, 4, 2)).astype(np.float32).astype(np.float64))
    mask = MaskGrid((rng.uniform(0, 1, (3, 4)) > 0.5).astype(np.float64))
    flow = FlowField(rng.integers(-2, 3, (3, 4, 2)).astype(np.float64))
    assert np.array_equal(frames.decode_grid(frames.encode_grid(grid)).data, grid.data)
    assert np.array_equal(frames.decode_mask(frames.encode_mask(mask)).values, mask.values)
    assert np.array_equal(
        frames.decode_flow(frames.encode_flow(flow)).displacement, flow.displacement
    )


def test_bad_magic_rejected():
    with pytest.raises(frames.FrameError):
        frames.decode_array(b"XXXX" + bytes(10))


def test_truncated_payload_rejected():
    payload = frames.encode_array(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(frames.FrameError):
        frames.decode_array(payload[:-3])


def test_trailing_bytes_rejected():
    payload = frames.encode_array(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(frames.FrameError):
        frames.decode_array(payload + b"\x00")


def test_file_roundtrip(tmp_path):
    arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 2, 2)
    path = tmp_path / "frame.dmt"
    frames.write_frame(path, arr)
    np.testing.assert_array_equal(frames.read_frame(path), arr)
