"""8-bit binary PGM/PPM readers and writers for mask and descriptor dumps."""

from __future__ import annotations

import numpy as np

from .grids import MaskGrid, TensorGrid, minmax_normalize
from .matching import pca_fit_project


def write_pgm(path, values: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM (P5)."""
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants (H, W) data, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM (P6)."""
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM wants (H, W, 3) data, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise ValueError(f"expected {magic!r} file, got {fields[0]!r}")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit files supported, maxval {maxval}")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=height * width * channels)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return data.reshape(shape).copy()


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def mask_to_pgm(mask: MaskGrid) -> np.ndarray:
    return np.round(mask.values * 255.0).astype(np.uint8)


def grid_to_pgm(grid: TensorGrid) -> np.ndarray:
    """Channel-averaged grid, min-max normalized into 8-bit gray."""
    mean = TensorGrid(grid.data.mean(axis=2, keepdims=True))
    return np.round(minmax_normalize(mean).data[:, :, 0] * 255.0).astype(np.uint8)


def pca_color_map(grid: TensorGrid) -> np.ndarray:
    """(H, W, 3) uint8 rendering of a descriptor field's top-3 principal
    components, each min-max normalized independently.

    This is a per-image visualization projection, separate from the joint
    PCA used for matching.
    """
    h, w, c = grid.shape
    dim = min(3, c, h * w)
    model = pca_fit_project(grid.tokens(), dim)
    comps = model.projected.reshape(h, w, dim)
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    for i in range(dim):
        channel = TensorGrid(comps[:, :, i : i + 1])
        rgb[:, :, i] = minmax_normalize(channel).data[:, :, 0]
    return np.round(rgb * 255.0).astype(np.uint8)
