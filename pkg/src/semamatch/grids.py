"""Dense grid types and resampling primitives shared by the whole engine.

Three carriers cover everything the pipeline moves around: ``TensorGrid``
(H x W x C real field, used for Q/K/V, feature descriptors and latents),
``FlowField`` (H x W x 2 pixel displacements, backward-warp convention) and
``MaskGrid`` (H x W values in [0, 1]).  All three are immutable values:
constructors copy their input and freeze the underlying array, so grids can
be shared across threads and reused as dict keys for caching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    """Raised when a grid is malformed or shapes disagree."""


def _as_frozen(data: np.ndarray) -> np.ndarray:
    out = np.array(data, dtype=np.float64, copy=True, order="C")
    out.flags.writeable = False
    return out


def _require_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise GridError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class TensorGrid:
    """H x W x C field of finite reals, row-major (h, w, c)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise GridError(f"TensorGrid expects rank 2 or 3 data, got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise GridError(f"TensorGrid dims must be >= 1, got {arr.shape}")
        _require_finite(arr, "TensorGrid")
        object.__setattr__(self, "data", _as_frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @classmethod
    def constant(cls, height: int, width: int, channels: int, value: float) -> "TensorGrid":
        return cls(np.full((height, width, channels), value, dtype=np.float64))

    def tokens(self) -> np.ndarray:
        """Flattened (H*W, C) view in row-major scan order."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (dx, dy) displacements in pixel units of the source grid.

    Backward-warp convention: the flow lives on the grid being *filled*;
    each pixel points at the location it samples from.
    """

    displacement: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.displacement)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise GridError(f"FlowField expects (H, W, 2) data, got {arr.shape}")
        if min(arr.shape[:2]) < 1:
            raise GridError(f"FlowField dims must be >= 1, got {arr.shape}")
        _require_finite(arr, "FlowField")
        object.__setattr__(self, "displacement", _as_frozen(arr))

    @property
    def height(self) -> int:
        return self.displacement.shape[0]

    @property
    def width(self) -> int:
        return self.displacement.shape[1]

    @classmethod
    def zero(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float64))

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "FlowField":
        disp = np.empty((height, width, 2), dtype=np.float64)
        disp[:, :, 0] = dx
        disp[:, :, 1] = dy
        return cls(disp)


@dataclass(frozen=True)
class MaskGrid:
    """H x W weights in [0, 1]; binary masks take only {0, 1}."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim != 2:
            raise GridError(f"MaskGrid expects (H, W) data, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise GridError(f"MaskGrid dims must be >= 1, got {arr.shape}")
        _require_finite(arr, "MaskGrid")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise GridError("MaskGrid values must lie in [0, 1]")
        object.__setattr__(self, "values", _as_frozen(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def foreground_area(self) -> float:
        """Total mask weight |M| (pixel count for binary masks)."""
        return float(self.values.sum())

    @classmethod
    def full(cls, height: int, width: int, value: float = 1.0) -> "MaskGrid":
        return cls(np.full((height, width), value, dtype=np.float64))


# -- resampling ---------------------------------------------------------------


def _corner_aligned_coords(out_n: int, in_n: int) -> np.ndarray:
    if out_n == 1 or in_n == 1:
        return np.zeros(out_n, dtype=np.float64)
    return np.arange(out_n, dtype=np.float64) * (in_n - 1) / (out_n - 1)


def bilinear_sample(data: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) `data` at float coords (sx, sy), clamping to borders."""
    h, w = data.shape[0], data.shape[1]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(grid: TensorGrid, out_h: int, out_w: int) -> TensorGrid:
    """Channelwise bilinear resample with corner-aligned sampling.

    Returns the input unchanged when the size already matches; sample
    coordinates outside the source clamp to the border.
    """
    if out_h < 1 or out_w < 1:
        raise GridError(f"output dims must be >= 1, got {out_h}x{out_w}")
    if out_h == grid.height and out_w == grid.width:
        return grid
    sy = _corner_aligned_coords(out_h, grid.height)
    sx = _corner_aligned_coords(out_w, grid.width)
    gx, gy = np.meshgrid(sx, sy)
    return TensorGrid(bilinear_sample(grid.data, gx, gy))


def resize_mask_bilinear(mask: MaskGrid, out_h: int, out_w: int) -> MaskGrid:
    resized = resize_bilinear(TensorGrid(mask.values[:, :, None]), out_h, out_w)
    return MaskGrid(resized.data[:, :, 0])


def resize_flow_bilinear(flow: FlowField, out_h: int, out_w: int) -> FlowField:
    """Resample a flow field and rescale displacements to the new pixel units.

    dx scales with the width ratio and dy with the height ratio, so a
    constant shift survives resampling exactly.
    """
    if out_h == flow.height and out_w == flow.width:
        return flow
    resized = resize_bilinear(TensorGrid(flow.displacement), out_h, out_w)
    disp = np.array(resized.data)
    disp[:, :, 0] *= out_w / flow.width
    disp[:, :, 1] *= out_h / flow.height
    return FlowField(disp)


# -- elementwise utilities -----------------------------------------------------


def hadamard_blend(a: TensorGrid, b: TensorGrid, m: MaskGrid) -> TensorGrid:
    """Per-pixel convex blend a*m + b*(1-m), mask broadcast over channels."""
    if a.shape != b.shape:
        raise GridError(f"blend operands disagree: {a.shape} vs {b.shape}")
    if (m.height, m.width) != (a.height, a.width):
        raise GridError(
            f"mask resolution {m.height}x{m.width} does not match grid {a.height}x{a.width}"
        )
    if np.all(m.values == 1.0):
        return a
    if np.all(m.values == 0.0):
        return b
    weights = m.values[:, :, None]
    return TensorGrid(a.data * weights + b.data * (1.0 - weights))


def minmax_normalize(grid: TensorGrid) -> TensorGrid:
    """Affinely map values onto [0, 1]; constant grids map to all-zeros."""
    lo = float(grid.data.min())
    hi = float(grid.data.max())
    if hi == lo:
        return TensorGrid(np.zeros(grid.shape, dtype=np.float64))
    return TensorGrid((grid.data - lo) / (hi - lo))
