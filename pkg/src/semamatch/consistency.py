"""Foreground and match-confidence masking.

The foreground mask comes from averaged cross-attention maps for the subject
token, binarized after min-max normalization.  The confidence mask accepts a
match only when composing the forward and backward flows returns near the
origin; the acceptance threshold scales with the foreground fraction of the
image, so sparse subjects get proportionally stricter checks.  Their product
is the mask that actually gates value injection and guidance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grids import (
    FlowField,
    GridError,
    MaskGrid,
    TensorGrid,
    minmax_normalize,
    resize_bilinear,
)
from .matching import warp_flow


@dataclass(frozen=True)
class ConsistencyParams:
    """lambda_c scales the cycle-error threshold; mask_threshold binarizes
    the normalized cross-attention average."""

    lambda_c: float = 0.4
    mask_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_c < 0.0:
            raise ValueError(f"lambda_c must be >= 0, got {self.lambda_c}")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError(f"mask_threshold must be in [0, 1], got {self.mask_threshold}")


def foreground_mask(
    cross_attn_maps: Sequence[TensorGrid],
    params: ConsistencyParams,
    out_res: tuple[int, int],
) -> MaskGrid:
    """Average the subject-token cross-attention maps into a binary mask.

    Maps are resized to `out_res`, averaged across maps and channels,
    min-max normalized, then thresholded (>= mask_threshold -> 1).  A fully
    constant average normalizes to zero, giving an empty mask rather than an
    error.
    """
    if not cross_attn_maps:
        raise GridError("need at least one cross-attention map")
    out_h, out_w = out_res
    total = np.zeros((out_h, out_w), dtype=np.float64)
    for grid in cross_attn_maps:
        if grid.data.min() < 0.0:
            raise GridError("cross-attention maps must be nonnegative")
        total += resize_bilinear(grid, out_h, out_w).data.mean(axis=2)
    averaged = TensorGrid(total[:, :, None] / len(cross_attn_maps))
    normalized = minmax_normalize(averaged).data[:, :, 0]
    return MaskGrid((normalized >= params.mask_threshold).astype(np.float64))


def cycle_error(f_xy: FlowField, f_yx: FlowField) -> np.ndarray:
    """Per-pixel forward-backward error e(x) = ||F_xy(x) + F_yx(x + F_xy(x))||.

    The reverse flow is sampled at the matched location with the same
    bilinear border-clamped kernel used for value warping.
    """
    if (f_xy.height, f_xy.width) != (f_yx.height, f_yx.width):
        raise GridError(
            f"flow resolutions disagree: {f_xy.height}x{f_xy.width} vs "
            f"{f_yx.height}x{f_yx.width}"
        )
    pulled_back = warp_flow(f_yx, f_xy)
    composed = f_xy.displacement + pulled_back.displacement
    return np.linalg.norm(composed, axis=2)


def cycle_confidence(
    f_xy: FlowField,
    f_yx: FlowField,
    m_t: MaskGrid,
    params: ConsistencyParams,
) -> MaskGrid:
    """Binary confidence: accept pixel x iff e(x) < gamma * lambda_c with
    gamma = H * (|M_t| / (H * W)).

    An empty foreground gives gamma = 0, so nothing is confident and matched
    injection degrades to plain self-attention instead of erroring.
    """
    if (m_t.height, m_t.width) != (f_xy.height, f_xy.width):
        raise GridError(
            f"mask {m_t.height}x{m_t.width} does not match flow "
            f"{f_xy.height}x{f_xy.width}"
        )
    errors = cycle_error(f_xy, f_yx)
    h, w = m_t.height, m_t.width
    fg_ratio = m_t.foreground_area() / (h * w)
    threshold = h * fg_ratio * params.lambda_c
    return MaskGrid((errors < threshold).astype(np.float64))


def semantic_consistent_mask(m_t: MaskGrid, u_t: MaskGrid) -> MaskGrid:
    """Hadamard product of foreground and confidence masks."""
    if (m_t.height, m_t.width) != (u_t.height, u_t.width):
        raise GridError(
            f"mask resolutions disagree: {m_t.height}x{m_t.width} vs "
            f"{u_t.height}x{u_t.width}"
        )
    if not (m_t.is_binary and u_t.is_binary):
        raise GridError("semantic-consistent mask expects binary inputs")
    return MaskGrid(m_t.values * u_t.values)
