"""Self-attention over flattened grid tokens, plus the matched-value variant.

The softmax(Q Kᵀ / sqrt(d_head)) similarity map is the *structure* path and
the value tensor is the *appearance* path.  ``matched_value_attention``
replaces target values with warped, mask-gated reference values while reusing
the exact structure path of the plain target attention: queries and keys are
never touched, so the two share attention weights bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FlowField, GridError, MaskGrid, TensorGrid, hadamard_blend
from .matching import warp


class AttentionError(ValueError):
    """Raised on shape or head-count mismatches."""


@dataclass(frozen=True)
class AttentionInputs:
    """Target Q/K/V plus the reference values injected by matched attention."""

    q_tgt: TensorGrid
    k_tgt: TensorGrid
    v_tgt: TensorGrid
    v_ref: TensorGrid
    num_heads: int = 1

    def __post_init__(self) -> None:
        grids = (self.q_tgt, self.k_tgt, self.v_tgt, self.v_ref)
        shapes = {g.shape for g in grids}
        if len(shapes) != 1:
            raise AttentionError(f"attention grids disagree on shape: {sorted(shapes)}")
        _check_heads(self.q_tgt, self.num_heads)


def _check_heads(grid: TensorGrid, num_heads: int) -> int:
    if num_heads < 1:
        raise AttentionError(f"num_heads must be >= 1, got {num_heads}")
    if grid.channels % num_heads:
        raise AttentionError(
            f"channel dim {grid.channels} not divisible by {num_heads} heads"
        )
    return grid.channels // num_heads


def _head_tokens(grid: TensorGrid, num_heads: int) -> np.ndarray:
    """(heads, tokens, d_head) view of a grid, row-major token order."""
    d_head = grid.channels // num_heads
    tokens = grid.tokens()  # (N, C)
    return tokens.reshape(-1, num_heads, d_head).transpose(1, 0, 2)


def attention_weights(q: TensorGrid, k: TensorGrid, num_heads: int = 1) -> np.ndarray:
    """Row-stochastic softmax(Q Kᵀ / sqrt(d_head)) per head, shape (heads, N, N).

    Softmax is normalized over keys for each query row, with per-row max
    subtraction for numerical stability.
    """
    if q.shape != k.shape:
        raise AttentionError(f"q/k shapes disagree: {q.shape} vs {k.shape}")
    d_head = _check_heads(q, num_heads)
    qh = _head_tokens(q, num_heads)
    kh = _head_tokens(k, num_heads)
    logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(d_head)
    if not np.all(np.isfinite(logits)):
        raise AttentionError("non-finite attention logits")
    logits -= logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=2, keepdims=True)
    return weights


def _apply_weights(weights: np.ndarray, v: TensorGrid, num_heads: int) -> TensorGrid:
    vh = _head_tokens(v, num_heads)
    out = weights @ vh  # (heads, N, d_head)
    tokens = out.transpose(1, 0, 2).reshape(-1, v.channels)
    return TensorGrid(tokens.reshape(v.height, v.width, v.channels))


def self_attention(
    q: TensorGrid,
    k: TensorGrid,
    v: TensorGrid,
    num_heads: int = 1,
    return_weights: bool = False,
):
    """Plain self-attention over H*W tokens; output reshaped to H x W x d.

    With ``return_weights`` the per-head weight stack is returned alongside
    the output (diagnostic variant used by structure-path tests).
    """
    if v.shape != q.shape:
        raise AttentionError(f"q/v shapes disagree: {q.shape} vs {v.shape}")
    weights = attention_weights(q, k, num_heads)
    out = _apply_weights(weights, v, num_heads)
    if return_weights:
        return out, weights
    return out


def matched_values(
    v_ref: TensorGrid, v_tgt: TensorGrid, flow_x_to_y: FlowField, m_prime: MaskGrid
) -> TensorGrid:
    """Warp reference values onto the target grid and gate them by the mask:
    V_w = warp(V_ref) * M' + V_tgt * (1 - M')."""
    if v_ref.shape != v_tgt.shape:
        raise AttentionError(f"value shapes disagree: {v_ref.shape} vs {v_tgt.shape}")
    if (flow_x_to_y.height, flow_x_to_y.width) != (v_ref.height, v_ref.width):
        raise GridError(
            f"flow {flow_x_to_y.height}x{flow_x_to_y.width} does not match "
            f"attention grid {v_ref.height}x{v_ref.width}"
        )
    warped = warp(v_ref, flow_x_to_y)
    return hadamard_blend(warped, v_tgt, m_prime)


def matched_value_attention(
    inputs: AttentionInputs,
    flow_x_to_y: FlowField,
    m_prime: MaskGrid,
    return_weights: bool = False,
):
    """Attention with warped, mask-gated reference values on the target
    structure path.

    The weights come from the unmodified target queries and keys, exactly as
    in ``self_attention``; only the value tensor changes.  With the mask all
    zero this reduces to plain target self-attention bit for bit.
    """
    v_w = matched_values(inputs.v_ref, inputs.v_tgt, flow_x_to_y, m_prime)
    weights = attention_weights(inputs.q_tgt, inputs.k_tgt, inputs.num_heads)
    out = _apply_weights(weights, v_w, inputs.num_heads)
    if return_weights:
        return out, weights
    return out
