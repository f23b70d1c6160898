"""Dense semantic matching between the reference and target branches.

Per step, decoder features from both branches are resized to a common
resolution, channel-concatenated and jointly PCA-reduced into one shared
subspace.  All-pairs cosine similarities between the two descriptor fields
form the cost volume; hard argmax over it yields displacement fields in both
directions, and ``warp`` resamples grids along those fields (bilinear,
border-clamped, backward convention).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .grids import FlowField, GridError, TensorGrid, bilinear_sample, resize_bilinear

WORKERS_ENV = "SEMAMATCH_WORKERS"

# Column-block width for cost-volume assembly.  Fixed regardless of worker
# count so results are bitwise identical under any parallel schedule.
_COST_BLOCK = 256

_EIGENVALUE_TOL = 1e-10


class MatchingError(ValueError):
    """Raised on invalid matching inputs."""


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PcaModel:
    """Result of fitting a PCA projection.

    ``completed_dims`` counts trailing basis directions that had to be filled
    by orthonormal completion because the data rank fell below the requested
    dimension; they carry no variance but keep the basis well-formed.
    """

    basis: np.ndarray  # (D_raw, dim), orthonormal columns
    mean: np.ndarray  # (D_raw,)
    projected: np.ndarray  # (N, dim)
    eigenvalues: np.ndarray  # (dim,) descending
    completed_dims: int = 0

    @property
    def rank_deficient(self) -> bool:
        return self.completed_dims > 0


def _orthonormal_completion(partial: np.ndarray, total: int) -> np.ndarray:
    """Extend `partial` (D x k orthonormal columns) to D x total columns."""
    d, k = partial.shape
    candidates = np.concatenate([partial, np.eye(d)], axis=1)
    q, _ = np.linalg.qr(candidates)
    return q[:, :total]


def pca_fit_project(samples: np.ndarray, dim: int) -> PcaModel:
    """Project N x D samples onto the top-`dim` principal directions.

    Uses an eigendecomposition of the D x D covariance when D <= N and the
    N x N Gram matrix otherwise (cheaper for wide descriptors).  When the
    data rank falls below `dim` the basis is padded with an orthonormal
    completion and the model is flagged rank-deficient.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise MatchingError(f"samples must be N x D, got shape {samples.shape}")
    n, d_raw = samples.shape
    if not 1 <= dim <= d_raw:
        raise MatchingError(f"pca dim {dim} out of range [1, {d_raw}]")
    if n < dim:
        raise MatchingError(f"need at least {dim} samples, got {n}")

    mean = samples.mean(axis=0)
    centered = samples - mean
    denom = max(n - 1, 1)

    if d_raw <= n:
        cov = centered.T @ centered / denom
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:dim]
        values = eigvals[order]
        basis = eigvecs[:, order]
        completed = int(np.count_nonzero(values <= _EIGENVALUE_TOL))
    else:
        gram = centered @ centered.T / denom
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1][:dim]
        values = eigvals[order]
        keep = values > _EIGENVALUE_TOL
        rank = int(np.count_nonzero(keep))
        directions = centered.T @ eigvecs[:, order[:rank]]
        directions /= np.sqrt(values[:rank] * denom)
        if rank < dim:
            basis = _orthonormal_completion(directions, dim) if rank else _orthonormal_completion(
                np.zeros((d_raw, 0)), dim
            )
        else:
            basis = directions
        completed = dim - rank

    values = np.maximum(values, 0.0)
    return PcaModel(
        basis=basis,
        mean=mean,
        projected=centered @ basis,
        eigenvalues=values,
        completed_dims=completed,
    )


@dataclass(frozen=True)
class DescriptorPair:
    """Jointly reduced descriptor fields for the two branches."""

    psi_ref: TensorGrid
    psi_tgt: TensorGrid
    basis: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False

    def __post_init__(self) -> None:
        if self.psi_ref.shape != self.psi_tgt.shape:
            raise MatchingError(
                f"descriptor shapes disagree: {self.psi_ref.shape} vs {self.psi_tgt.shape}"
            )


def _stack_layers(layers: Sequence[TensorGrid], out_h: int, out_w: int) -> np.ndarray:
    resized = [resize_bilinear(g, out_h, out_w).data for g in layers]
    return np.concatenate(resized, axis=2)


def assemble_descriptors(
    layer_feats_ref: Sequence[TensorGrid],
    layer_feats_tgt: Sequence[TensorGrid],
    target_res: int | tuple[int, int],
    pca_dim: int,
) -> DescriptorPair:
    """Resize per-layer features to a common resolution, concatenate channels
    and PCA both branches into one shared `pca_dim` subspace.

    The projection is fit on the union of reference and target pixel vectors
    so cosine comparisons across branches happen in a common basis.
    """
    if not layer_feats_ref or not layer_feats_tgt:
        raise MatchingError("need at least one feature layer per branch")
    if len(layer_feats_ref) != len(layer_feats_tgt):
        raise MatchingError(
            f"layer counts disagree: {len(layer_feats_ref)} vs {len(layer_feats_tgt)}"
        )
    out_h, out_w = (target_res, target_res) if isinstance(target_res, int) else target_res

    raw_ref = _stack_layers(layer_feats_ref, out_h, out_w)
    raw_tgt = _stack_layers(layer_feats_tgt, out_h, out_w)
    d_raw = raw_ref.shape[2]
    if raw_tgt.shape[2] != d_raw:
        raise MatchingError("branches disagree on concatenated channel count")
    n_pixels = out_h * out_w
    if pca_dim > d_raw:
        raise MatchingError(f"pca dim {pca_dim} exceeds raw channels {d_raw}")
    if pca_dim > 2 * n_pixels:
        raise MatchingError(f"pca dim {pca_dim} exceeds sample count {2 * n_pixels}")

    stacked = np.concatenate(
        [raw_ref.reshape(n_pixels, d_raw), raw_tgt.reshape(n_pixels, d_raw)], axis=0
    )
    model = pca_fit_project(stacked, pca_dim)
    psi_ref = model.projected[:n_pixels].reshape(out_h, out_w, pca_dim)
    psi_tgt = model.projected[n_pixels:].reshape(out_h, out_w, pca_dim)
    return DescriptorPair(
        psi_ref=TensorGrid(psi_ref),
        psi_tgt=TensorGrid(psi_tgt),
        basis=model.basis,
        mean=model.mean,
        rank_deficient=model.rank_deficient,
    )


@dataclass(frozen=True)
class CostVolume:
    """All-pairs cosine similarity; rows index reference pixels, columns
    target pixels, both in row-major scan order of an (height, width) grid."""

    values: np.ndarray
    height: int
    width: int

    def __post_init__(self) -> None:
        n = self.height * self.width
        if self.values.shape != (n, n):
            raise MatchingError(
                f"cost volume shape {self.values.shape} does not match {n} pixels"
            )


def _unit_rows(tokens: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return tokens / safe


def cost_volume(pair: DescriptorPair, workers: int | None = None) -> CostVolume:
    """Cosine similarity between every reference/target pixel pair.

    Zero descriptor vectors get similarity 0 against everything.  Columns are
    computed in fixed-size blocks; `workers` only distributes blocks across
    threads, so the result is identical for any worker count.
    """
    h, w = pair.psi_ref.height, pair.psi_ref.width
    x = _unit_rows(pair.psi_ref.tokens())
    y = _unit_rows(pair.psi_tgt.tokens())
    n = x.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    blocks = [(start, min(start + _COST_BLOCK, n)) for start in range(0, n, _COST_BLOCK)]

    def fill(block: tuple[int, int]) -> None:
        lo, hi = block
        out[:, lo:hi] = x @ y[lo:hi].T

    n_workers = workers if workers is not None else default_workers()
    if n_workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(fill, blocks))
    else:
        for block in blocks:
            fill(block)
    return CostVolume(values=out, height=h, width=w)


Direction = Literal["x_to_y", "y_to_x"]


def argmax_flow(cost: CostVolume, direction: Direction, workers: int | None = None) -> FlowField:
    """Hard-argmax displacement field over the cost volume.

    ``x_to_y``: each target pixel j picks the reference pixel i* maximising
    C(i, j); the flow lives on the target grid and points at the matched
    reference location (backward-warp convention).  ``y_to_x`` is the
    symmetric reference-side field.  Ties break to the smallest flat index.
    """
    h, w = cost.height, cost.width
    if direction == "x_to_y":
        best = np.argmax(cost.values, axis=0)
    elif direction == "y_to_x":
        best = np.argmax(cost.values, axis=1)
    else:
        raise MatchingError(f"unknown direction {direction!r}")
    rows = np.arange(h * w) // w
    cols = np.arange(h * w) % w
    disp = np.empty((h * w, 2), dtype=np.float64)
    disp[:, 0] = (best % w) - cols
    disp[:, 1] = (best // w) - rows
    return FlowField(disp.reshape(h, w, 2))


def warp(grid: TensorGrid, flow: FlowField) -> TensorGrid:
    """Backward-warp: out(x) = grid(x + F(x)), bilinear with border clamp."""
    if (flow.height, flow.width) != (grid.height, grid.width):
        raise GridError(
            f"flow resolution {flow.height}x{flow.width} does not match "
            f"grid {grid.height}x{grid.width}"
        )
    gy, gx = np.mgrid[0 : grid.height, 0 : grid.width].astype(np.float64)
    sx = gx + flow.displacement[:, :, 0]
    sy = gy + flow.displacement[:, :, 1]
    return TensorGrid(bilinear_sample(grid.data, sx, sy))


def warp_flow(inner: FlowField, by: FlowField) -> FlowField:
    """Resample `inner` at the locations `by` points to: W(inner; by)."""
    warped = warp(TensorGrid(inner.displacement), by)
    return FlowField(warped.data)
