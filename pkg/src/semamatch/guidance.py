"""Clean-latent prediction and the matching-guidance update.

At each step the predicted clean target latent is pulled toward the warped
reference clean latent inside the semantic-consistent mask.  The energy is
the masked mean of per-pixel channel-l2 differences; its gradient is taken
through the clean-latent reparametrization with the noise prediction treated
as locally constant, which gives the closed-form 1/sqrt(alpha_bar) chain
factor and avoids differentiating through the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .grids import FlowField, GridError, MaskGrid, TensorGrid, resize_flow_bilinear
from .matching import warp

# Floor for the per-pixel difference norm; below it the energy gradient is
# defined as zero (the l2 norm is not differentiable at the origin).
EPS_NORM = 1e-8


class ScheduleError(ValueError):
    """Raised on malformed noise schedules or out-of-range steps."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative alpha products indexed by step, alphas_cumprod[0] = 1.

    Entries must be strictly positive and monotonically decreasing; the
    schedule spans t = 0 (clean) through t = T (pure noise weighting).
    """

    alphas_cumprod: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.alphas_cumprod, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ScheduleError("schedule needs at least two entries")
        if abs(arr[0] - 1.0) > 1e-6:
            raise ScheduleError(f"alphas_cumprod[0] must be 1, got {arr[0]}")
        if arr.min() <= 0.0:
            raise ScheduleError("alphas_cumprod must stay strictly positive")
        if np.any(np.diff(arr) >= 0.0):
            raise ScheduleError("alphas_cumprod must be strictly decreasing")
        arr.flags.writeable = False
        object.__setattr__(self, "alphas_cumprod", arr)

    @property
    def total_steps(self) -> int:
        return self.alphas_cumprod.size - 1

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ScheduleError(f"step {t} outside [0, {self.total_steps}]")
        return float(self.alphas_cumprod[t])

    def sigma(self, t: int) -> float:
        """Noise weight sqrt(1 - alpha_bar_t)."""
        return float(np.sqrt(1.0 - self.alpha_bar(t)))

    @classmethod
    def linear(cls, total_steps: int, alpha_final: float = 0.05) -> "NoiseSchedule":
        """alpha_bar interpolated linearly from 1 down to `alpha_final`."""
        if total_steps < 1:
            raise ScheduleError(f"total_steps must be >= 1, got {total_steps}")
        if not 0.0 < alpha_final < 1.0:
            raise ScheduleError(f"alpha_final must be in (0, 1), got {alpha_final}")
        t = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        return cls(1.0 - (1.0 - alpha_final) * t)


@dataclass(frozen=True)
class GuidanceParams:
    """Guidance strength and the step indices it fires on."""

    lambda_g: float = 75.0
    enabled_steps: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.lambda_g < 0.0:
            raise ValueError(f"lambda_g must be >= 0, got {self.lambda_g}")
        object.__setattr__(self, "enabled_steps", frozenset(self.enabled_steps))

    @classmethod
    def for_range(cls, lambda_g: float, start: int, stop: int) -> "GuidanceParams":
        return cls(lambda_g=lambda_g, enabled_steps=frozenset(range(start, stop)))


def predict_z0(z_t: TensorGrid, eps: TensorGrid, t: int, sched: NoiseSchedule) -> TensorGrid:
    """Clean-latent estimate (z_t - sqrt(1 - a_bar) * eps) / sqrt(a_bar)."""
    if z_t.shape != eps.shape:
        raise GridError(f"latent/noise shapes disagree: {z_t.shape} vs {eps.shape}")
    a_bar = sched.alpha_bar(t)
    return TensorGrid((z_t.data - np.sqrt(1.0 - a_bar) * eps.data) / np.sqrt(a_bar))


def align_reference_z0(z0_ref: TensorGrid, flow_x_to_y: FlowField) -> TensorGrid:
    """Warp the reference clean latent onto the target structure.

    A flow at a different resolution is bilinearly resampled to the latent
    grid with displacements rescaled; mismatched aspect ratios are rejected.
    """
    if (flow_x_to_y.height, flow_x_to_y.width) != (z0_ref.height, z0_ref.width):
        if flow_x_to_y.height * z0_ref.width != flow_x_to_y.width * z0_ref.height:
            raise GridError(
                f"flow {flow_x_to_y.height}x{flow_x_to_y.width} and latent "
                f"{z0_ref.height}x{z0_ref.width} have incompatible aspect ratios"
            )
        flow_x_to_y = resize_flow_bilinear(flow_x_to_y, z0_ref.height, z0_ref.width)
    return warp(z0_ref, flow_x_to_y)


def _masked_diffs(
    z0_aligned: TensorGrid, z0_tgt_hat: TensorGrid, m_prime: MaskGrid
) -> tuple[np.ndarray, np.ndarray, float]:
    if z0_aligned.shape != z0_tgt_hat.shape:
        raise GridError(
            f"latent shapes disagree: {z0_aligned.shape} vs {z0_tgt_hat.shape}"
        )
    if (m_prime.height, m_prime.width) != (z0_aligned.height, z0_aligned.width):
        raise GridError(
            f"mask {m_prime.height}x{m_prime.width} does not match latent "
            f"{z0_aligned.height}x{z0_aligned.width}"
        )
    diff = z0_aligned.data - z0_tgt_hat.data
    norms = np.linalg.norm(diff, axis=2)
    return diff, norms, m_prime.foreground_area()


def guidance_energy(
    z0_aligned: TensorGrid, z0_tgt_hat: TensorGrid, m_prime: MaskGrid
) -> float:
    """Masked mean per-pixel channel-l2 difference; 0 for an empty mask."""
    diff, norms, mask_size = _masked_diffs(z0_aligned, z0_tgt_hat, m_prime)
    if mask_size == 0.0:
        return 0.0
    return float((norms * m_prime.values).sum() / mask_size)


def guidance_gradient(
    z0_aligned: TensorGrid,
    z0_tgt_hat: TensorGrid,
    m_prime: MaskGrid,
    t: int,
    sched: NoiseSchedule,
) -> TensorGrid:
    """Gradient of the guidance energy with respect to the noisy latent z_t.

    Inside the mask each pixel contributes -diff / (|M'| * max(||diff||,
    eps)); outside it the gradient is exactly zero.  The chain factor
    1/sqrt(alpha_bar_t) maps the clean-latent derivative onto z_t under the
    stop-gradient treatment of the noise prediction.
    """
    diff, norms, mask_size = _masked_diffs(z0_aligned, z0_tgt_hat, m_prime)
    grad = np.zeros(z0_aligned.shape, dtype=np.float64)
    if mask_size > 0.0:
        denom = mask_size * np.maximum(norms, EPS_NORM)
        scale = np.where(norms > EPS_NORM, m_prime.values / denom, 0.0)
        grad = -diff * scale[:, :, None]
        grad /= np.sqrt(sched.alpha_bar(t))
    return TensorGrid(grad)


def apply_guidance(
    eps: TensorGrid,
    grad: TensorGrid,
    params: GuidanceParams,
    t: int,
    sched: NoiseSchedule,
) -> TensorGrid:
    """Steer the noise prediction: eps - lambda_g * sqrt(1 - a_bar_t) * grad."""
    if eps.shape != grad.shape:
        raise GridError(f"eps/grad shapes disagree: {eps.shape} vs {grad.shape}")
    if params.lambda_g == 0.0:
        return eps
    return TensorGrid(eps.data - params.lambda_g * sched.sigma(t) * grad.data)
