"""Denoiser backends.

The engine only ever talks to a denoiser through ``denoise(z, t, cond,
needs)``; the response bundles the noise prediction with whatever per-layer
tensors the caller asked to extract.  ``SyntheticBackend`` is a fully
deterministic in-process implementation for desk-scale testing: the noise
prediction is an affine map of the latent, per-layer features and Q/K/V are
fixed random linear maps of the latent, and each conditioning can plant a
shared "subject" texture into the features at a condition-specific position
(with the cross-attention map as that subject's footprint).  Two conditions
sharing a subject id are the same subject at different positions, which
gives matching tests exact ground-truth correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from .grids import MaskGrid, TensorGrid


class BackendError(RuntimeError):
    """Raised for unknown conditioning handles or backend failures."""


@dataclass(frozen=True)
class ExtractionSpec:
    """Which tensors a denoise call should harvest alongside eps."""

    feature_layers: tuple[int, ...] = ()
    attn_layers: tuple[int, ...] = ()
    cross_attn: bool = False

    @classmethod
    def none(cls) -> "ExtractionSpec":
        return cls()


@dataclass(frozen=True)
class DenoiseResponse:
    eps: TensorGrid
    decoder_features: Mapping[int, TensorGrid] = field(default_factory=dict)
    attention_tensors: Mapping[int, tuple[TensorGrid, TensorGrid, TensorGrid]] = field(
        default_factory=dict
    )
    cross_attn_maps: tuple[TensorGrid, ...] = ()


class Backend(Protocol):
    """Minimal surface the sampler needs from a denoiser."""

    def null_cond(self) -> int: ...

    def attn_num_heads(self, layer: int) -> int: ...

    def denoise(
        self, z: TensorGrid, t: int, cond: int, needs: ExtractionSpec
    ) -> DenoiseResponse: ...


@dataclass(frozen=True)
class AttnLayerSpec:
    height: int
    width: int
    channels: int
    num_heads: int = 1


@dataclass(frozen=True)
class FeatureLayerSpec:
    height: int
    width: int
    channels: int


def _default_attn_layers() -> dict[int, AttnLayerSpec]:
    return {
        1: AttnLayerSpec(4, 4, 48, 4),
        2: AttnLayerSpec(8, 8, 32, 4),
        3: AttnLayerSpec(16, 16, 16, 4),
    }


def _default_feature_layers() -> dict[int, FeatureLayerSpec]:
    # Descriptor layers 2+3 concatenate to 1920 channels, the channel count
    # the engine's PCA defaults are sized for.
    return {
        1: FeatureLayerSpec(4, 4, 320),
        2: FeatureLayerSpec(8, 8, 1280),
        3: FeatureLayerSpec(16, 16, 640),
    }


@dataclass(frozen=True)
class SyntheticBackendSpec:
    """Shape and determinism knobs for the synthetic denoiser.

    ``eps_gain`` bounds the spectral norm of the latent-to-noise map below 1
    so inversion round trips stay stable.  ``subject_amplitude`` is large
    relative to ``projection_gain`` so planted subjects dominate the
    latent-derived feature noise and matching has a clean signal.
    """

    seed: int = 0
    latent_height: int = 16
    latent_width: int = 16
    latent_channels: int = 4
    total_steps: int = 50
    eps_gain: float = 0.35
    subject_amplitude: float = 6.0
    projection_gain: float = 0.25
    base_rank: int = 16
    attn_layers: Mapping[int, AttnLayerSpec] = field(default_factory=_default_attn_layers)
    feature_layers: Mapping[int, FeatureLayerSpec] = field(
        default_factory=_default_feature_layers
    )

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_gain < 1.0:
            raise ValueError(f"eps_gain must be in (0, 1), got {self.eps_gain}")
        if self.base_rank < 1:
            raise ValueError(f"base_rank must be >= 1, got {self.base_rank}")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_height, self.latent_width, self.latent_channels)


@dataclass(frozen=True)
class SubjectCond:
    """Conditioning with an optional planted subject patch.

    ``subject_id`` keys the shared texture; ``center`` and ``size`` are
    fractions of the image extent.
    """

    name: str
    subject_id: str = ""
    center: tuple[float, float] = (0.5, 0.5)
    size: float = 0.0


def subject_box(
    height: int, width: int, center: tuple[float, float], size: float
) -> tuple[int, int, int, int] | None:
    """(y0, y1, x0, x1) of the planted patch, or None when size <= 0.

    The box has a fixed pixel extent derived from `size` alone and is
    shifted (not shrunk) to stay inside the grid, so two conditions with the
    same size always get congruent boxes.
    """
    if size <= 0.0:
        return None
    box_h = min(height, max(1, int(round(size * height))))
    box_w = min(width, max(1, int(round(size * width))))
    y0 = int(round(center[0] * height - box_h / 2.0))
    x0 = int(round(center[1] * width - box_w / 2.0))
    y0 = min(max(y0, 0), height - box_h)
    x0 = min(max(x0, 0), width - box_w)
    return (y0, y0 + box_h, x0, x0 + box_w)


def subject_footprint(
    height: int, width: int, center: tuple[float, float], size: float
) -> np.ndarray:
    """Binary footprint of the planted patch on an H x W grid."""
    mask = np.zeros((height, width), dtype=np.float64)
    box = subject_box(height, width, center, size)
    if box is not None:
        y0, y1, x0, x1 = box
        mask[y0:y1, x0:x1] = 1.0
    return mask


def _spectral_rescale(matrix: np.ndarray, target: float) -> np.ndarray:
    norm = np.linalg.norm(matrix, ord=2)
    if norm == 0.0:
        return matrix
    return matrix * (target / norm)


class _LinearMap:
    """latent -> (h, w, c) as base-projection @ channel-expansion.

    Factoring through a low-rank spatial base keeps the fixed random maps
    small while remaining a single deterministic linear function of z.
    """

    def __init__(self, rng: np.random.Generator, dim: int, h: int, w: int, c: int, rank: int):
        rank = min(rank, c)
        self.h, self.w, self.c = h, w, c
        self.base = rng.standard_normal((dim, h * w * rank)) / np.sqrt(dim)
        self.expand = rng.standard_normal((rank, c)) / np.sqrt(rank)
        self.rank = rank

    def __call__(self, flat: np.ndarray) -> np.ndarray:
        base = (flat @ self.base).reshape(self.h * self.w, self.rank)
        return (base @ self.expand).reshape(self.h, self.w, self.c)


class SyntheticBackend:
    """Deterministic affine denoiser with matchable planted features.

    eps = A @ z + b(t, cond); all random structure is drawn once from the
    spec seed at construction, so responses are pure functions of
    (z, t, cond, needs).
    """

    def __init__(self, spec: SyntheticBackendSpec | None = None) -> None:
        self.spec = spec or SyntheticBackendSpec()
        rng = np.random.default_rng(self.spec.seed)
        dim = int(np.prod(self.spec.latent_shape))
        self._eps_matrix = _spectral_rescale(
            rng.standard_normal((dim, dim)) / np.sqrt(dim), self.spec.eps_gain
        )
        self._eps_bias_base = rng.standard_normal(dim)
        rank = self.spec.base_rank
        self._feature_maps = {
            layer: _LinearMap(rng, dim, fs.height, fs.width, fs.channels, rank)
            for layer, fs in sorted(self.spec.feature_layers.items())
        }
        self._attn_maps = {
            layer: tuple(
                _LinearMap(rng, dim, ls.height, ls.width, ls.channels, rank)
                for _ in range(3)
            )
            for layer, ls in sorted(self.spec.attn_layers.items())
        }
        self._texture_seed = int(rng.integers(0, 2**31 - 1))
        self._conds: dict[int, SubjectCond] = {}
        self._cond_bias: dict[int, np.ndarray] = {}
        self._textures: dict[tuple, np.ndarray] = {}
        self._null = self.register_cond(SubjectCond(name="<null>"))

    # -- conditioning -----------------------------------------------------

    def register_cond(self, cond: SubjectCond) -> int:
        handle = len(self._conds)
        self._conds[handle] = cond
        bias_rng = np.random.default_rng((self.spec.seed, 0xC0DE, handle))
        self._cond_bias[handle] = 0.2 * bias_rng.standard_normal(
            int(np.prod(self.spec.latent_shape))
        )
        return handle

    def null_cond(self) -> int:
        return self._null

    def cond(self, handle: int) -> SubjectCond:
        try:
            return self._conds[handle]
        except KeyError:
            raise BackendError(f"unknown conditioning handle {handle}") from None

    def attn_num_heads(self, layer: int) -> int:
        try:
            return self.spec.attn_layers[layer].num_heads
        except KeyError:
            raise BackendError(f"backend has no attention layer {layer}") from None

    def _texture(self, subject_id: str, channels: int, box_h: int, box_w: int) -> np.ndarray:
        key = (subject_id, channels, box_h, box_w)
        if key not in self._textures:
            digest = sum((i + 1) * ord(c) for i, c in enumerate(subject_id)) & 0x7FFFFFFF
            rng = np.random.default_rng(
                (self._texture_seed, digest, channels, box_h, box_w)
            )
            self._textures[key] = self.spec.subject_amplitude * rng.standard_normal(
                (box_h, box_w, channels)
            )
        return self._textures[key]

    # -- denoising ----------------------------------------------------------

    def _check_latent(self, z: TensorGrid) -> np.ndarray:
        if z.shape != self.spec.latent_shape:
            raise BackendError(
                f"latent shape {z.shape} does not match backend {self.spec.latent_shape}"
            )
        return z.data.reshape(-1)

    def _bias(self, t: int, cond: int) -> np.ndarray:
        if not 0 <= t <= self.spec.total_steps:
            raise BackendError(f"step {t} outside [0, {self.spec.total_steps}]")
        phase = 0.5 + 0.5 * np.cos(np.pi * t / self.spec.total_steps)
        return phase * (0.1 * self._eps_bias_base + self._cond_bias[cond])

    def _subject_signal(
        self, cond: SubjectCond, height: int, width: int, channels: int
    ) -> np.ndarray | None:
        if not cond.subject_id:
            return None
        box = subject_box(height, width, cond.center, cond.size)
        if box is None:
            return None
        signal = np.zeros((height, width, channels), dtype=np.float64)
        y0, y1, x0, x1 = box
        # The texture is anchored to the box corner, so the same subject
        # pixel carries the same descriptor wherever the box sits.
        signal[y0:y1, x0:x1] = self._texture(cond.subject_id, channels, y1 - y0, x1 - x0)
        return signal

    def denoise(
        self, z: TensorGrid, t: int, cond: int, needs: ExtractionSpec | None = None
    ) -> DenoiseResponse:
        needs = needs or ExtractionSpec.none()
        flat = self._check_latent(z)
        spec_cond = self.cond(cond)
        eps = self._eps_matrix @ flat + self._bias(t, cond)
        features: dict[int, TensorGrid] = {}
        for layer in needs.feature_layers:
            if layer not in self._feature_maps:
                raise BackendError(f"backend has no feature layer {layer}")
            fs = self.spec.feature_layers[layer]
            base = self.spec.projection_gain * self._feature_maps[layer](flat)
            signal = self._subject_signal(spec_cond, fs.height, fs.width, fs.channels)
            if signal is not None:
                base = base + signal
            features[layer] = TensorGrid(base)
        attention: dict[int, tuple[TensorGrid, TensorGrid, TensorGrid]] = {}
        for layer in needs.attn_layers:
            if layer not in self._attn_maps:
                raise BackendError(f"backend has no attention layer {layer}")
            q, k, v = (TensorGrid(m(flat)) for m in self._attn_maps[layer])
            attention[layer] = (q, k, v)
        cross: tuple[TensorGrid, ...] = ()
        if needs.cross_attn:
            h, w = self.spec.latent_height, self.spec.latent_width
            footprint = subject_footprint(h, w, spec_cond.center, spec_cond.size)
            cross = (TensorGrid(footprint[:, :, None]),)
        return DenoiseResponse(
            eps=TensorGrid(eps.reshape(self.spec.latent_shape)),
            decoder_features=features,
            attention_tensors=attention,
            cross_attn_maps=cross,
        )

    def subject_mask(self, cond: int) -> MaskGrid:
        """Ground-truth subject footprint at latent resolution."""
        spec_cond = self.cond(cond)
        return MaskGrid(
            subject_footprint(
                self.spec.latent_height,
                self.spec.latent_width,
                spec_cond.center,
                spec_cond.size,
            )
        )
