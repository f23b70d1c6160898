"""Deterministic stand-in for an instrumentable latent-diffusion pipeline.

Shaped like the surface the bridge needs from a real pipeline: named
self-attention modules whose processors can be swapped, decoder feature
taps, subject-token cross-attention maps, a noise schedule and a latent
encoder.  The noise prediction is a contractive affine map of the latent
plus small projections of each attention module's output, so injecting
different values visibly changes the prediction while keeping DDIM stable.
Everything derives from the constructor seed; two conditions sharing a
subject id plant the same feature texture at their own positions, giving
matching a ground-truth correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

AttnProcessor = Callable[[str, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def plain_attention(name: str, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head softmax(q kT / sqrt(d)) v over flattened tokens."""
    h, w, d = q.shape
    qf, kf, vf = (x.reshape(h * w, d) for x in (q, k, v))
    logits = qf @ kf.T / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return (weights @ vf).reshape(h, w, d)


@dataclass(frozen=True)
class FakeCond:
    name: str
    subject_id: str = ""
    center: tuple[float, float] = (0.5, 0.5)
    size: float = 0.0


def _box(h: int, w: int, center: tuple[float, float], size: float):
    if size <= 0.0:
        return None
    bh = min(h, max(1, int(round(size * h))))
    bw = min(w, max(1, int(round(size * w))))
    y0 = min(max(int(round(center[0] * h - bh / 2.0)), 0), h - bh)
    x0 = min(max(int(round(center[1] * w - bw / 2.0)), 0), w - bw)
    return y0, y0 + bh, x0, x0 + bw


class _LinMap:
    def __init__(self, rng, dim, h, w, c, rank=12):
        rank = min(rank, c)
        self.h, self.w, self.c, self.rank = h, w, c, rank
        self.base = rng.standard_normal((dim, h * w * rank)) / np.sqrt(dim)
        self.expand = rng.standard_normal((rank, c)) / np.sqrt(rank)

    def __call__(self, flat):
        return ((flat @ self.base).reshape(self.h * self.w, self.rank) @ self.expand).reshape(
            self.h, self.w, self.c
        )


class FakePipeline:
    """Dual-branch-capable denoiser with swappable attention processors."""

    def __init__(
        self,
        seed: int = 0,
        latent_shape: tuple[int, int, int] = (12, 12, 3),
        total_steps: int = 10,
        attn_shapes: dict[str, tuple[int, int, int]] | None = None,
        feature_shapes: dict[str, tuple[int, int, int]] | None = None,
    ):
        self.latent_shape = latent_shape
        self.total_steps = total_steps
        self.alphas_cumprod = np.linspace(1.0, 0.07, total_steps + 1)
        self.attn_shapes = attn_shapes or {
            "up_blocks.1.attn": (6, 6, 8),
            "up_blocks.2.attn": (12, 12, 8),
            "up_blocks.3.attn": (12, 12, 4),
        }
        self.feature_shapes = feature_shapes or {
            "up_blocks.1.res": (6, 6, 24),
            "up_blocks.2.res": (12, 12, 24),
        }
        rng = np.random.default_rng(seed)
        dim = int(np.prod(latent_shape))
        noise = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self._noise_matrix = noise * (0.3 / np.linalg.norm(noise, ord=2))
        self._noise_bias = 0.1 * rng.standard_normal(dim)
        self._qkv_maps = {
            name: tuple(_LinMap(rng, dim, *shape) for _ in range(3))
            for name, shape in sorted(self.attn_shapes.items())
        }
        self._attn_out_proj = {
            name: 0.05 * rng.standard_normal((int(np.prod(shape)), dim))
            / np.sqrt(np.prod(shape))
            for name, shape in sorted(self.attn_shapes.items())
        }
        self._feature_maps = {
            name: _LinMap(rng, dim, *shape)
            for name, shape in sorted(self.feature_shapes.items())
        }
        self._encode_map = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self._texture_seed = int(rng.integers(0, 2**31 - 1))
        self._textures: dict[tuple, np.ndarray] = {}
        self._conds: dict[int, FakeCond] = {}
        self._cond_bias: dict[int, np.ndarray] = {}
        self.attn_processors: dict[str, AttnProcessor] = {
            name: plain_attention for name in self.attn_shapes
        }
        self.null_cond = self.register_cond(FakeCond(name="<null>"))

    def register_cond(self, cond: FakeCond) -> int:
        handle = len(self._conds)
        self._conds[handle] = cond
        rng = np.random.default_rng((self._texture_seed, 0xBEEF, handle))
        self._cond_bias[handle] = 0.15 * rng.standard_normal(int(np.prod(self.latent_shape)))
        return handle

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """Stand-in VAE encoder: fixed projection of a flattened image."""
        flat = np.asarray(image, dtype=np.float64).reshape(-1)
        dim = int(np.prod(self.latent_shape))
        if flat.size != dim:
            raise ValueError(f"image with {flat.size} values cannot map to {dim} latents")
        return (self._encode_map @ flat).reshape(self.latent_shape)

    def _texture(self, subject_id: str, c: int, bh: int, bw: int) -> np.ndarray:
        key = (subject_id, c, bh, bw)
        if key not in self._textures:
            digest = sum((i + 1) * ord(ch) for i, ch in enumerate(subject_id)) & 0x7FFFFFFF
            rng = np.random.default_rng((self._texture_seed, digest, c, bh, bw))
            self._textures[key] = 5.0 * rng.standard_normal((bh, bw, c))
        return self._textures[key]

    def _features(self, name: str, flat: np.ndarray, cond: FakeCond) -> np.ndarray:
        h, w, c = self.feature_shapes[name]
        feat = 0.2 * self._feature_maps[name](flat)
        if cond.subject_id:
            box = _box(h, w, cond.center, cond.size)
            if box:
                y0, y1, x0, x1 = box
                feat[y0:y1, x0:x1] += self._texture(cond.subject_id, c, y1 - y0, x1 - x0)
        return feat

    def cross_attn_map(self, cond_id: int) -> np.ndarray:
        cond = self._conds[cond_id]
        h, w, _ = self.latent_shape
        mask = np.zeros((h, w, 1))
        box = _box(h, w, cond.center, cond.size)
        if box:
            y0, y1, x0, x1 = box
            mask[y0:y1, x0:x1, 0] = 1.0
        return mask

    def predict_noise(
        self,
        z: np.ndarray,
        t: int,
        cond_id: int,
        feature_tap: Callable[[str, np.ndarray], None] | None = None,
    ) -> np.ndarray:
        """One denoiser evaluation; attention runs through the installed
        processors and decoder features stream through `feature_tap`."""
        cond = self._conds[cond_id]
        flat = np.asarray(z, dtype=np.float64).reshape(-1)
        phase = 0.5 + 0.5 * np.cos(np.pi * t / self.total_steps)
        eps = self._noise_matrix @ flat + phase * (self._noise_bias + self._cond_bias[cond_id])
        for name in sorted(self.attn_shapes):
            q, k, v = (m(flat) for m in self._qkv_maps[name])
            out = self.attn_processors[name](name, q, k, v)
            eps = eps + out.reshape(-1) @ self._attn_out_proj[name]
        if feature_tap is not None:
            for name in sorted(self.feature_shapes):
                feature_tap(name, self._features(name, flat, cond))
        return eps.reshape(self.latent_shape)
