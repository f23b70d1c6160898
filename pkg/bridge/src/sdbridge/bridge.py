"""Instrumenting adapter between a latent-diffusion pipeline and the engine.

The bridge owns the diffusion loop.  Each step it (1) runs a capture pass
over both branches and CFG sides, recording Q/K/V per mapped attention
layer, decoder features per mapped descriptor layer and the subject
cross-attention map; (2) ships a step request to the engine (features come
from the previous evaluation, i.e. step t+1); (3) re-runs the target
forward with the engine's blended value tensors injected into the mapped
attention layers, leaving queries and keys untouched; (4) subtracts the
returned guidance terms from the target noise predictions; (5) combines
classifier-free guidance and advances both branches with a deterministic
DDIM update.  If the engine connection drops mid-run the loop falls back
to baseline sampling and finishes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import protocol
from .frames import decode_array, encode_array
from .protocol import EngineClient, EngineError, Entry

REQUIRED_ATTN_LAYERS = (1, 2, 3)
REQUIRED_FEATURE_LAYERS = (2, 3)

_BRANCHES = ("ref_uncond", "ref_cond", "tgt_uncond", "tgt_cond")
_BRANCH_TAGS = {
    "ref_cond": protocol.B_REF_COND,
    "tgt_cond": protocol.B_TGT_COND,
    "ref_uncond": protocol.B_REF_UNCOND,
    "tgt_uncond": protocol.B_TGT_UNCOND,
}


class BridgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class BridgeConfig:
    """Run parameters plus the pipeline-to-engine layer name maps.

    The maps must cover the engine's matched-attention layers {1,2,3} and
    descriptor layers {2,3}; exact pipeline layer names vary by model
    version, so the map is user-supplied configuration.  ``shape_table``
    optionally pins the tensor shapes each mapped layer must produce.
    """

    model_id: str
    subject_token: str
    prompt: str
    engine_host: str = "127.0.0.1"
    engine_port: int = 7433
    attn_layer_map: Mapping[str, int] = field(default_factory=dict)
    feature_layer_map: Mapping[str, int] = field(default_factory=dict)
    shape_table: Mapping[str, tuple[int, int, int]] | None = None
    total_steps: int = 50
    ama_step_start: int = 4
    ama_step_end: int = 50
    lambda_c: float = 0.4
    lambda_g: float = 75.0
    cfg_scale: float = 7.5
    pca_dim: int = 256
    mask_threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        """Check the layer maps before any model is loaded."""
        attn = set(self.attn_layer_map.values())
        missing = [l for l in REQUIRED_ATTN_LAYERS if l not in attn]
        if missing:
            raise BridgeError(f"attn_layer_map missing engine layers {missing}")
        feats = set(self.feature_layer_map.values())
        missing = [l for l in REQUIRED_FEATURE_LAYERS if l not in feats]
        if missing:
            raise BridgeError(f"feature_layer_map missing engine layers {missing}")
        if not 0 <= self.ama_step_start <= self.ama_step_end <= self.total_steps:
            raise BridgeError(
                f"gate range [{self.ama_step_start}, {self.ama_step_end}) outside "
                f"[0, {self.total_steps}]"
            )

    def engine_config_text(self) -> str:
        """The engine session config, mirroring its key-value schema."""
        descriptor_layers = ",".join(
            str(l) for l in sorted(set(self.feature_layer_map.values()))
        )
        ama_layers = ",".join(str(l) for l in sorted(set(self.attn_layer_map.values())))
        return (
            f"total_steps = {self.total_steps}\n"
            f"ama_step_start = {self.ama_step_start}\n"
            f"ama_step_end = {self.ama_step_end}\n"
            f"descriptor_layers = {descriptor_layers}\n"
            f"ama_layers = {ama_layers}\n"
            f"lambda_c = {self.lambda_c}\n"
            f"lambda_g = {self.lambda_g}\n"
            f"cfg_scale = {self.cfg_scale}\n"
            f"pca_dim = {self.pca_dim}\n"
            f"mask_threshold = {self.mask_threshold}\n"
            f"seed = {self.seed}\n"
        )


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def ddim_step(z: np.ndarray, eps: np.ndarray, t: int, alphas: np.ndarray) -> np.ndarray:
    a_t, a_prev = alphas[t], alphas[t - 1]
    z0 = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * z0 + np.sqrt(1.0 - a_prev) * eps


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_invert(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    z0: np.ndarray,
    alphas: np.ndarray,
    refine_steps: int = 3,
) -> list[np.ndarray]:
    """z_0 -> z_T trajectory inverting the deterministic update."""
    trajectory = [z0]
    z_prev = z0
    for t in range(1, len(alphas)):
        a_t, a_prev = alphas[t], alphas[t - 1]
        ratio = np.sqrt(a_prev / a_t)
        coeff = np.sqrt(1.0 - a_prev) - ratio * np.sqrt(1.0 - a_t)
        eps = eps_fn(z_prev, t)
        z_t = (z_prev - coeff * eps) / ratio
        for _ in range(refine_steps):
            eps = eps_fn(z_t, t)
            z_t = (z_prev - coeff * eps) / ratio
        trajectory.append(z_t)
        z_prev = z_t
    return trajectory


@dataclass
class StepCapture:
    """Everything one capture pass harvested, plus the request it built."""

    step: int
    eps: dict[str, np.ndarray]
    qkv: dict[tuple[str, str], tuple[np.ndarray, np.ndarray, np.ndarray]]
    features: dict[tuple[str, str], np.ndarray]
    cross_attn: np.ndarray
    latent_tgt: np.ndarray
    request: bytes | None = None

    def qk_hashes(self) -> dict[tuple[str, str], tuple[str, str]]:
        return {
            key: (tensor_digest(q), tensor_digest(k))
            for key, (q, k, _) in self.qkv.items()
        }


class EngineBridge:
    """Drives one personalization run, delegating matching to the engine."""

    def __init__(self, config: BridgeConfig, pipeline_factory: Callable[[], object]):
        config.validate()
        self.config = config
        self.pipeline = pipeline_factory()
        self.client: EngineClient | None = None
        self.engine_down = False
        self._prev_features: dict[tuple[str, str], np.ndarray] | None = None
        self._shape_checked = False
        self.conds: dict[str, int] = {}

    # -- session setup -----------------------------------------------------

    def set_conditions(self, ref_cond: int, tgt_cond: int, uncond: int) -> None:
        self.conds = {
            "ref_cond": ref_cond,
            "tgt_cond": tgt_cond,
            "ref_uncond": uncond,
            "tgt_uncond": uncond,
        }

    def connect(self, ref_latent: np.ndarray) -> None:
        self.client = EngineClient.connect(self.config.engine_host, self.config.engine_port)
        self.client.send_config(self.config.engine_config_text())
        self.client.send_schedule(np.asarray(self.pipeline.alphas_cumprod))
        self.client.send_ref_latent(ref_latent)
        self.engine_down = False

    def _check_shapes(self, capture: StepCapture) -> None:
        if self._shape_checked or not self.config.shape_table:
            return
        for name in self.config.attn_layer_map:
            q, _, _ = capture.qkv[(name, "tgt_cond")]
            expected = tuple(self.config.shape_table.get(name, q.shape))
            if q.shape != expected:
                raise BridgeError(
                    f"layer {name!r} produced shape {q.shape}, expected {expected}"
                )
        self._shape_checked = True

    # -- per-step protocol -------------------------------------------------

    def gated(self, iteration: int) -> bool:
        return self.config.ama_step_start <= iteration < self.config.ama_step_end

    def capture_step(self, z_ref: np.ndarray, z_tgt: np.ndarray, t: int) -> StepCapture:
        """Run the capture pass and assemble the step request for t.

        Descriptor features always come from the *previous* capture (the
        evaluation at t+1); the first iteration therefore builds no request.
        """
        eps: dict[str, np.ndarray] = {}
        qkv: dict[tuple[str, str], tuple] = {}
        features: dict[tuple[str, str], np.ndarray] = {}

        for branch in _BRANCHES:
            latent = z_ref if branch.startswith("ref") else z_tgt
            recorder = _CaptureProcessors(self.pipeline, self.config.attn_layer_map)
            tap = None
            if branch in ("ref_cond", "tgt_cond"):
                def tap(name, feat, _branch=branch):  # noqa: E731 — closure per branch
                    if name in self.config.feature_layer_map:
                        features[(name, _branch)] = feat

            with recorder:
                eps[branch] = self.pipeline.predict_noise(
                    latent, t, self.conds[branch], feature_tap=tap
                )
            for name, tensors in recorder.recorded.items():
                qkv[(name, branch)] = tensors

        capture = StepCapture(
            step=t,
            eps=eps,
            qkv=qkv,
            features=features,
            cross_attn=self.pipeline.cross_attn_map(self.conds["tgt_cond"]),
            latent_tgt=np.asarray(z_tgt, dtype=np.float64),
        )
        self._check_shapes(capture)

        iteration = self.config.total_steps - t
        if self.gated(iteration) and self._prev_features is not None:
            capture.request = protocol.pack_step(t, self._build_entries(capture))
        self._prev_features = features
        return capture

    def _build_entries(self, capture: StepCapture) -> list[Entry]:
        assert self._prev_features is not None
        entries: list[Entry] = []
        for (name, branch), feat in sorted(self._prev_features.items()):
            entries.append(
                Entry(
                    protocol.K_FEATURE,
                    self.config.feature_layer_map[name],
                    _BRANCH_TAGS[branch],
                    encode_array(feat),
                )
            )
        entries.append(
            Entry(protocol.K_CROSS_ATTN, 0, protocol.B_TGT_COND, encode_array(capture.cross_attn))
        )
        for (name, branch), (q, k, v) in sorted(capture.qkv.items()):
            layer = self.config.attn_layer_map[name]
            tag = _BRANCH_TAGS[branch]
            entries.append(Entry(protocol.K_QUERY, layer, tag, encode_array(q)))
            entries.append(Entry(protocol.K_KEY, layer, tag, encode_array(k)))
            entries.append(Entry(protocol.K_VALUE, layer, tag, encode_array(v)))
        entries.append(
            Entry(protocol.K_LATENT, 0, protocol.B_TGT_COND, encode_array(capture.latent_tgt))
        )
        for branch in ("tgt_uncond", "tgt_cond"):
            entries.append(
                Entry(
                    protocol.K_EPS, 0, _BRANCH_TAGS[branch], encode_array(capture.eps[branch])
                )
            )
        return entries

    def apply_response(
        self, reply: list[Entry], capture: StepCapture, t: int
    ) -> dict[str, np.ndarray]:
        """Re-run the target forward with blended values injected; return the
        guided noise prediction per CFG branch.

        Queries and keys are hashed before and after the patched pass;
        any mismatch aborts the run.
        """
        name_by_layer = {v: k for k, v in self.config.attn_layer_map.items()}
        overrides: dict[str, dict[str, np.ndarray]] = {"tgt_uncond": {}, "tgt_cond": {}}
        grads: dict[str, np.ndarray] = {}
        for entry in reply:
            if entry.kind == protocol.K_VW and entry.layer in name_by_layer:
                branch = (
                    "tgt_cond" if entry.branch == protocol.B_TGT_COND else "tgt_uncond"
                )
                overrides[branch][name_by_layer[entry.layer]] = decode_array(entry.payload)
            elif entry.kind == protocol.K_GRAD:
                branch = (
                    "tgt_cond" if entry.branch == protocol.B_TGT_COND else "tgt_uncond"
                )
                grads[branch] = decode_array(entry.payload).astype(np.float64)

        pre_hashes = capture.qk_hashes()
        patched: dict[str, np.ndarray] = {}
        for branch in ("tgt_uncond", "tgt_cond"):
            injected = {
                name: vw
                for name, vw in overrides[branch].items()
                # an engine value identical to the captured one (after f32
                # transport) means the mask gated this layer off entirely
                if not np.array_equal(
                    vw, np.ascontiguousarray(capture.qkv[(name, branch)][2], dtype="<f4")
                )
            }
            if injected:
                injector = _InjectProcessors(self.pipeline, injected)
                with injector:
                    patched[branch] = self.pipeline.predict_noise(
                        capture.latent_tgt, t, self.conds[branch], feature_tap=None
                    )
                for name, (q, k) in injector.seen_qk.items():
                    pre_q, pre_k = pre_hashes[(name, branch)]
                    if tensor_digest(q) != pre_q or tensor_digest(k) != pre_k:
                        raise BridgeError(
                            f"query/key tensors changed at layer {name!r} during patching"
                        )
            else:
                patched[branch] = capture.eps[branch]
            if branch in grads:
                patched[branch] = patched[branch] - grads[branch]
        return patched

    # -- full loop -------------------------------------------------------------

    def run(self, ref_latent: np.ndarray) -> dict:
        """Invert the reference, then sample both branches to t = 0."""
        if not self.conds:
            raise BridgeError("set_conditions must be called before run")
        alphas = np.asarray(self.pipeline.alphas_cumprod, dtype=np.float64)
        scale = self.config.cfg_scale

        def ref_eps(z, t):
            eps_c = self.pipeline.predict_noise(z, t, self.conds["ref_cond"])
            eps_u = self.pipeline.predict_noise(z, t, self.conds["ref_uncond"])
            return cfg_combine(eps_u, eps_c, scale)

        trajectory = ddim_invert(ref_eps, np.asarray(ref_latent, float), alphas)
        z_ref = trajectory[-1]
        rng = np.random.default_rng(self.config.seed)
        z_tgt = rng.standard_normal(self.pipeline.latent_shape)

        steps = 0
        for t in range(self.config.total_steps, 0, -1):
            capture = self.capture_step(z_ref, z_tgt, t)
            eps = dict(capture.eps)
            if capture.request is not None and self.client and not self.engine_down:
                try:
                    reply_payload = self.client.step_raw(capture.request)
                    _, reply = protocol.unpack_step(reply_payload)
                    patched = self.apply_response(reply, capture, t)
                    eps.update(patched)
                except (ConnectionError, OSError, EngineError):
                    # finish in baseline mode; the pipeline itself is intact
                    self.engine_down = True
            z_ref = ddim_step(z_ref, cfg_combine(eps["ref_uncond"], eps["ref_cond"], scale), t, alphas)
            z_tgt = ddim_step(z_tgt, cfg_combine(eps["tgt_uncond"], eps["tgt_cond"], scale), t, alphas)
            steps += 1

        return {
            "final_latent": z_tgt,
            "final_ref_latent": z_ref,
            "ref_recon_max_err": float(np.abs(z_ref - np.asarray(ref_latent)).max()),
            "steps": steps,
            "engine_down": self.engine_down,
        }


class _CaptureProcessors:
    """Swap mapped attention processors for recording ones, restore on exit."""

    def __init__(self, pipeline, layer_map: Mapping[str, int]):
        self.pipeline = pipeline
        self.names = [n for n in layer_map if n in pipeline.attn_processors]
        self.recorded: dict[str, tuple] = {}
        self._saved: dict[str, object] = {}

    def __enter__(self):
        for name in self.names:
            self._saved[name] = self.pipeline.attn_processors[name]

            def processor(layer, q, k, v, _orig=self._saved[name]):
                self.recorded[layer] = (q.copy(), k.copy(), v.copy())
                return _orig(layer, q, k, v)

            self.pipeline.attn_processors[name] = processor
        return self

    def __exit__(self, *exc):
        for name, orig in self._saved.items():
            self.pipeline.attn_processors[name] = orig
        return False


class _InjectProcessors:
    """Replace value tensors with engine-blended ones; queries/keys pass
    through untouched and are recorded for the hash invariant."""

    def __init__(self, pipeline, overrides: Mapping[str, np.ndarray]):
        self.pipeline = pipeline
        self.overrides = overrides
        self.seen_qk: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._saved: dict[str, object] = {}

    def __enter__(self):
        for name, v_w in self.overrides.items():
            self._saved[name] = self.pipeline.attn_processors[name]

            def processor(layer, q, k, v, _orig=self._saved[name], _vw=v_w):
                self.seen_qk[layer] = (q.copy(), k.copy())
                return _orig(layer, q, k, _vw.astype(np.float64))

            self.pipeline.attn_processors[name] = processor
        return self

    def __exit__(self, *exc):
        for name, orig in self._saved.items():
            self.pipeline.attn_processors[name] = orig
        return False
