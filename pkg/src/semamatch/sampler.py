"""Dual-branch deterministic sampling with per-step matching and guidance.

The reference branch re-denoises from the DDIM-inverted endpoint of its
clean latent; the target branch denoises seeded Gaussian noise.  Each
iteration harvests
decoder features and cross-attention maps from the conditional denoiser
calls, builds one descriptor pair / flow set / mask set per step (features
come from the *previous* evaluation, i.e. step t+1), recomputes the target
self-attention with warped reference values on gated layers, applies the
matching-guidance update to the target noise predictions, combines
classifier-free guidance and advances both branches.

With gates off the loop never touches the noise path, so a gate-off session
is byte-identical to plain dual-branch DDIM sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .attention import AttentionInputs, matched_value_attention, self_attention
from .backend import Backend, BackendError, DenoiseResponse, ExtractionSpec
from .consistency import (
    ConsistencyParams,
    cycle_confidence,
    foreground_mask,
    semantic_consistent_mask,
)
from .grids import (
    FlowField,
    GridError,
    MaskGrid,
    TensorGrid,
    resize_flow_bilinear,
    resize_mask_bilinear,
)
from .guidance import (
    GuidanceParams,
    NoiseSchedule,
    align_reference_z0,
    apply_guidance,
    guidance_energy,
    guidance_gradient,
    predict_z0,
)
from .matching import DescriptorPair, argmax_flow, assemble_descriptors, cost_volume


class SessionError(RuntimeError):
    """Raised when a session cannot start or a step fails; carries context."""


@dataclass(frozen=True)
class SessionConfig:
    """Session hyperparameters.

    Step gates are half-open iteration-index ranges where iteration 0 is the
    noisiest step; matched attention and guidance share the same gate.
    """

    total_steps: int = 50
    ama_step_range: tuple[int, int] = (4, 50)
    ama_layers: tuple[int, ...] = (1, 2, 3)
    descriptor_layers: tuple[int, ...] = (2, 3)
    lambda_c: float = 0.4
    lambda_g: float = 75.0
    cfg_scale: float = 7.5
    pca_dim: int = 256
    seed: int = 0
    mask_threshold: float = 0.5
    alpha_final: float = 0.05
    invert_refine_steps: int = 3
    collect_diagnostics: bool = False
    collect_attention: bool = False

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise SessionError(f"total_steps must be >= 1, got {self.total_steps}")
        lo, hi = self.ama_step_range
        if not (0 <= lo <= hi <= self.total_steps):
            raise SessionError(
                f"ama_step_range {self.ama_step_range} outside [0, {self.total_steps}]"
            )
        if self.cfg_scale < 1.0:
            raise SessionError(f"cfg_scale must be >= 1, got {self.cfg_scale}")
        if self.pca_dim < 1:
            raise SessionError(f"pca_dim must be >= 1, got {self.pca_dim}")
        if self.lambda_c < 0.0 or self.lambda_g < 0.0:
            raise SessionError("lambda_c and lambda_g must be >= 0")
        if not self.descriptor_layers:
            raise SessionError("descriptor_layers must not be empty")

    def gated(self, iteration: int) -> bool:
        lo, hi = self.ama_step_range
        return lo <= iteration < hi

    def gate_off(self) -> "SessionConfig":
        return replace(self, ama_step_range=(0, 0), lambda_g=0.0)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.total_steps, self.alpha_final)

    def consistency_params(self) -> ConsistencyParams:
        return ConsistencyParams(lambda_c=self.lambda_c, mask_threshold=self.mask_threshold)


# -- single-step primitives ----------------------------------------------------


def ddim_step(z_t: TensorGrid, eps_hat: TensorGrid, t: int, sched: NoiseSchedule) -> TensorGrid:
    """Deterministic (eta = 0) update from z_t to z_{t-1}."""
    if t < 1:
        raise SessionError(f"ddim_step needs t >= 1, got {t}")
    z0_hat = predict_z0(z_t, eps_hat, t, sched)
    a_prev = sched.alpha_bar(t - 1)
    return TensorGrid(np.sqrt(a_prev) * z0_hat.data + np.sqrt(1.0 - a_prev) * eps_hat.data)


def classifier_free_guidance(
    eps_uncond: TensorGrid, eps_cond: TensorGrid, scale: float
) -> TensorGrid:
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise GridError(
            f"CFG branches disagree: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    if scale < 1.0:
        raise SessionError(f"cfg scale must be >= 1, got {scale}")
    if scale == 1.0:
        return eps_cond
    return TensorGrid(eps_uncond.data + scale * (eps_cond.data - eps_uncond.data))


EpsFn = Callable[[TensorGrid, int], TensorGrid]


def _combined_eps(backend: Backend, cond: int, cfg_scale: float) -> EpsFn:
    null = backend.null_cond()

    def eps_fn(z: TensorGrid, t: int) -> TensorGrid:
        eps_c = backend.denoise(z, t, cond, ExtractionSpec.none()).eps
        if cfg_scale == 1.0:
            return eps_c
        eps_u = backend.denoise(z, t, null, ExtractionSpec.none()).eps
        return classifier_free_guidance(eps_u, eps_c, cfg_scale)

    return eps_fn


def ddim_invert(
    backend: Backend,
    z0: TensorGrid,
    cond: int,
    sched: NoiseSchedule,
    total_steps: int | None = None,
    cfg_scale: float = 1.0,
    refine_steps: int = 3,
) -> list[TensorGrid]:
    """Deterministic inversion z_0 -> z_T; returns the trajectory [z_0..z_T].

    Each inversion step solves the sampler update for z_t given z_{t-1}.
    The noise prediction is first taken at the known z_{t-1} and then
    optionally refined by fixed-point iteration at the current z_t estimate,
    which makes invert-then-sample round trips exact up to float error for
    contractive denoisers.
    """
    steps = sched.total_steps if total_steps is None else total_steps
    if steps != sched.total_steps:
        raise SessionError(
            f"inversion steps {steps} disagree with schedule length {sched.total_steps}"
        )
    eps_fn = _combined_eps(backend, cond, cfg_scale)
    trajectory = [z0]
    z_prev = z0
    for t in range(1, steps + 1):
        a_t, a_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
        ratio = np.sqrt(a_prev / a_t)
        coeff = np.sqrt(1.0 - a_prev) - ratio * np.sqrt(1.0 - a_t)
        try:
            eps = eps_fn(z_prev, t)
            z_t = TensorGrid((z_prev.data - coeff * eps.data) / ratio)
            for _ in range(refine_steps):
                eps = eps_fn(z_t, t)
                z_t = TensorGrid((z_prev.data - coeff * eps.data) / ratio)
        except BackendError as exc:
            raise SessionError(f"backend failed during inversion at step {t}: {exc}") from exc
        trajectory.append(z_t)
        z_prev = z_t
    return trajectory


# -- per-step matching state -----------------------------------------------


@dataclass(frozen=True)
class MatchState:
    """Flows and masks for one step, at descriptor resolution."""

    pair: DescriptorPair
    flow_xy: FlowField
    flow_yx: FlowField
    mask_m: MaskGrid
    mask_u: MaskGrid
    mask_mprime: MaskGrid

    def flow_at(self, height: int, width: int) -> FlowField:
        return resize_flow_bilinear(self.flow_xy, height, width)

    def mprime_at(self, height: int, width: int) -> MaskGrid:
        resized = resize_mask_bilinear(self.mask_mprime, height, width)
        return MaskGrid((resized.values >= 0.5).astype(np.float64))


def build_match_state(
    feats_ref: Sequence[TensorGrid],
    feats_tgt: Sequence[TensorGrid],
    cross_attn_maps: Sequence[TensorGrid],
    descriptor_res: tuple[int, int],
    pca_dim: int,
    params: ConsistencyParams,
) -> MatchState:
    """Assemble descriptors, flows and masks for one step."""
    pair = assemble_descriptors(feats_ref, feats_tgt, descriptor_res, pca_dim)
    volume = cost_volume(pair)
    flow_xy = argmax_flow(volume, "x_to_y")
    flow_yx = argmax_flow(volume, "y_to_x")
    mask_m = foreground_mask(cross_attn_maps, params, descriptor_res)
    mask_u = cycle_confidence(flow_xy, flow_yx, mask_m, params)
    return MatchState(
        pair=pair,
        flow_xy=flow_xy,
        flow_yx=flow_yx,
        mask_m=mask_m,
        mask_u=mask_u,
        mask_mprime=semantic_consistent_mask(mask_m, mask_u),
    )


# -- session result --------------------------------------------------------


@dataclass
class StepRecord:
    """Per-step diagnostics; heavy fields populate only in collect modes."""

    step: int
    iteration: int
    gated: bool
    energy_uncond: float | None = None
    energy_cond: float | None = None
    mprime_size: float | None = None
    grad_norm_uncond: float | None = None
    grad_norm_cond: float | None = None
    match: MatchState | None = None
    latent_tgt: TensorGrid | None = None
    latent_ref: TensorGrid | None = None
    attention_outputs: dict[tuple[int, str], TensorGrid] = field(default_factory=dict)
    baseline_outputs: dict[tuple[int, str], TensorGrid] = field(default_factory=dict)
    matched_weights: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    harvested_qkv: dict[tuple[int, str], tuple[TensorGrid, TensorGrid, TensorGrid]] = field(
        default_factory=dict
    )
    ref_values: dict[tuple[int, str], TensorGrid] = field(default_factory=dict)


@dataclass
class SessionResult:
    final_latent_tgt: TensorGrid
    final_latent_ref: TensorGrid
    ref_recon_max_err: float
    steps: list[StepRecord]
    config: SessionConfig

    def energy_rows(self) -> list[dict]:
        rows = []
        for rec in self.steps:
            if rec.energy_cond is None:
                continue
            rows.append(
                {
                    "step": rec.step,
                    "g": rec.energy_cond,
                    "mprime": rec.mprime_size,
                    "grad_norm": rec.grad_norm_cond,
                }
            )
        return rows


# -- orchestration -----------------------------------------------------------


def _branch_needs(
    config: SessionConfig, harvest_matching: bool, harvest_attention: bool
) -> ExtractionSpec:
    return ExtractionSpec(
        feature_layers=tuple(config.descriptor_layers) if harvest_matching else (),
        attn_layers=tuple(config.ama_layers) if harvest_attention else (),
        cross_attn=harvest_matching,
    )


def _descriptor_res(z: TensorGrid) -> tuple[int, int]:
    return (z.height, z.width)


def run_dual_branch(
    backend: Backend,
    config: SessionConfig,
    ref_latent_z0: TensorGrid,
    ref_cond: int,
    tgt_cond: int,
) -> SessionResult:
    """Execute one full dual-branch session.  See the module docstring for
    the per-step sequence; raises SessionError with step context on any
    module failure."""
    sched = config.schedule()
    null = backend.null_cond()
    cons = config.consistency_params()
    t_total = config.total_steps
    descriptor_res = _descriptor_res(ref_latent_z0)

    trajectory = ddim_invert(
        backend,
        ref_latent_z0,
        ref_cond,
        sched,
        cfg_scale=config.cfg_scale,
        refine_steps=config.invert_refine_steps,
    )
    z_ref = trajectory[-1]
    rng = np.random.default_rng(config.seed)
    z_tgt = TensorGrid(rng.standard_normal(ref_latent_z0.shape))

    guidance = GuidanceParams.for_range(
        config.lambda_g, config.ama_step_range[0], config.ama_step_range[1]
    )

    records: list[StepRecord] = []
    prev_harvest: dict[str, DenoiseResponse] | None = None
    first_gated_seen = False

    for t in range(t_total, 0, -1):
        iteration = t_total - t
        gate_now = config.gated(iteration) and prev_harvest is not None
        gate_next = config.gated(iteration + 1) and iteration + 1 < t_total
        # Features and cross-attention are harvested from the conditional
        # calls only; the next iteration's matching reads them at step t+1.
        needs_cond = _branch_needs(config, harvest_matching=gate_next, harvest_attention=gate_now)
        needs_uncond = _branch_needs(config, harvest_matching=False, harvest_attention=gate_now)

        try:
            responses = {
                "ref_uncond": backend.denoise(z_ref, t, null, needs_uncond),
                "ref_cond": backend.denoise(z_ref, t, ref_cond, needs_cond),
                "tgt_uncond": backend.denoise(z_tgt, t, null, needs_uncond),
                "tgt_cond": backend.denoise(z_tgt, t, tgt_cond, needs_cond),
            }
        except BackendError as exc:
            raise SessionError(f"backend failed at step {t}: {exc}") from exc

        record = StepRecord(step=t, iteration=iteration, gated=gate_now)

        match_state: MatchState | None = None
        if gate_now:
            assert prev_harvest is not None
            try:
                match_state = build_match_state(
                    feats_ref=[
                        prev_harvest["ref_cond"].decoder_features[l]
                        for l in config.descriptor_layers
                    ],
                    feats_tgt=[
                        prev_harvest["tgt_cond"].decoder_features[l]
                        for l in config.descriptor_layers
                    ],
                    cross_attn_maps=list(prev_harvest["tgt_cond"].cross_attn_maps),
                    descriptor_res=descriptor_res,
                    pca_dim=config.pca_dim,
                    params=cons,
                )
            except Exception as exc:
                raise SessionError(f"matching failed at step {t}: {exc}") from exc

        # Matched-value attention on gated layers, both CFG branches.  The
        # synthetic denoiser's noise path is closed-form, so these outputs
        # feed diagnostics and the wire protocol rather than the latents.
        if gate_now and match_state is not None:
            keep_weights = config.collect_attention and not first_gated_seen
            for layer in config.ama_layers:
                for branch in ("uncond", "cond"):
                    tgt_resp = responses[f"tgt_{branch}"]
                    ref_resp = responses[f"ref_{branch}"]
                    if layer not in tgt_resp.attention_tensors:
                        raise SessionError(
                            f"backend response missing attention layer {layer} at step {t}"
                        )
                    q, k, v = tgt_resp.attention_tensors[layer]
                    v_ref = ref_resp.attention_tensors[layer][2]
                    heads = backend.attn_num_heads(layer)
                    inputs = AttentionInputs(
                        q_tgt=q, k_tgt=k, v_tgt=v, v_ref=v_ref, num_heads=heads
                    )
                    flow_l = match_state.flow_at(q.height, q.width)
                    mask_l = match_state.mprime_at(q.height, q.width)
                    try:
                        out, weights = matched_value_attention(
                            inputs, flow_l, mask_l, return_weights=True
                        )
                    except Exception as exc:
                        raise SessionError(
                            f"matched attention failed at step {t} layer {layer}: {exc}"
                        ) from exc
                    if config.collect_attention:
                        key = (layer, branch)
                        record.attention_outputs[key] = out
                        record.baseline_outputs[key] = self_attention(q, k, v, heads)
                        record.harvested_qkv[key] = (q, k, v)
                        record.ref_values[key] = v_ref
                        if keep_weights:
                            record.matched_weights[key] = weights
            first_gated_seen = True

        # Guidance on the target noise predictions, per CFG branch.  Energy
        # and gradient diagnostics are recorded whenever matching ran; the
        # update itself only fires with a positive strength.
        eps_tgt = {b: responses[f"tgt_{b}"].eps for b in ("uncond", "cond")}
        if gate_now and match_state is not None:
            flow_lat = match_state.flow_at(ref_latent_z0.height, ref_latent_z0.width)
            mprime_lat = match_state.mprime_at(ref_latent_z0.height, ref_latent_z0.width)
            z0_aligned = align_reference_z0(ref_latent_z0, flow_lat)
            record.mprime_size = mprime_lat.foreground_area()
            for branch in ("uncond", "cond"):
                z0_hat = predict_z0(z_tgt, eps_tgt[branch], t, sched)
                energy = guidance_energy(z0_aligned, z0_hat, mprime_lat)
                grad = guidance_gradient(z0_aligned, z0_hat, mprime_lat, t, sched)
                if config.lambda_g > 0.0 and iteration in guidance.enabled_steps:
                    eps_tgt[branch] = apply_guidance(eps_tgt[branch], grad, guidance, t, sched)
                norm = float(np.linalg.norm(grad.data))
                if branch == "uncond":
                    record.energy_uncond, record.grad_norm_uncond = energy, norm
                else:
                    record.energy_cond, record.grad_norm_cond = energy, norm

        if config.collect_diagnostics:
            record.match = match_state
            record.latent_tgt = z_tgt
            record.latent_ref = z_ref

        eps_ref_hat = classifier_free_guidance(
            responses["ref_uncond"].eps, responses["ref_cond"].eps, config.cfg_scale
        )
        eps_tgt_hat = classifier_free_guidance(
            eps_tgt["uncond"], eps_tgt["cond"], config.cfg_scale
        )
        z_ref = ddim_step(z_ref, eps_ref_hat, t, sched)
        z_tgt = ddim_step(z_tgt, eps_tgt_hat, t, sched)

        records.append(record)
        prev_harvest = responses if gate_next else None

    recon_err = float(np.max(np.abs(z_ref.data - ref_latent_z0.data)))
    return SessionResult(
        final_latent_tgt=z_tgt,
        final_latent_ref=z_ref,
        ref_recon_max_err=recon_err,
        steps=records,
        config=config,
    )
