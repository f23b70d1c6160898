"""Semantic appearance matching engine for dual-branch diffusion sampling.

A denoiser-agnostic library plus CLI: per-step dense correspondence between
a reference and a target denoising branch, warped value injection into the
target's self-attention, cycle-consistency filtering, and matching-guidance
gradients, all runnable at desk scale against a built-in synthetic denoiser
or driven by an external pipeline over a binary wire protocol.
"""

from .grids import (
    FlowField,
    GridError,
    MaskGrid,
    TensorGrid,
    hadamard_blend,
    minmax_normalize,
    resize_bilinear,
)
from .attention import (
    AttentionInputs,
    attention_weights,
    matched_value_attention,
    matched_values,
    self_attention,
)
from .matching import (
    CostVolume,
    DescriptorPair,
    argmax_flow,
    assemble_descriptors,
    cost_volume,
    pca_fit_project,
    warp,
)
from .consistency import (
    ConsistencyParams,
    cycle_confidence,
    foreground_mask,
    semantic_consistent_mask,
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
from .sampler import (
    SessionConfig,
    SessionResult,
    classifier_free_guidance,
    ddim_invert,
    ddim_step,
    run_dual_branch,
)
from .backend import (
    Backend,
    DenoiseResponse,
    ExtractionSpec,
    SubjectCond,
    SyntheticBackend,
    SyntheticBackendSpec,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
