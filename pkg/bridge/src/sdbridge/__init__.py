"""Adapter that instruments a latent-diffusion pipeline and delegates
semantic matching, value blending and guidance to an engine over its wire
protocol."""

from .bridge import (
    BridgeConfig,
    BridgeError,
    EngineBridge,
    StepCapture,
    cfg_combine,
    ddim_invert,
    ddim_step,
    tensor_digest,
)
from .fake import FakeCond, FakePipeline, plain_attention
from .protocol import EngineClient, EngineError, Entry

__version__ = "0.1.0"
