"""Causal attention-head scoring and detoxification on a desk-scale transformer."""
from .errors import HeadSteerError, PipelineError, ValidationError
from .toylm import HeadId, HookAction, ModelConfig, ToyLM

__all__ = ["HeadSteerError", "PipelineError", "ValidationError", "HeadId", "HookAction",
           "ModelConfig", "ToyLM"]
__version__ = "0.1.0"
