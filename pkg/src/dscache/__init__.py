"""Streaming KV-cache construction with a decoupled instant cache, on a toy RoPE transformer."""

from .errors import ConfigurationError, ContractViolation, PositionOverflowError
from .kvstore import KVCache, PositionAssignment
from .model import Model, ModelSpec, TokenBlock, build_model
from .policies import PolicyConfig, StreamEvent, make_policy

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "KVCache",
    "Model",
    "ModelSpec",
    "PolicyConfig",
    "PositionAssignment",
    "PositionOverflowError",
    "StreamEvent",
    "TokenBlock",
    "build_model",
    "make_policy",
]
