"""Prompt learning for a frozen dual encoder, taught by a roster of
heterogeneous agents through gated feature, text and score distillation.
Teachers are unloaded after training; deployment needs only the prompts."""

__version__ = "0.1.0"

from .errors import (AgentLookupError, CacheCorruptionError, CacheKeyError,
                     CacheValidationError, ConfigurationError, InvalidInputError,
                     NumericalError, StateError, TransAgentError, ValidationError)

__all__ = [
    "__version__",
    "TransAgentError", "ConfigurationError", "InvalidInputError", "NumericalError",
    "AgentLookupError", "StateError", "ValidationError", "CacheKeyError",
    "CacheCorruptionError", "CacheValidationError",
]
