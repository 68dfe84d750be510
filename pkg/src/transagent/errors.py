"""Exception taxonomy shared across the package."""


class TransAgentError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(TransAgentError):
    """Unknown keys, bad types, or impossible dimensions in a configuration."""


class InvalidInputError(TransAgentError):
    """Structurally invalid runtime input: shape mismatch, empty list, bad label."""


class NumericalError(TransAgentError):
    """Input that is numerically unusable, e.g. a zero-norm row fed to a cosine."""


class AgentLookupError(TransAgentError):
    """Requested agent id is not in the registry."""


class StateError(TransAgentError):
    """Operation invoked in the wrong lifecycle state."""


class ValidationError(TransAgentError):
    """Artifacts that should describe the same run disagree with each other."""


class CacheKeyError(TransAgentError):
    """Requested record is not present in the cache."""


class CacheCorruptionError(TransAgentError):
    """Checksum or framing failure while reading a cache file."""


class CacheValidationError(ValidationError):
    """Cache contents disagree with the registry or dataset they claim to serve."""
