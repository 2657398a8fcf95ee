"""Exception hierarchy shared by every layer of the package."""


class FBFormerError(Exception):
    """Base class for all package errors."""


class ConfigError(FBFormerError, ValueError):
    """Invalid model, training or CLI configuration."""


class ShapeError(FBFormerError, ValueError):
    """Tensor shapes that violate an operation's preconditions."""


class DataError(FBFormerError, ValueError):
    """Malformed dataset content (bad label values, missing masks, ...)."""


class UsageError(FBFormerError, RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""
