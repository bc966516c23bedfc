"""Exception types shared across the toolkit."""


class CartosegError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CartosegError, ValueError):
    """Array shapes or sizes violate an operation's contract."""


class ConfigError(CartosegError, ValueError):
    """Invalid configuration values."""


class TensorNotFoundError(CartosegError, KeyError):
    """A named tensor is missing from a weight set or container."""


class ContainerFormatError(CartosegError, ValueError):
    """A tensor container file is corrupt or inconsistent."""


class DegenerateInputError(CartosegError, ValueError):
    """Input has no usable structure (e.g. zero variance for PCA)."""


class TrainingError(CartosegError, RuntimeError):
    """Training diverged or produced non-finite values."""
