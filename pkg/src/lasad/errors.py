"""Exception types shared across the package."""


class LasadError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LasadError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(LasadError):
    """An input lies outside the mathematical domain of the operation."""


class NonFiniteError(LasadError):
    """An operation produced NaN or Inf instead of a finite value."""


class UsageError(LasadError):
    """The autodiff API was used incorrectly (e.g. backward on an untracked tensor)."""


class ContractError(LasadError):
    """A value violates an interface contract (e.g. a decay factor outside (0, 1])."""


class ConfigError(LasadError):
    """A configuration value is invalid or inconsistent."""


class SingularNormalizerError(LasadError):
    """The sum-based attention normalizer has a zero entry and cannot be inverted."""


class InputError(LasadError):
    """Runtime input data is invalid (e.g. a token id out of vocabulary range)."""


class CheckpointError(LasadError):
    """A checkpoint file is missing, corrupt, or inconsistent with its config."""


class DivergenceError(LasadError):
    """Training produced a non-finite loss and was aborted."""
