"""Exception types shared across the toolkit."""


class DualRailError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DualRailError):
    """Invalid or inconsistent device/experiment configuration."""


class DomainError(DualRailError, ValueError):
    """Argument outside the physical domain of a closed-form expression."""


class SingularityError(DomainError):
    """Degenerate parameters that make an expression singular."""


class ContractError(DualRailError):
    """Input state violates a simulator precondition (norm, trace, positivity)."""


class UnconfiguredError(DualRailError):
    """Operation requires a calibration step that has not been run."""


class CalibrationError(DualRailError):
    """A calibration routine produced an unusable result."""


class SelectionError(DualRailError):
    """No valid operating point could be selected; carries diagnostics."""


class FitError(DualRailError):
    """Curve fit could not be performed or did not converge."""


class EmptyResultError(DualRailError):
    """Post-selection or filtering removed every shot."""
