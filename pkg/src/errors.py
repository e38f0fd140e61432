from typing import Any, Dict, Optional


class FedGCError(Exception):
    """Base exception for every simulator, engine and runner error."""
    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}


class ValidationError(FedGCError):
    """Raised when input or configuration validation fails."""
    pass


class DimensionError(FedGCError):
    """Raised on shape mismatches and non-square inputs."""
    pass


class ProtocolError(FedGCError):
    """Raised when a federated round sees a missing or malformed message."""
    pass


class NumericalError(FedGCError):
    """Raised when a result is non-finite or a PSD clamp moves the trace."""
    pass


class StabilityError(FedGCError):
    """Raised when a gain fails its contraction certificate."""
    pass


class ConvergenceError(FedGCError):
    """Raised when an iteration cap is hit before the tolerance is met."""
    pass


class StateError(FedGCError):
    """Raised on illegal pipeline transitions."""
    pass


class ReportError(FedGCError):
    """Raised when an artifact directory is incomplete."""
    pass


# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (NumericalError, StabilityError, ConvergenceError)
