"""
Error types shared by every layer of the package.

Each error carries a stable ``code`` and a ``details`` dict so that the CLI
and the run journal can report failures in a structured way.
"""
from typing import Any, Dict, Optional


class GdnError(Exception):
    """Base class for all package errors."""

    code = "gdn_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Error info in the shape written to the run journal."""
        return {"code": self.code, "message": self.message, "details": self.details}


class DimensionError(GdnError, ValueError):
    """Operand shapes do not agree."""

    code = "dimension_mismatch"


class ConvergenceError(GdnError):
    """An iterative solver failed to reach its tolerance."""

    code = "not_converged"


class DivergenceError(GdnError, FloatingPointError):
    """A non-finite value appeared during an unroll or a sampler step."""

    code = "diverged"


class StaleTapeError(GdnError):
    """A backward pass was given a tape from another forward call."""

    code = "stale_tape"


class ConfigValidationError(GdnError, ValueError):
    """Experiment configuration failed validation."""

    code = "config_invalid"


class ProvenanceError(GdnError):
    """Artifact hashes do not chain back to the active configuration."""

    code = "provenance_mismatch"


class ArtifactError(GdnError):
    """An artifact file is missing, unreadable or corrupt."""

    code = "artifact_invalid"
