"""Evidence-preserving repair loop for system-level package build failures."""

from evident.enums import (
    BuildStage,
    BuildStatus,
    Outcome,
    RepairKind,
    ValidationResult,
)

__version__ = "0.1.0"

__all__ = [
    "BuildStage",
    "BuildStatus",
    "Outcome",
    "RepairKind",
    "ValidationResult",
    "__version__",
]
