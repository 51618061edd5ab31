from __future__ import annotations

from enum import Enum


class BuildStage(str, Enum):
    DEPENDENCY_RESOLUTION = "dependency_resolution"
    PREP = "prep"
    BUILD = "build"
    INSTALL = "install"
    CHECK = "check"
    OTHER = "other"

    @property
    def rank(self) -> int:
        """Position in the temporal order of an RPM build."""
        return _STAGE_ORDER.index(self)


_STAGE_ORDER = [
    BuildStage.DEPENDENCY_RESOLUTION,
    BuildStage.PREP,
    BuildStage.BUILD,
    BuildStage.INSTALL,
    BuildStage.CHECK,
    BuildStage.OTHER,
]


class BuildStatus(str, Enum):
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    UNRESOLVABLE = "unresolvable"
    TIMEOUT = "timeout"


class RepairKind(str, Enum):
    ARCHIVE_REPACKAGE = "archive_repackage"
    CONFIG_ADAPTATION = "config_adaptation"
    SOURCE_MODIFICATION = "source_modification"


class ValidationResult(str, Enum):
    PENDING = "pending"
    CONFIRMED_FAILED = "confirmed_failed"
    CONFIRMED_SUCCEEDED = "confirmed_succeeded"


class Outcome(str, Enum):
    SUCCESS = "Success"
    FAILED = "Failed"
    BROKEN_UNSOLVABLE = "BrokenUnsolvable"


ISA_TAGS = ("riscv64", "aarch64", "x86_64", "any")
