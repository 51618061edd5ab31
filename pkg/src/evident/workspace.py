"""Pruned inventory of a package workspace."""

from __future__ import annotations

import fnmatch
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from evident.errors import InspectionError

log = logging.getLogger(__name__)

INVENTORY_SCHEMA = "inventory.v1"
SCRATCH_DIR = ".evident-scratch"
HISTORY_DIR = ".evident-history"
LOG_DIR = ".evident-logs"
MAX_ENTRIES = 2000

KINDS = ("recipe", "archive", "script", "source", "metadata", "other")

_ARCHIVE_SUFFIXES = (".tgz", ".tbz2", ".txz", ".tbz", ".zip", ".gem", ".crate")
_SCRIPT_SUFFIXES = (".sh", ".service", ".bash", ".timer", ".socket")
_SCRIPT_NAMES = {"Makefile", "GNUmakefile", "CMakeLists.txt", "meson.build", "configure", "_service"}
_SOURCE_SUFFIXES = (
    ".c", ".h", ".cc", ".hh", ".cpp", ".hpp", ".cxx", ".hxx", ".rs", ".go", ".py", ".java",
    ".js", ".ts", ".rb", ".pl", ".pm", ".lua", ".f90", ".s", ".S", ".asm", ".m4", ".am", ".in",
    ".cmake", ".patch", ".diff",
)
_METADATA_PREFIXES = ("README", "LICENSE", "LICENCE", "COPYING", "AUTHORS", "NOTICE")
_METADATA_SUFFIXES = (".changes", ".asc", ".sig", ".keyring", ".rpmlintrc", ".json", ".toml", ".yaml", ".yml")


@dataclass(frozen=True)
class PruneRules:
    """Directory names and file-name globs excluded from the inventory."""

    dir_names: tuple[str, ...] = ("docs", "doc", ".git", "examples", SCRATCH_DIR, HISTORY_DIR, LOG_DIR, "__pycache__")
    file_globs: tuple[str, ...] = ("*.md", "*.rst", "*.png", "*.o", "*.pyc")

    def prunes_dir(self, name: str) -> bool:
        return name in self.dir_names

    def prunes_file(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, g) for g in self.file_globs)

    @classmethod
    def from_file(cls, path: str | Path) -> "PruneRules":
        """Load rules from a text file: ``dir/`` lines name directories, others are globs."""
        dirs, globs = [], []
        for line in Path(path).read_text("utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            (dirs if line.endswith("/") else globs).append(line.rstrip("/"))
        return cls(tuple(dirs), tuple(globs))


DEFAULT_PRUNE_RULES = PruneRules()


def classify_path(path: str | PurePosixPath) -> str:
    name = PurePosixPath(path).name
    lower = name.lower()
    if lower.endswith(".spec"):
        return "recipe"
    if ".tar." in lower or lower.endswith(".tar") or lower.endswith(_ARCHIVE_SUFFIXES):
        return "archive"
    if name in _SCRIPT_NAMES or lower.endswith(_SCRIPT_SUFFIXES):
        return "script"
    if name.endswith(_SOURCE_SUFFIXES):
        return "source"
    if name.upper().startswith(_METADATA_PREFIXES) or lower.endswith(_METADATA_SUFFIXES):
        return "metadata"
    return "other"


@dataclass(frozen=True)
class InventoryEntry:
    path: str
    kind: str
    size: int


@dataclass
class StructureInventory:
    root: str
    entries: list[InventoryEntry] = field(default_factory=list)
    pruned_count: int = 0
    warnings: list[str] = field(default_factory=list)
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "schema": INVENTORY_SCHEMA,
            "root": self.root,
            "entries": [[e.path, e.kind, e.size] for e in self.entries],
            "pruned_count": self.pruned_count,
            "warnings": list(self.warnings),
            "truncated": self.truncated,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "StructureInventory":
        return cls(
            root=d["root"],
            entries=[InventoryEntry(*e) for e in d["entries"]],
            pruned_count=d["pruned_count"],
            warnings=list(d.get("warnings", [])),
            truncated=d.get("truncated", False),
        )

    def by_kind(self, kind: str) -> list[InventoryEntry]:
        return [e for e in self.entries if e.kind == kind]


def inventory(
    workspace_path: str | Path,
    prune_rules: PruneRules | None = None,
    max_entries: int = MAX_ENTRIES,
) -> StructureInventory:
    """Walk the workspace and list retained files with their kind and size.

    A pruned directory counts once in ``pruned_count`` and is not descended.
    Symlinks are listed but never followed. ``root`` is recorded as given so
    that inventories of the same tree compare equal.
    """
    rules = prune_rules or DEFAULT_PRUNE_RULES
    root = Path(workspace_path)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise InspectionError(f"workspace {root} is not a readable directory")

    inv = StructureInventory(root=str(workspace_path))
    entries: list[InventoryEntry] = []

    def walk(directory: Path, rel: PurePosixPath) -> None:
        try:
            children = sorted(os.scandir(directory), key=lambda d: d.name)
        except OSError as exc:
            inv.warnings.append(f"skipped unreadable directory {rel}: {exc.strerror}")
            return
        for child in children:
            child_rel = rel / child.name
            try:
                is_dir = child.is_dir(follow_symlinks=False)
                if is_dir:
                    if rules.prunes_dir(child.name):
                        inv.pruned_count += 1
                    else:
                        walk(Path(child.path), child_rel)
                    continue
                if rules.prunes_file(child.name):
                    inv.pruned_count += 1
                    continue
                size = child.stat(follow_symlinks=False).st_size
            except OSError as exc:
                inv.warnings.append(f"skipped unreadable entry {child_rel}: {exc.strerror}")
                continue
            entries.append(InventoryEntry(str(child_rel), classify_path(child_rel), size))

    walk(root, PurePosixPath())
    entries.sort(key=lambda e: e.path)
    if len(entries) > max_entries:
        inv.truncated = True
        entries = entries[:max_entries]
    inv.entries = entries
    return inv
