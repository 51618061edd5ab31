"""Artifact-level repair actions: archive round-trips and full-file edits."""

from __future__ import annotations

import difflib
import io
import logging
import lzma
import os
import shutil
import tarfile
import tempfile
import zipfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath

from evident._util import atomic_write, sha256_bytes, to_bytes
from evident.enums import RepairKind
from evident.errors import (
    BrokenArchiveError,
    EncodingMismatchError,
    MissingMemberError,
    NotFoundError,
    PathEscapeError,
    RepackError,
    UnsupportedFormatError,
)
from evident.evidence import HistoryEntry
from evident.workspace import HISTORY_DIR, SCRATCH_DIR, classify_path

log = logging.getLogger(__name__)

DIFF_CONTEXT = 3
DIFF_MAX_LINES = 200
TRUNCATED = "[truncated]"
ARCHIVE_SEP = "::"

_TAR_MODES = {"tar_gz": "gz", "tar_xz": "xz", "tar_bz2": "bz2"}
_MAGIC = [
    (b"\x1f\x8b", "tar_gz"),
    (b"\xfd7zXZ\x00", "tar_xz"),
    (b"BZh", "tar_bz2"),
    (b"PK\x03\x04", "zip"),
    (b"PK\x05\x06", "zip"),
]
_UNSUPPORTED_MAGIC = [
    (b"7z\xbc\xaf\x27\x1c", "7z"),
    (b"Rar!", "rar"),
    (b"\x28\xb5\x2f\xfd", "zstd"),
]
_EXTENSIONS = [
    ((".tar.gz", ".tgz"), "tar_gz"),
    ((".tar.xz", ".txz"), "tar_xz"),
    ((".tar.bz2", ".tbz2", ".tbz"), "tar_bz2"),
    ((".zip",), "zip"),
]


def detect_format(path: str | Path) -> str:
    """Infer the archive format from magic bytes, falling back to the extension."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise BrokenArchiveError(f"{path}: {exc.strerror}") from exc
    for magic, fmt in _MAGIC:
        if head.startswith(magic):
            return fmt
    for magic, fmt in _UNSUPPORTED_MAGIC:
        if head.startswith(magic):
            raise UnsupportedFormatError(f"{path.name}: {fmt} archives are not supported")
    lower = path.name.lower()
    for suffixes, fmt in _EXTENSIONS:
        if lower.endswith(suffixes):
            if not head:
                raise BrokenArchiveError(f"{path.name}: empty file")
            return fmt
    raise UnsupportedFormatError(f"{path.name}: unsupported archive format")


@dataclass(frozen=True)
class MemberInfo:
    path: str
    sha256: str
    mode: int
    type: str = "file"  # file | dir | symlink
    linkname: str = ""
    meta: tuple = ()


def _safe_member(name: str) -> str:
    p = PurePosixPath(name)
    if p.is_absolute() or ".." in p.parts:
        raise BrokenArchiveError(f"unsafe member path {name!r}")
    return str(p)


@dataclass
class ArchiveHandle:
    original_path: Path
    format: str
    scratch_dir: Path
    workspace: Path
    members: dict[str, MemberInfo] = field(default_factory=dict)
    original: dict[str, MemberInfo] = field(default_factory=dict)
    tar_format: int = tarfile.PAX_FORMAT

    @property
    def name(self) -> str:
        return self.original_path.name

    @property
    def member_manifest(self) -> list[tuple[str, str, int]]:
        return [(m.path, m.sha256, m.mode) for m in self.members.values()]

    @property
    def dirty(self) -> bool:
        return _manifest_key(self.members) != _manifest_key(self.original)

    def scratch_path(self, member: str) -> Path:
        return self.scratch_dir / _safe_member(member)

    def refresh(self) -> None:
        """Re-hash regular files from the scratch area (catches direct edits)."""
        for path, info in list(self.members.items()):
            if info.type == "file":
                data = self.scratch_path(path).read_bytes()
                self.members[path] = replace(info, sha256=sha256_bytes(data))


def _manifest_key(members: dict[str, MemberInfo]):
    return sorted((m.path, m.sha256, m.mode, m.type, m.linkname) for m in members.values())


def _scratch_for(archive: Path, workspace: Path) -> Path:
    return workspace / SCRATCH_DIR / archive.name


def unpack(archive_path: str | Path, workspace: str | Path | None = None) -> ArchiveHandle:
    """Extract an archive under ``<workspace>/.evident-scratch/<archive-name>/``.

    Symlinks are recorded in the manifest but not materialized. Members with
    absolute or ``..`` paths make the archive broken.
    """
    archive = Path(archive_path)
    if not archive.is_file():
        raise BrokenArchiveError(f"{archive}: archive not found")
    workspace = Path(workspace) if workspace is not None else archive.parent
    fmt = detect_format(archive)
    scratch = _scratch_for(archive, workspace)
    if scratch.exists():
        shutil.rmtree(scratch)
    scratch.mkdir(parents=True)
    handle = ArchiveHandle(archive, fmt, scratch, workspace)
    try:
        if fmt == "zip":
            _unpack_zip(handle)
        else:
            _unpack_tar(handle)
    except (BrokenArchiveError, UnsupportedFormatError):
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    except (tarfile.TarError, zipfile.BadZipFile, EOFError, zlib.error, lzma.LZMAError,
            OSError, ValueError) as exc:
        shutil.rmtree(scratch, ignore_errors=True)
        raise BrokenArchiveError(f"{archive.name}: {exc}") from exc
    handle.original = dict(handle.members)
    return handle


def _write_scratch(handle: ArchiveHandle, member: str, data: bytes, mode: int) -> None:
    target = handle.scratch_path(member)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(data)
    os.chmod(target, (mode & 0o777) | 0o600)


def _unpack_tar(handle: ArchiveHandle) -> None:
    with tarfile.open(handle.original_path, f"r:{_TAR_MODES[handle.format]}") as tf:
        handle.tar_format = tf.format
        for ti in tf:
            name = _safe_member(ti.name)
            meta = (("arcname", ti.name), ("mtime", int(ti.mtime)), ("uid", ti.uid), ("gid", ti.gid),
                    ("uname", ti.uname), ("gname", ti.gname))
            if ti.isdir():
                handle.scratch_path(name).mkdir(parents=True, exist_ok=True)
                handle.members[name] = MemberInfo(name, "", ti.mode, "dir", meta=meta)
            elif ti.issym():
                handle.members[name] = MemberInfo(
                    name, sha256_bytes(b"symlink:" + ti.linkname.encode()), ti.mode,
                    "symlink", ti.linkname, meta,
                )
            elif ti.isfile() or ti.islnk():
                fh = tf.extractfile(ti)
                data = fh.read() if fh is not None else b""
                _write_scratch(handle, name, data, ti.mode)
                handle.members[name] = MemberInfo(name, sha256_bytes(data), ti.mode, meta=meta)
            else:
                log.warning("%s: skipping special member %s", handle.name, name)


def _unpack_zip(handle: ArchiveHandle) -> None:
    with zipfile.ZipFile(handle.original_path) as zf:
        bad = zf.testzip()
        if bad is not None:
            raise BrokenArchiveError(f"{handle.name}: CRC mismatch in {bad}")
        for zi in zf.infolist():
            name = _safe_member(zi.filename.rstrip("/"))
            mode = (zi.external_attr >> 16) & 0o7777
            meta = (("arcname", zi.filename), ("date_time", tuple(zi.date_time)), ("external_attr", zi.external_attr),
                    ("compress_type", zi.compress_type))
            if zi.is_dir():
                handle.scratch_path(name).mkdir(parents=True, exist_ok=True)
                handle.members[name] = MemberInfo(name, "", mode or 0o755, "dir", meta=meta)
            else:
                data = zf.read(zi)
                _write_scratch(handle, name, data, mode or 0o644)
                handle.members[name] = MemberInfo(name, sha256_bytes(data), mode or 0o644, meta=meta)


def _require_scratch(handle: ArchiveHandle) -> None:
    if not handle.scratch_dir.is_dir():
        raise RepackError(f"scratch area {handle.scratch_dir} vanished")


def edit_member(
    handle: ArchiveHandle, member_path: str, new_content: str | bytes, create: bool = False
) -> ArchiveHandle:
    """Replace (or with ``create=True`` add) a member's full content."""
    _require_scratch(handle)
    member = _safe_member(member_path)
    data = to_bytes(new_content)
    info = handle.members.get(member)
    if info is None:
        if not create:
            raise MissingMemberError(f"{handle.name} has no member {member!r}")
        info = MemberInfo(member, "", 0o644)
    elif info.type != "file":
        raise MissingMemberError(f"{member!r} in {handle.name} is a {info.type}, not a file")
    _write_scratch(handle, member, data, info.mode)
    handle.members[member] = replace(info, sha256=sha256_bytes(data))
    return handle


def delete_member(handle: ArchiveHandle, member_path: str) -> ArchiveHandle:
    _require_scratch(handle)
    member = _safe_member(member_path)
    info = handle.members.pop(member, None)
    if info is None:
        raise MissingMemberError(f"{handle.name} has no member {member!r}")
    target = handle.scratch_path(member)
    if info.type == "file" and target.exists():
        target.unlink()
    return handle


def read_member(handle: ArchiveHandle, member_path: str) -> bytes:
    member = _safe_member(member_path)
    info = handle.members.get(member)
    if info is None or info.type != "file":
        raise NotFoundError(f"{handle.name} has no file member {member!r}")
    return handle.scratch_path(member).read_bytes()


def repack(handle: ArchiveHandle) -> Path:
    """Rebuild the archive at its original path in its original format.

    Member order, names, modes and ownership metadata are preserved; new
    members are appended. The handle is clean afterwards.
    """
    _require_scratch(handle)
    target = handle.original_path
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    os.close(fd)
    try:
        if handle.format == "zip":
            _repack_zip(handle, Path(tmp))
        else:
            _repack_tar(handle, Path(tmp))
        os.replace(tmp, target)
    except FileNotFoundError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise RepackError(f"{handle.name}: scratch member missing: {exc.filename}") from exc
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    handle.original = dict(handle.members)
    return target


def _repack_tar(handle: ArchiveHandle, out: Path) -> None:
    with tarfile.open(out, f"w:{_TAR_MODES[handle.format]}", format=handle.tar_format) as tf:
        for info in handle.members.values():
            meta = dict(info.meta)
            ti = tarfile.TarInfo(meta.get("arcname", info.path))
            ti.mode = info.mode
            ti.mtime = meta.get("mtime", 0)
            ti.uid, ti.gid = meta.get("uid", 0), meta.get("gid", 0)
            ti.uname, ti.gname = meta.get("uname", ""), meta.get("gname", "")
            if info.type == "dir":
                ti.type = tarfile.DIRTYPE
                tf.addfile(ti)
            elif info.type == "symlink":
                ti.type = tarfile.SYMTYPE
                ti.linkname = info.linkname
                tf.addfile(ti)
            else:
                data = handle.scratch_path(info.path).read_bytes()
                ti.size = len(data)
                tf.addfile(ti, io.BytesIO(data))


def _repack_zip(handle: ArchiveHandle, out: Path) -> None:
    with zipfile.ZipFile(out, "w") as zf:
        for info in handle.members.values():
            meta = dict(info.meta)
            name = info.path + "/" if info.type == "dir" else info.path
            zi = zipfile.ZipInfo(meta.get("arcname", name), date_time=meta.get("date_time", (1980, 1, 1, 0, 0, 0)))
            attr = meta.get("external_attr", (0o040000 if info.type == "dir" else 0o100000) << 16)
            zi.external_attr = (attr & ~(0o7777 << 16)) | ((info.mode & 0o7777) << 16)
            if info.type == "dir":
                zi.external_attr |= 0x10
                zf.writestr(zi, b"")
            else:
                zi.compress_type = meta.get("compress_type", zipfile.ZIP_DEFLATED)
                zf.writestr(zi, handle.scratch_path(info.path).read_bytes())


def verify_archive(path: str | Path) -> int:
    """Read every member of an archive; returns the member count or raises BrokenArchiveError."""
    path = Path(path)
    fmt = detect_format(path)
    try:
        if fmt == "zip":
            with zipfile.ZipFile(path) as zf:
                bad = zf.testzip()
                if bad is not None:
                    raise BrokenArchiveError(f"{path.name}: CRC mismatch in {bad}")
                return len(zf.infolist())
        count = 0
        with tarfile.open(path, f"r:{_TAR_MODES[fmt]}") as tf:
            for ti in tf:
                count += 1
                if ti.isfile():
                    fh = tf.extractfile(ti)
                    while fh is not None and fh.read(1 << 20):
                        pass
        return count
    except BrokenArchiveError:
        raise
    except (tarfile.TarError, zipfile.BadZipFile, EOFError, zlib.error, lzma.LZMAError,
            OSError, ValueError) as exc:
        raise BrokenArchiveError(f"{path.name}: {exc}") from exc


# --- full-file edits ----------------------------------------------------------


@dataclass(frozen=True)
class RepairAction:
    kind: RepairKind
    target_path: str
    new_content: str | bytes = ""
    rationale: str = ""
    delete: bool = False


def resolve_in_workspace(workspace: str | Path, rel: str) -> Path:
    root = Path(workspace).resolve()
    target = (root / rel).resolve()
    if target != root and root not in target.parents:
        raise PathEscapeError(f"{rel!r} resolves outside the workspace")
    if target == root:
        raise PathEscapeError(f"{rel!r} names the workspace root")
    return target


def _decode(data: bytes) -> str | None:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        return None


def diff_summary(before: bytes, after: bytes, path: str) -> str:
    """Unified diff (3 context lines) capped at 200 lines; binary files get a one-liner."""
    if before == after:
        return ""
    old, new = _decode(before), _decode(after)
    if old is None or new is None:
        return f"Binary file {path} changed: {sha256_bytes(before)[:12]} -> {sha256_bytes(after)[:12]}\n"
    lines = []
    for line in difflib.unified_diff(
        old.splitlines(keepends=True), new.splitlines(keepends=True),
        fromfile=f"a/{path}", tofile=f"b/{path}", n=DIFF_CONTEXT,
    ):
        if line.endswith("\n"):
            lines.append(line)
        else:
            lines.extend([line + "\n", "\\ No newline at end of file\n"])
    if len(lines) > DIFF_MAX_LINES:
        lines = lines[:DIFF_MAX_LINES] + [TRUNCATED + "\n"]
    return "".join(lines)


def _check_encoding(before: bytes | None, content: str | bytes, label: str) -> None:
    if before is not None and isinstance(content, str) and _decode(before) is None:
        raise EncodingMismatchError(f"{label} is binary; text content cannot replace it")


def _record(
    workspace: Path, kind: RepairKind, label: str, before: bytes, after: bytes,
    iteration: int, sequence: int, rationale: str,
) -> HistoryEntry:
    diff = diff_summary(before, after, label)
    note = rationale
    if before == after:
        log.warning("%s: new content identical to current content", label)
        note = (rationale + " " if rationale else "") + "[no change]"
    history_dir = Path(workspace) / HISTORY_DIR
    history_dir.mkdir(parents=True, exist_ok=True)
    (history_dir / f"iter{iteration}-seq{sequence}.diff").write_text(diff, "utf-8")
    return HistoryEntry(
        iteration=iteration,
        sequence=sequence,
        action_kind=kind,
        target_path=label,
        diff_summary=diff,
        content_hash=sha256_bytes(after),
        note=note,
    )


def _apply_to_workspace(workspace: Path, action: RepairAction, iteration: int, sequence: int) -> HistoryEntry:
    target = resolve_in_workspace(workspace, action.target_path)
    root = Path(workspace).resolve()
    if (root / SCRATCH_DIR) in target.parents:
        raise PathEscapeError("edit unpacked members through their archive handle")
    before = target.read_bytes() if target.is_file() else None
    if action.delete:
        if before is None:
            raise NotFoundError(f"{action.target_path} does not exist")
        target.unlink()
        after = b""
    else:
        _check_encoding(before, action.new_content, action.target_path)
        after = to_bytes(action.new_content)
        target.parent.mkdir(parents=True, exist_ok=True)
        atomic_write(target, after)
    return _record(Path(workspace), action.kind, action.target_path, before or b"", after,
                   iteration, sequence, action.rationale)


def apply_config_adaptation(
    workspace: str | Path, action: RepairAction, iteration: int, sequence: int = 0
) -> HistoryEntry:
    """Replace a recipe or packaging script wholesale (write-temp-then-rename)."""
    if action.kind is not RepairKind.CONFIG_ADAPTATION:
        raise ValueError(f"expected a config_adaptation action, got {action.kind.value}")
    kind = classify_path(action.target_path)
    if kind in ("archive", "source"):
        raise ValueError(f"{action.target_path} is a {kind} file, not a recipe or packaging script")
    return _apply_to_workspace(Path(workspace), action, iteration, sequence)


def apply_source_modification(
    target: str | Path | ArchiveHandle, action: RepairAction, iteration: int, sequence: int = 0
) -> HistoryEntry:
    """Overwrite (or tombstone-delete) a source file in the workspace or inside an archive."""
    if action.kind is not RepairKind.SOURCE_MODIFICATION:
        raise ValueError(f"expected a source_modification action, got {action.kind.value}")
    if not isinstance(target, ArchiveHandle):
        return _apply_to_workspace(Path(target), action, iteration, sequence)

    handle = target
    member = _safe_member(action.target_path)
    label = f"{handle.name}{ARCHIVE_SEP}{member}"
    info = handle.members.get(member)
    before = read_member(handle, member) if info is not None and info.type == "file" else None
    if action.delete:
        delete_member(handle, member)
        after = b""
    else:
        _check_encoding(before, action.new_content, label)
        after = to_bytes(action.new_content)
        edit_member(handle, member, after, create=True)
    return _record(handle.workspace, action.kind, label, before or b"", after,
                   iteration, sequence, action.rationale)


def read_file(target: str | Path | ArchiveHandle, path: str) -> str | bytes:
    """Full content of ``path``: text when it decodes as UTF-8, bytes otherwise."""
    if isinstance(target, ArchiveHandle):
        data = read_member(target, path)
    else:
        resolved = resolve_in_workspace(target, path)
        if not resolved.is_file():
            raise NotFoundError(f"{path} does not exist")
        data = resolved.read_bytes()
    text = _decode(data)
    return data if text is None else text
