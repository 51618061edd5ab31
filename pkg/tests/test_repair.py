import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from archives import FORMATS, apply_unified, make_archive, oracle_manifest
from evident.enums import RepairKind
from evident.errors import (
    BrokenArchiveError,
    EncodingMismatchError,
    MissingMemberError,
    NotFoundError,
    PathEscapeError,
    UnsupportedFormatError,
)
from evident.repair import (
    DIFF_MAX_LINES,
    RepairAction,
    apply_config_adaptation,
    apply_source_modification,
    detect_format,
    diff_summary,
    edit_member,
    read_file,
    repack,
    unpack,
    verify_archive,
)
from evident.workspace import SCRATCH_DIR

TREE = {"pkg-1.0/a.c": b"int a;\n", "pkg-1.0/include/crypto.hh": b"#pragma once\nstruct K;\n", "pkg-1.0/README": b"r\n"}


@pytest.fixture(params=sorted(FORMATS))
def archive(request, tmp_path):
    return make_archive(tmp_path, request.param, TREE)


def manifest_of(handle):
    return {p: h for p, h, _ in handle.member_manifest}


def test_unpack_lists_members(archive):
    handle = unpack(archive)
    assert manifest_of(handle) == oracle_manifest(archive)
    assert not handle.dirty
    assert handle.scratch_dir.is_relative_to(archive.parent / SCRATCH_DIR)


def test_identity_round_trip(archive):
    before = oracle_manifest(archive)
    repack(unpack(archive))
    assert oracle_manifest(archive) == before


def test_one_edit_changes_one_hash(archive):
    before = oracle_manifest(archive)
    handle = unpack(archive)
    edit_member(handle, "pkg-1.0/a.c", "int a = 1;\n")
    assert handle.dirty
    repack(handle)
    after = oracle_manifest(archive)
    assert set(after) == set(before)
    assert [k for k in before if before[k] != after[k]] == ["pkg-1.0/a.c"]


def test_format_preserved(archive):
    fmt = detect_format(archive)
    handle = unpack(archive)
    edit_member(handle, "pkg-1.0/a.c", "x\n")
    repack(handle)
    assert detect_format(archive) == fmt


def test_create_member_grows_manifest(archive):
    handle = unpack(archive)
    edit_member(handle, "pkg-1.0/new.h", "n\n", create=True)
    assert len(handle.member_manifest) == len(TREE) + 1
    repack(handle)
    assert "pkg-1.0/new.h" in oracle_manifest(archive)


def test_edit_absent_member_without_flag(archive):
    with pytest.raises(MissingMemberError):
        edit_member(unpack(archive), "pkg-1.0/nope.c", "x")


def test_delete_member_shrinks_manifest(archive):
    handle = unpack(archive)
    apply_source_modification(handle, RepairAction(RepairKind.SOURCE_MODIFICATION, "pkg-1.0/README", delete=True), 0)
    assert len(handle.member_manifest) == len(TREE) - 1
    repack(handle)
    assert "pkg-1.0/README" not in oracle_manifest(archive)


def test_truncated_gzip_is_broken(tmp_path):
    path = make_archive(tmp_path, "tar_gz", TREE)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(BrokenArchiveError):
        unpack(path)
    with pytest.raises(BrokenArchiveError):
        verify_archive(path)
    assert not (tmp_path / SCRATCH_DIR / path.name).exists()


def test_corrupt_zip_is_broken(tmp_path):
    path = make_archive(tmp_path, "zip", TREE)
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(BrokenArchiveError):
        unpack(path)


def test_7z_is_unsupported(tmp_path):
    path = tmp_path / "x.7z"
    path.write_bytes(b"7z\xbc\xaf\x27\x1c" + b"\0" * 20)
    with pytest.raises(UnsupportedFormatError):
        unpack(path)


def test_escaping_member_is_broken(tmp_path):
    path = make_archive(tmp_path, "tar_gz", {"../evil": b"x"})
    with pytest.raises(BrokenArchiveError):
        unpack(path)


def test_overwrite_header_in_archive(tmp_path):
    path = make_archive(tmp_path, "tar_gz", TREE)
    handle = unpack(path, tmp_path)
    new = "#pragma once\nstruct K { int v; };\n"
    action = RepairAction(RepairKind.SOURCE_MODIFICATION, "pkg-1.0/include/crypto.hh", new)
    entry = apply_source_modification(handle, action, iteration=1, sequence=0)
    assert handle.dirty
    assert entry.target_path == f"{path.name}::pkg-1.0/include/crypto.hh"
    assert apply_unified(TREE["pkg-1.0/include/crypto.hh"].decode(), entry.diff_summary) == new
    assert read_file(handle, "pkg-1.0/include/crypto.hh") == new


def test_read_member_matches_manifest_hash(archive):
    import hashlib

    handle = unpack(archive)
    data = read_file(handle, "pkg-1.0/a.c").encode()
    assert hashlib.sha256(data).hexdigest() == oracle_manifest(archive)["pkg-1.0/a.c"]


SPEC = "Name: foo\nVersion: 1.0\nBuildRequires: gcc\n\n%build\nmake\n"


def test_config_adaptation_diff(tmp_path):
    (tmp_path / "foo.spec").write_text(SPEC)
    new = SPEC.replace("BuildRequires: gcc", "BuildRequires: gcc zlib-devel")
    entry = apply_config_adaptation(tmp_path, RepairAction(RepairKind.CONFIG_ADAPTATION, "foo.spec", new), 0)
    assert entry.action_kind is RepairKind.CONFIG_ADAPTATION
    assert "-BuildRequires: gcc\n" in entry.diff_summary
    assert "+BuildRequires: gcc zlib-devel\n" in entry.diff_summary
    assert apply_unified(SPEC, entry.diff_summary) == new
    assert (tmp_path / "foo.spec").read_text() == new
    assert (tmp_path / ".evident-history" / "iter0-seq0.diff").read_text() == entry.diff_summary


def test_identical_content_records_no_change(tmp_path, caplog):
    (tmp_path / "foo.spec").write_text(SPEC)
    entry = apply_config_adaptation(tmp_path, RepairAction(RepairKind.CONFIG_ADAPTATION, "foo.spec", SPEC), 0)
    assert entry.diff_summary == ""
    assert "[no change]" in entry.note
    assert "identical" in caplog.text


def test_path_escape(tmp_path):
    with pytest.raises(PathEscapeError):
        apply_config_adaptation(tmp_path, RepairAction(RepairKind.CONFIG_ADAPTATION, "../../etc/passwd", "x"), 0)


def test_scratch_area_is_not_directly_editable(tmp_path):
    path = make_archive(tmp_path, "tar_gz", TREE)
    unpack(path, tmp_path)
    action = RepairAction(RepairKind.SOURCE_MODIFICATION, f"{SCRATCH_DIR}/{path.name}/pkg-1.0/a.c", "x")
    with pytest.raises(PathEscapeError):
        apply_source_modification(tmp_path, action, 0)


def test_config_refuses_sources(tmp_path):
    with pytest.raises(ValueError):
        apply_config_adaptation(tmp_path, RepairAction(RepairKind.CONFIG_ADAPTATION, "a.c", "x"), 0)


def test_binary_file_rejects_text(tmp_path):
    (tmp_path / "logo.bin").write_bytes(b"\xff\xfe\x00")
    with pytest.raises(EncodingMismatchError):
        apply_source_modification(tmp_path, RepairAction(RepairKind.SOURCE_MODIFICATION, "logo.bin", "text"), 0)


def test_read_your_write_and_missing(tmp_path):
    apply_source_modification(tmp_path, RepairAction(RepairKind.SOURCE_MODIFICATION, "src/x.c", "X\n"), 0)
    assert read_file(tmp_path, "src/x.c") == "X\n"
    with pytest.raises(NotFoundError):
        read_file(tmp_path, "absent.c")


def test_diff_is_capped():
    before = "".join(f"{n}\n" for n in range(500)).encode()
    after = "".join(f"{n}x\n" for n in range(500)).encode()
    text = diff_summary(before, after, "f")
    assert len(text.splitlines()) == DIFF_MAX_LINES + 1
    assert text.endswith("[truncated]\n")


LINES = st.lists(st.sampled_from(["a", "b", "c", "", "int x;", "}"]), max_size=12)


@settings(max_examples=200, deadline=None)
@given(LINES, LINES, st.booleans(), st.booleans())
def test_diff_replays_with_reference_patcher(old, new, old_nl, new_nl):
    before = "\n".join(old) + ("\n" if old_nl and old else "")
    after = "\n".join(new) + ("\n" if new_nl and new else "")
    assert apply_unified(before, diff_summary(before.encode(), after.encode(), "f")) == after


NAMES = st.text("abcdef", min_size=1, max_size=4)
TREES = st.dictionaries(st.lists(NAMES, min_size=1, max_size=3).map("/".join), st.binary(max_size=64),
                        min_size=1, max_size=5)


def _prefix_free(tree):
    names = sorted(tree)
    return not any(b.startswith(a + "/") for a in names for b in names if a != b)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(TREES.filter(_prefix_free), st.sampled_from(sorted(FORMATS)), st.data())
def test_round_trip_property(tmp_path_factory, tree, fmt, data):
    tmp = tmp_path_factory.mktemp("rt")
    path = make_archive(tmp, fmt, tree)
    before = oracle_manifest(path)
    handle = unpack(path)
    repack(handle)
    assert oracle_manifest(path) == before
    victim = data.draw(st.sampled_from(sorted(tree)))
    handle = unpack(path)
    edit_member(handle, victim, tree[victim] + b"!")
    repack(handle)
    after = oracle_manifest(path)
    assert [k for k in before if before[k] != after[k]] == [victim]
