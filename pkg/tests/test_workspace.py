import json
import os

import pytest

from evident.errors import InspectionError
from evident.workspace import (
    SCRATCH_DIR,
    PruneRules,
    StructureInventory,
    classify_path,
    inventory,
)


def touch(root, rel, data="x"):
    p = root / rel
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(data)
    return p


def test_documented_prune_example(tmp_path):
    for rel in ["foo.spec", "foo-1.0.tar.gz", "README.md", "docs/guide.md"]:
        touch(tmp_path, rel)
    inv = inventory(tmp_path)
    assert [(e.path, e.kind) for e in inv.entries] == [("foo-1.0.tar.gz", "archive"), ("foo.spec", "recipe")]
    assert inv.pruned_count == 2


def test_empty_directory(tmp_path):
    inv = inventory(tmp_path)
    assert inv.entries == [] and inv.pruned_count == 0


def test_scratch_area_excluded(tmp_path):
    touch(tmp_path, "foo.spec")
    touch(tmp_path, f"{SCRATCH_DIR}/foo-1.0.tar.gz/src/main.c")
    assert [e.path for e in inventory(tmp_path).entries] == ["foo.spec"]


def test_missing_workspace(tmp_path):
    with pytest.raises(InspectionError):
        inventory(tmp_path / "nope")


def test_symlinks_are_not_followed(tmp_path):
    touch(tmp_path, "real/a.c")
    os.symlink(tmp_path / "real", tmp_path / "loop")
    paths = [e.path for e in inventory(tmp_path).entries]
    assert "real/a.c" in paths
    assert "loop" in paths and "loop/a.c" not in paths


def test_truncation(tmp_path):
    for n in range(5):
        touch(tmp_path, f"f{n}.c")
    inv = inventory(tmp_path, max_entries=3)
    assert inv.truncated and len(inv.entries) == 3


@pytest.mark.parametrize("path,kind", [
    ("foo.spec", "recipe"), ("foo-1.0.tar.xz", "archive"), ("x.zip", "archive"), ("fix.patch", "source"),
    ("CMakeLists.txt", "script"), ("foo.service", "script"), ("LICENSE", "metadata"), ("foo.changes", "metadata"),
    ("src/main.c", "source"), ("blob.bin", "other"),
])
def test_classification(path, kind):
    assert classify_path(path) == kind


def test_custom_rules_file(tmp_path):
    rules = tmp_path / "rules.txt"
    rules.write_text("# prune\nvendor/\n*.log\n")
    r = PruneRules.from_file(rules)
    assert r.dir_names == ("vendor",) and r.file_globs == ("*.log",)
    ws = tmp_path / "ws"
    touch(ws, "vendor/a.c")
    touch(ws, "build.log")
    touch(ws, "docs/x.c")
    inv = inventory(ws, r)
    assert [e.path for e in inv.entries] == ["docs/x.c"]
    assert inv.pruned_count == 2


def test_json_round_trip(tmp_path):
    touch(tmp_path, "foo.spec")
    inv = inventory(tmp_path)
    doc = json.loads(inv.to_json())
    assert doc["schema"] == "inventory.v1"
    assert StructureInventory.from_dict(doc) == inv


def test_deterministic(tmp_path):
    for rel in ["b.c", "a.spec", "z/y.h"]:
        touch(tmp_path, rel)
    assert inventory(tmp_path) == inventory(tmp_path)
