import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evident.distill import FailureSignal
from evident.enums import BuildStage
from evident.errors import BrokenRecipeError, RecipeStructureError
from evident.recipe import (
    LINE_KINDS,
    Dependency,
    RecipeConstraints,
    list_dependency_gaps,
    parse_dependencies,
    parse_recipe,
    split_dependencies,
)

RECIPES = Path(__file__).parent / "fixtures" / "recipes"
SPECS = sorted(p.stem for p in RECIPES.glob("*.spec"))


@pytest.mark.parametrize("name", SPECS)
def test_matches_golden(name):
    rc = parse_recipe((RECIPES / f"{name}.spec").read_text())
    golden = json.loads((RECIPES / "golden" / f"{name}.json").read_text())
    assert json.loads(rc.to_json()) == golden


@pytest.mark.parametrize("name", SPECS)
def test_every_line_attributed(name):
    text = (RECIPES / f"{name}.spec").read_text()
    rc = parse_recipe(text)
    assert len(rc.attribution) == len(text.splitlines())
    assert set(rc.attribution) <= set(LINE_KINDS)


@pytest.mark.parametrize("name", SPECS)
def test_dict_round_trip(name):
    rc = parse_recipe((RECIPES / f"{name}.spec").read_text())
    assert RecipeConstraints.from_dict(json.loads(rc.to_json())) == rc


def test_minimal():
    rc = parse_recipe((RECIPES / "minimal.spec").read_text())
    assert (rc.name, rc.version) == ("foo", "1.0")
    assert [d.name for d in rc.build_requires] == ["gcc"]
    assert rc.stages == {"build": ["make"]}
    assert "check" not in rc.stages


def test_define_macro():
    rc = parse_recipe((RECIPES / "macros.spec").read_text())
    assert rc.macros["pyver"] == "3.12"
    assert rc.macros["srcname"] == "fancy-lib"


def test_missing_name_is_broken():
    with pytest.raises(BrokenRecipeError):
        parse_recipe((RECIPES / "broken" / "noname.spec").read_text())
    with pytest.raises(BrokenRecipeError):
        parse_recipe("   \n")


@pytest.mark.parametrize("name,line", [("unbalanced_if", 6), ("stray_endif", 7)])
def test_structure_errors_carry_line(name, line):
    with pytest.raises(RecipeStructureError) as info:
        parse_recipe((RECIPES / "broken" / f"{name}.spec").read_text())
    assert info.value.line == line


def test_arch_conditional_recorded():
    rc = parse_recipe((RECIPES / "conditionals.spec").read_text())
    assert any(c.directive == "ifarch" and "riscv64" in c.expression for c in rc.arch_conditionals)


def test_dependency_splitting():
    assert split_dependencies("a, b >= 1.0 c") == ["a", "b", ">=", "1.0", "c"]
    assert split_dependencies("(foo or bar), baz") == ["(foo or bar)", "baz"]
    assert parse_dependencies("a, b >= 1.0 c")[1] == Dependency("b", ">=", "1.0")
    assert parse_dependencies("python3-setuptools >= 40.8") == [Dependency("python3-setuptools", ">=", "40.8")]
    [complex_dep] = parse_dependencies("(foo or bar)")
    assert complex_dep.complex


def dep_signal(text):
    return FailureSignal(BuildStage.DEPENDENCY_RESOLUTION, text, ("nothing provides",), (text,), (1, 1), 0)


def test_dependency_gaps():
    rc = parse_recipe("Name: x\nBuildRequires: gcc\n")
    assert list_dependency_gaps(rc, [dep_signal("nothing provides cmake")]) == ["cmake"]
    rc2 = parse_recipe("Name: x\nBuildRequires: gcc cmake\n")
    assert list_dependency_gaps(rc2, [dep_signal("nothing provides cmake")]) == []
    assert list_dependency_gaps(rc, []) == []


def test_gap_normalizes_python_module_names():
    rc = parse_recipe("Name: x\nBuildRequires: python3-setuptools_scm\n")
    sig = dep_signal("ModuleNotFoundError: No module named 'setuptools_scm'")
    assert list_dependency_gaps(rc, [sig]) == []


NAMES = st.text("abcxyz019-", min_size=1, max_size=8).map(lambda t: "p" + t)


@settings(max_examples=100, deadline=None)
@given(NAMES, st.lists(NAMES, max_size=5), st.sampled_from(["build", "install", "check"]),
       st.lists(st.sampled_from(["make", "", "# note", "%{__make} check", "cp a b"]), max_size=6))
def test_generated_specs_parse_and_attribute_every_line(name, reqs, stage, body):
    lines = [f"Name: {name}", "Version: 1", *(f"BuildRequires: {r}" for r in reqs), f"%{stage}", *body]
    text = "\n".join(lines) + "\n"
    rc = parse_recipe(text)
    assert rc.name == name
    assert [d.name for d in rc.build_requires] == reqs
    assert len(rc.attribution) == len(lines)
    expected = list(body)
    while expected and not expected[-1]:
        expected.pop()
    assert rc.stages[stage] == expected
