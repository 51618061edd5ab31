"""Structured view of an RPM spec file.

Macros are recorded verbatim and never expanded. Every input line is
attributed to exactly one of ``metadata``, ``macro``, ``stage``, ``comment``
or ``other``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable

from evident.errors import BrokenRecipeError, RecipeStructureError

RECIPE_SCHEMA = "recipe.v1"

STAGE_KEYS = ("prep", "build", "install", "check", "files", "other")
LINE_KINDS = ("metadata", "macro", "stage", "comment", "other")

_TAG = re.compile(r"^([A-Za-z][A-Za-z0-9]*)(\([^)]*\))?\s*:\s*(.*)$")
_DEFINE = re.compile(r"^%(define|global)\s+([A-Za-z_][A-Za-z0-9_]*)(\([^)]*\))?\s*(.*)$")
_UNDEFINE = re.compile(r"^%undefine\s+\S+")
_BCOND = re.compile(r"^%bcond(?:_with|_without)?\s+([A-Za-z_][A-Za-z0-9_]*)")
_COND_OPEN = re.compile(r"^%(if|ifarch|ifnarch|ifos|ifnos)\b\s*(.*)$")
_COND_ELSE = re.compile(r"^%(else|elif|elifarch|elifos)\b\s*(.*)$")
_COND_END = re.compile(r"^%endif\b")
_SECTION = re.compile(
    r"^%(prep|conf|build|install|check|files|clean|description|package|changelog"
    r"|pre|post|preun|postun|pretrans|posttrans|preuntrans|postuntrans|verifyscript"
    r"|trigger\w*|filetrigger\w*|transfiletrigger\w*|generate_buildrequires|sepolicy)\b(.*)$"
)
_STAGE_SECTIONS = {
    "prep": "prep",
    "conf": "build",
    "build": "build",
    "install": "install",
    "check": "check",
    "files": "files",
}
_TEXT_SECTIONS = {"description", "changelog"}
_DEP_TAGS = {"buildrequires": "build_requires", "requires": "requires"}
_OPS = ("<=", ">=", "<", ">", "=")


@dataclass(frozen=True)
class Dependency:
    name: str
    op: str | None = None
    version: str | None = None
    complex: bool = False

    @property
    def raw(self) -> str:
        if self.op:
            return f"{self.name} {self.op} {self.version}"
        return self.name


@dataclass
class Conditional:
    directive: str
    expression: str
    start_line: int
    end_line: int
    lines: list[int] = field(default_factory=list)


@dataclass
class RecipeConstraints:
    name: str
    version: str | None = None
    release: str | None = None
    build_requires: list[Dependency] = field(default_factory=list)
    requires: list[Dependency] = field(default_factory=list)
    macros: dict[str, str] = field(default_factory=dict)
    sources: dict[int, str] = field(default_factory=dict)
    patches: dict[int, str] = field(default_factory=dict)
    stages: dict[str, list[str]] = field(default_factory=dict)
    arch_conditionals: list[Conditional] = field(default_factory=list)
    tags: list[tuple[str, str]] = field(default_factory=list)
    subpackages: dict[str, dict] = field(default_factory=dict)
    text_sections: dict[str, list[str]] = field(default_factory=dict)
    attribution: list[str] = field(default_factory=list)

    @property
    def line_count(self) -> int:
        return len(self.attribution)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = {str(k): v for k, v in self.sources.items()}
        d["patches"] = {str(k): v for k, v in self.patches.items()}
        d["tags"] = [list(t) for t in self.tags]
        return {"schema": RECIPE_SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeConstraints":
        if d.get("schema") != RECIPE_SCHEMA:
            raise ValueError(f"expected schema {RECIPE_SCHEMA}, got {d.get('schema')!r}")

        def deps(items):
            return [Dependency(**i) for i in items]

        def subpkg(s):
            return {**s, "requires": deps(s["requires"]), "build_requires": deps(s["build_requires"])}

        return cls(
            name=d["name"],
            version=d["version"],
            release=d["release"],
            build_requires=deps(d["build_requires"]),
            requires=deps(d["requires"]),
            macros=dict(d["macros"]),
            sources={int(k): v for k, v in d["sources"].items()},
            patches={int(k): v for k, v in d["patches"].items()},
            stages={k: list(v) for k, v in d["stages"].items()},
            arch_conditionals=[Conditional(**c) for c in d["arch_conditionals"]],
            tags=[tuple(t) for t in d["tags"]],
            subpackages={k: subpkg(v) for k, v in d["subpackages"].items()},
            text_sections={k: list(v) for k, v in d["text_sections"].items()},
            attribution=list(d["attribution"]),
        )


def split_dependencies(value: str) -> list[str]:
    """Split a dependency field on commas/whitespace, respecting () and {} nesting."""
    items, buf, depth = [], [], 0
    for ch in value:
        if ch in "({":
            depth += 1
        elif ch in ")}" and depth:
            depth -= 1
        if depth == 0 and (ch.isspace() or ch == ","):
            if buf:
                items.append("".join(buf))
                buf = []
            continue
        buf.append(ch)
    if buf:
        items.append("".join(buf))
    return items


def parse_dependencies(value: str) -> list[Dependency]:
    """Parse ``name [op version]`` items; rich ``(a or b)`` expressions are opaque."""
    tokens = split_dependencies(value.strip())
    deps = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.startswith("(") and tok.endswith(")"):
            deps.append(Dependency(tok, complex=True))
            i += 1
            continue
        if i + 1 < len(tokens) and tokens[i + 1] in _OPS:
            version = tokens[i + 2] if i + 2 < len(tokens) else ""
            deps.append(Dependency(tok, tokens[i + 1], version))
            i += 3
            continue
        deps.append(Dependency(tok))
        i += 1
    return deps


def _numbered(tag: str, base: str) -> int | None:
    m = re.fullmatch(base + r"(\d*)", tag, re.IGNORECASE)
    if not m:
        return None
    return int(m.group(1)) if m.group(1) else 0


def _subpackage_name(args: str, main: str) -> str:
    parts = args.split()
    if "-n" in parts:
        idx = parts.index("-n")
        if idx + 1 < len(parts):
            return parts[idx + 1]
    names = [p for p in parts if not p.startswith("-")]
    return f"{main}-{names[0]}" if names else main


def parse_recipe(recipe_text: str) -> RecipeConstraints:
    """Parse spec text into :class:`RecipeConstraints`.

    Raises
    ------
    BrokenRecipeError
        If the text is empty or has no top-level ``Name:`` tag.
    RecipeStructureError
        On an unbalanced ``%if``/``%else``/``%endif``; carries the 1-based line.
    """
    if not recipe_text or not recipe_text.strip():
        raise BrokenRecipeError("recipe is empty")

    lines = recipe_text.splitlines()
    rc = RecipeConstraints(name="")
    attribution: list[str] = []
    open_conds: list[Conditional] = []

    section = "preamble"  # preamble | subpackage | stage:<key> | text:<name>
    subpkg: dict | None = None
    continuing_macro: str | None = None

    for no, line in enumerate(lines, start=1):
        stripped = line.strip()
        for cond in open_conds:
            cond.lines.append(no)

        if continuing_macro is not None:
            rc.macros[continuing_macro] += "\n" + line
            attribution.append("macro")
            if not line.rstrip().endswith("\\"):
                continuing_macro = None
            continue

        if _COND_OPEN.match(stripped):
            m = _COND_OPEN.match(stripped)
            open_conds.append(Conditional(m.group(1), m.group(2).strip(), no, no))
        elif _COND_ELSE.match(stripped):
            if not open_conds:
                raise RecipeStructureError(f"%{_COND_ELSE.match(stripped).group(1)} without %if", no)
        elif _COND_END.match(stripped):
            if not open_conds:
                raise RecipeStructureError("%endif without matching %if", no)
            cond = open_conds.pop()
            cond.end_line = no
            cond.lines = cond.lines[:-1]
            rc.arch_conditionals.append(cond)
        is_cond = bool(
            _COND_OPEN.match(stripped) or _COND_ELSE.match(stripped) or _COND_END.match(stripped)
        )

        sec = _SECTION.match(stripped)
        if sec:
            name, args = sec.group(1), sec.group(2).strip()
            _trim(rc, section)
            if name == "package":
                section = "subpackage"
                subpkg = {"header": stripped, "tags": [], "requires": [], "build_requires": []}
                rc.subpackages[_subpackage_name(args, rc.name)] = subpkg
                attribution.append("metadata")
            elif name in _STAGE_SECTIONS:
                section = f"stage:{_STAGE_SECTIONS[name]}"
                body = rc.stages.setdefault(_STAGE_SECTIONS[name], [])
                if args:  # e.g. "%files devel": keep the header so bodies stay distinguishable
                    body.append(stripped)
                attribution.append("stage")
            elif name in _TEXT_SECTIONS:
                section = f"text:{stripped}"
                rc.text_sections.setdefault(stripped, [])
                attribution.append("other")
            else:
                section = "stage:other"
                rc.stages.setdefault("other", []).append(stripped)
                attribution.append("stage")
            continue

        if section.startswith("stage:"):
            d = _DEFINE.match(stripped)
            if d:
                rc.macros[d.group(2)] = d.group(4)
            rc.stages[section[6:]].append(line)
            attribution.append("stage")
            continue
        if section.startswith("text:"):
            rc.text_sections[section[5:]].append(line)
            attribution.append("other")
            continue

        # preamble or subpackage preamble
        if is_cond or _UNDEFINE.match(stripped):
            attribution.append("macro")
            continue
        b = _BCOND.match(stripped)
        if b:
            rc.macros[f"with_{b.group(1)}"] = stripped
            attribution.append("macro")
            continue
        d = _DEFINE.match(stripped)
        if d:
            rc.macros[d.group(2)] = d.group(4)
            attribution.append("macro")
            if stripped.endswith("\\"):
                continuing_macro = d.group(2)
            continue
        if stripped.startswith("#"):
            attribution.append("comment")
            continue
        t = _TAG.match(stripped)
        if t:
            tag, qualifier, value = t.group(1), t.group(2) or "", t.group(3).strip()
            _apply_tag(rc, subpkg if section == "subpackage" else None, tag, qualifier, value)
            attribution.append("metadata")
            continue
        attribution.append("other")

    if open_conds:
        raise RecipeStructureError(
            f"%{open_conds[-1].directive} is never closed by %endif", open_conds[-1].start_line
        )
    if not rc.name:
        raise BrokenRecipeError("recipe has no Name: field")
    rc.arch_conditionals.sort(key=lambda c: c.start_line)
    _trim(rc, section)
    rc.attribution = attribution
    return rc


def _trim(rc: RecipeConstraints, section: str) -> None:
    """Drop blank separator lines ending a section body; they stay attributed."""
    if section.startswith("stage:"):
        body = rc.stages[section[6:]]
    elif section.startswith("text:"):
        body = rc.text_sections[section[5:]]
    else:
        return
    while body and not body[-1].strip():
        body.pop()


def _apply_tag(rc: RecipeConstraints, subpkg: dict | None, tag: str, qualifier: str, value: str) -> None:
    lower = tag.lower()
    if subpkg is not None:
        if lower in _DEP_TAGS:
            subpkg[_DEP_TAGS[lower]].extend(parse_dependencies(value))
        else:
            subpkg["tags"].append([tag + qualifier, value])
        return
    if lower == "name":
        rc.name = value
    elif lower == "version":
        rc.version = value
    elif lower == "release":
        rc.release = value
    elif lower in _DEP_TAGS:
        getattr(rc, _DEP_TAGS[lower]).extend(parse_dependencies(value))
    elif _numbered(tag, "source") is not None:
        rc.sources[_numbered(tag, "source")] = value
    elif _numbered(tag, "patch") is not None:
        rc.patches[_numbered(tag, "patch")] = value
    else:
        rc.tags.append((tag + qualifier, value))


# --- dependency gap detection ----------------------------------------------

_GAP_PATTERNS = [
    re.compile(r"nothing provides (?:requested )?([^\s,]+)"),
    re.compile(r"^\s*([^\s]+)(?:\s+[<>=]+\s+\S+)? is needed by"),
    re.compile(r"No module named '?([\w.]+)'?"),
    re.compile(r"(?:^|\s)([\w.+-]+): command not found"),
    re.compile(r"Could not find a package configuration file provided by \"([\w.+-]+)\""),
    re.compile(r"Package '?([\w.+-]+)'?,? (?:was not found|required by .* not found)"),
]
_WRAPPED = re.compile(r"^[\w-]+\(([^)]+)\)$")


def _normalize(name: str) -> str:
    name = name.strip().strip("'\"`").lower()
    m = _WRAPPED.match(name)
    if m:
        name = m.group(1)
    for prefix in ("python3-", "python-", "perl-", "rubygem-"):
        if name.startswith(prefix):
            name = name[len(prefix):]
    return name.split(".")[0].replace("_", "-")


def list_dependency_gaps(rc: RecipeConstraints, signals: Iterable) -> list[str]:
    """Dependency names that failure signals ask for but ``BuildRequires`` lacks."""
    declared = {_normalize(d.name) for d in rc.build_requires}
    gaps: list[str] = []
    for sig in signals:
        for text in (sig.template, *sig.window):
            for pattern in _GAP_PATTERNS:
                for m in pattern.finditer(text):
                    name = m.group(1).strip("'\"`")
                    if name == "<*>" or not name:
                        continue
                    if _normalize(name) not in declared and name not in gaps:
                        gaps.append(name)
    return gaps
