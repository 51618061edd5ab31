"""Turn raw build logs into compact, stage-tagged failure signals.

Pipeline: :func:`condense` -> :func:`extract_windows` -> template mining ->
:func:`verify_blocks`. :func:`distill` runs all four; :class:`LogDistiller`
wraps it as a stateless transformer.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from evident.drain import DrainTemplateMiner
from evident.enums import BuildStage

log = logging.getLogger(__name__)

SIGNALS_SCHEMA = "signals.v1"

_OBS_TIMESTAMP = re.compile(r"^\[\s*\d+s\] ?")
_PROGRESS = [
    re.compile(r"^\[\s*\d+%\]"),  # cmake
    re.compile(r"^\[\d+/\d+\] "),  # ninja
]
_PATH_TOKEN = re.compile(r"(?<!\S)([\"'`(]?)/(?:[^\s/]*/)+([^\s/]*)")

# (pattern, stage or None to read it from group 1, keep the line itself)
_STAGE_MARKERS: list[tuple[re.Pattern, BuildStage | None, bool]] = [
    (re.compile(r"^Executing\(%(prep|build|install|check|conf)\)"), None, False),
    (re.compile(r"^\+ %(prep|build|install|check|conf)\b"), None, False),
    (re.compile(r"^Executing\(%\w+\)"), BuildStage.OTHER, False),
    (
        re.compile(
            r"^(?:expanding package dependencies|Resolving build dependencies"
            r"|error: Failed build dependencies:|unresolvable:|nothing provides )"
        ),
        BuildStage.DEPENDENCY_RESOLUTION,
        True,
    ),
    (re.compile(r"^(?:Processing files:|Checking for unpackaged file)"), BuildStage.INSTALL, True),
    (re.compile(r"^RPM build errors:"), BuildStage.OTHER, False),
]
_RECAP = "RPM build errors:"
_SECTION_STAGE = {
    "prep": BuildStage.PREP,
    "conf": BuildStage.BUILD,
    "build": BuildStage.BUILD,
    "install": BuildStage.INSTALL,
    "check": BuildStage.CHECK,
}

# Explicit error patterns used when no model-backed verifier is available.
FALLBACK_ERROR_PATTERNS = [
    re.compile(p)
    for p in (
        r"(?i)\berror\b\s*[:\]]",
        r"fatal error",
        r"undefined reference",
        r"nothing provides",
        r"is needed by",
        r"No module named",
        r"ModuleNotFoundError",
        r"AssertionError",
        r"Traceback \(most recent call last\)",
        r"(?i)segmentation fault",
        r"command not found",
        r"No such file or directory",
        r"cannot find",
        r"\bFAILED\b",
        r"^FAIL:",
        r"\bError \d+\b",
        r"(?<![\w-])[1-9]\d* (?:tests? )?failed\b",
        r"Installed \(but unpackaged\) file",
        r"File not found",
        r"(?i)could not find",
        r"required by .* not found",
        r"conflicts with file",
    )
]


def load_keywords(path: str | Path | None = None) -> list[str]:
    """Read a keyword file: one keyword per line, ``#`` starts a comment."""
    if path is None:
        text = resources.files("evident.data").joinpath("keywords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    keywords = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#") and line not in keywords:
            keywords.append(line)
    return keywords


DEFAULT_KEYWORDS = load_keywords()


@dataclass
class LogSegment:
    lines: list[str]
    line_numbers: list[int]
    stage: BuildStage
    origin_span: tuple[int, int]


@dataclass
class CandidateBlock:
    stage: BuildStage
    lines: list[str]
    line_numbers: list[int]
    hits: dict[int, list[str]]
    templates: list[str] = field(default_factory=list)

    @property
    def keywords(self) -> list[str]:
        seen: list[str] = []
        for idx in sorted(self.hits):
            seen.extend(k for k in self.hits[idx] if k not in seen)
        return seen

    @property
    def text(self) -> str:
        return "\n".join(self.lines)


@dataclass(frozen=True)
class Verdict:
    keep: bool
    reason: str
    provenance: str


@dataclass
class VerifiedBlock:
    block: CandidateBlock
    verdict: Verdict


@dataclass(frozen=True)
class FailureSignal:
    stage: BuildStage
    template: str
    keywords: tuple[str, ...]
    window: tuple[str, ...]
    line_span: tuple[int, int]
    severity_rank: int
    provenance: str = "fallback"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["keywords"] = list(self.keywords)
        d["window"] = list(self.window)
        d["line_span"] = list(self.line_span)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FailureSignal":
        return cls(
            stage=BuildStage(d["stage"]),
            template=d["template"],
            keywords=tuple(d["keywords"]),
            window=tuple(d["window"]),
            line_span=tuple(d["line_span"]),
            severity_rank=int(d["severity_rank"]),
            provenance=d.get("provenance", "fallback"),
        )


def signals_to_json(signals: Sequence[FailureSignal]) -> str:
    return json.dumps(
        {"schema": SIGNALS_SCHEMA, "signals": [s.to_dict() for s in signals]}, indent=2
    )


def signals_from_json(text: str) -> list[FailureSignal]:
    doc = json.loads(text)
    if doc.get("schema") != SIGNALS_SCHEMA:
        raise ValueError(f"expected schema {SIGNALS_SCHEMA}, got {doc.get('schema')!r}")
    return [FailureSignal.from_dict(d) for d in doc["signals"]]


def replace_paths(line: str) -> str:
    """Replace absolute paths with ``<PATH>/basename``."""
    return _PATH_TOKEN.sub(lambda m: f"{m.group(1)}<PATH>/{m.group(2)}", line)


def _is_progress(line: str) -> bool:
    return any(p.match(line) for p in _PROGRESS)


def _stage_marker(line: str) -> tuple[BuildStage, bool] | None:
    for pattern, stage, keep in _STAGE_MARKERS:
        m = pattern.match(line)
        if m:
            return (stage if stage is not None else _SECTION_STAGE[m.group(1)]), keep
    return None


def condense(raw_log: str | bytes) -> list[LogSegment]:
    """Split a log into stage segments of normalized, de-duplicated lines.

    Stage banners open a new segment. OBS timestamps, banners, progress
    lines and the indented recap after ``RPM build errors:`` are dropped,
    exact duplicates within a segment are collapsed to their first occurrence
    and absolute paths become placeholders. Line numbers are 1-based
    positions in ``raw_log``.
    """
    if isinstance(raw_log, bytes):
        raw_log = raw_log.decode("utf-8", errors="replace")
    segments: list[LogSegment] = []
    current: LogSegment | None = None
    seen: set[str] = set()

    def close(end: int) -> None:
        if current is not None and current.lines:
            current.origin_span = (current.origin_span[0], end)
            segments.append(current)

    stage = BuildStage.OTHER
    last_no = 0
    in_recap = False
    for no, raw in enumerate(raw_log.splitlines(), start=1):
        last_no = no
        line = _OBS_TIMESTAMP.sub("", raw).rstrip()
        # rpmbuild repeats every error, indented, after "RPM build errors:"
        if in_recap and (not line or line[0].isspace()):
            continue
        in_recap = line.startswith(_RECAP)
        marker = _stage_marker(line)
        opens = marker is not None and (not marker[1] or marker[0] is not stage)
        if opens or current is None:
            close(no - 1)
            if marker is not None:
                stage = marker[0]
            current = LogSegment([], [], stage, (no, no))
            seen = set()
            if marker is not None and not marker[1]:
                continue
        if not line.strip() or _is_progress(line):
            continue
        norm = replace_paths(line)
        if norm in seen:
            continue
        seen.add(norm)
        current.lines.append(norm)
        current.line_numbers.append(no)
    close(last_no)
    return segments


def _match_keywords(line: str, keywords: Sequence[str]) -> list[str]:
    return [k for k in keywords if k in line]


def extract_windows(
    segments: Iterable[LogSegment],
    keywords: Sequence[str] | None = None,
    window: int = 3,
    max_block_lines: int = 40,
) -> list[CandidateBlock]:
    """Cut ``window`` lines of context around every keyword hit.

    Windows are clipped at segment bounds and overlapping windows merge, unless
    the merged block would exceed ``max_block_lines``; then a new block starts
    right after the previous one.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    keywords = DEFAULT_KEYWORDS if keywords is None else list(keywords)
    blocks = []
    for seg in segments:
        hits = {}
        for i, line in enumerate(seg.lines):
            found = _match_keywords(line, keywords)
            if found:
                hits[i] = found
        intervals: list[list[int]] = []
        for i in sorted(hits):
            lo, hi = max(0, i - window), min(len(seg.lines) - 1, i + window)
            if intervals and lo <= intervals[-1][1]:
                last = intervals[-1]
                if hi - last[0] + 1 <= max_block_lines:
                    last[1] = max(last[1], hi)
                    continue
                if i <= last[1]:
                    continue
                lo = last[1] + 1
            intervals.append([lo, hi])
        for lo, hi in intervals:
            blocks.append(
                CandidateBlock(
                    stage=seg.stage,
                    lines=seg.lines[lo : hi + 1],
                    line_numbers=seg.line_numbers[lo : hi + 1],
                    hits={i - lo: hits[i] for i in hits if lo <= i <= hi},
                )
            )
    return blocks


def attach_templates(
    blocks: Sequence[CandidateBlock],
    depth: int = 4,
    sim_threshold: float = 0.4,
    max_children: int = 100,
) -> list[tuple[str, int]]:
    """Mine templates over every block line and store each line's template."""
    lines = [line for b in blocks for line in b.lines]
    if not lines:
        return []
    miner = DrainTemplateMiner(depth, sim_threshold, max_children).fit(lines)
    it = iter(miner.labels_)
    for b in blocks:
        b.templates = [miner.clusters_[next(it)].template_str for _ in b.lines]
    return miner.templates_


class Verifier(Protocol):
    name: str

    def __call__(self, block: CandidateBlock) -> Verdict | bool: ...


class FallbackVerifier:
    """Keep blocks with at least one explicit error pattern."""

    name = "fallback"

    def __init__(self, patterns: Sequence[re.Pattern] | None = None):
        self.patterns = list(FALLBACK_ERROR_PATTERNS if patterns is None else patterns)

    def __call__(self, block: CandidateBlock) -> Verdict:
        for line in block.lines:
            for p in self.patterns:
                if p.search(line):
                    return Verdict(True, f"matches {p.pattern!r}", self.name)
        return Verdict(False, "no explicit error pattern", self.name)


class CallableVerifier:
    """Adapt a ``keep/drop`` callable (scripted or model-backed) to a verifier."""

    def __init__(self, fn: Callable[[CandidateBlock], bool | str], name: str = "scripted"):
        self.fn = fn
        self.name = name

    def __call__(self, block: CandidateBlock) -> Verdict:
        answer = self.fn(block)
        if isinstance(answer, str):
            keep = answer.strip().lower().startswith("keep")
        else:
            keep = bool(answer)
        return Verdict(keep, f"{self.name} said {'keep' if keep else 'drop'}", self.name)


def verify_blocks(
    blocks: Iterable[CandidateBlock], verifier: Verifier | None = None
) -> list[VerifiedBlock]:
    """Keep the blocks the verifier accepts.

    Any exception from ``verifier`` switches to the regex fallback for that
    block; the verdict's provenance records the switch.
    """
    fallback = FallbackVerifier()
    kept = []
    for block in blocks:
        if verifier is None:
            verdict = fallback(block)
        else:
            try:
                verdict = verifier(block)
                if isinstance(verdict, bool):
                    verdict = Verdict(verdict, "", getattr(verifier, "name", "custom"))
            except Exception as exc:
                log.warning("verifier unavailable, using fallback: %s", exc)
                fb = fallback(block)
                verdict = Verdict(fb.keep, fb.reason, "fallback:verifier-unavailable")
        if verdict.keep:
            kept.append(VerifiedBlock(block, verdict))
    return kept


def _keyword_priority(block: CandidateBlock, keywords: Sequence[str]) -> tuple[int, int]:
    order = {k: i for i, k in enumerate(keywords)}
    best = (len(keywords), 0)
    for idx in sorted(block.hits):
        for k in block.hits[idx]:
            best = min(best, (order.get(k, len(keywords)), idx))
    return best


def distill(
    raw_log: str | bytes,
    keywords: Sequence[str] | None = None,
    window: int = 3,
    verifier: Verifier | None = None,
    *,
    depth: int = 4,
    sim_threshold: float = 0.4,
    max_children: int = 100,
    max_block_lines: int = 40,
) -> list[FailureSignal]:
    """Distill a raw log into failure signals ordered by stage, then position."""
    keywords = DEFAULT_KEYWORDS if keywords is None else list(keywords)
    blocks = extract_windows(condense(raw_log), keywords, window, max_block_lines)
    attach_templates(blocks, depth, sim_threshold, max_children)
    verified = verify_blocks(blocks, verifier)

    scored = []
    for vb in verified:
        b = vb.block
        priority, primary = _keyword_priority(b, keywords)
        scored.append((priority, b.line_numbers[0], vb, primary))
    ranks = {id(item[2]): r for r, item in enumerate(sorted(scored, key=lambda s: s[:2]))}

    signals = []
    for _, _, vb, primary in scored:
        b = vb.block
        signals.append(
            FailureSignal(
                stage=b.stage,
                template=b.templates[primary],
                keywords=tuple(b.keywords),
                window=tuple(b.lines),
                line_span=(b.line_numbers[0], b.line_numbers[-1]),
                severity_rank=ranks[id(vb)],
                provenance=vb.verdict.provenance,
            )
        )
    signals.sort(key=lambda s: (s.stage.rank, s.line_span))
    return signals


class LogDistiller(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping raw logs to lists of :class:`FailureSignal`."""

    def __init__(
        self,
        keywords=None,
        window: int = 3,
        depth: int = 4,
        sim_threshold: float = 0.4,
        max_children: int = 100,
        max_block_lines: int = 40,
        verifier=None,
    ):
        self.keywords = keywords
        self.window = window
        self.depth = depth
        self.sim_threshold = sim_threshold
        self.max_children = max_children
        self.max_block_lines = max_block_lines
        self.verifier = verifier

    def fit(self, X=None, y=None):
        if self.window < 0:
            raise ValueError("window must be >= 0")
        self.keywords_ = (
            DEFAULT_KEYWORDS if self.keywords is None else list(self.keywords)
        )
        return self

    def distill_one(self, raw_log: str | bytes) -> list[FailureSignal]:
        keywords = getattr(self, "keywords_", None) or (
            DEFAULT_KEYWORDS if self.keywords is None else list(self.keywords)
        )
        return distill(
            raw_log,
            keywords,
            self.window,
            self.verifier,
            depth=self.depth,
            sim_threshold=self.sim_threshold,
            max_children=self.max_children,
            max_block_lines=self.max_block_lines,
        )

    def transform(self, X) -> list[list[FailureSignal]]:
        return [self.distill_one(raw) for raw in X]


# --- classification -------------------------------------------------------

TAXONOMY: dict[str, tuple[str, ...]] = {
    "Dependency": ("Missing Dependency", "Dependency Conflict"),
    "Compilation": ("Code-Level Issues", "Build Errors", "API & Function Issues"),
    "Test": (
        "Code & Compatibility Issues",
        "Assertion & Compliance Violations",
        "Test Execution Problems",
    ),
    "Packaging": ("Packaging Configuration Errors", "Installation/Verification Failures"),
}


@dataclass(frozen=True)
class FailureCategory:
    category: str
    subcategory: str | None

    def __post_init__(self):
        if self.category == "Unclassifiable":
            return
        if self.category not in TAXONOMY:
            raise ValueError(f"unknown category {self.category!r}")
        if self.subcategory not in TAXONOMY[self.category]:
            raise ValueError(f"{self.subcategory!r} is not a {self.category} subcategory")

    @property
    def classified(self) -> bool:
        return self.category != "Unclassifiable"

    def to_dict(self) -> dict:
        return {"category": self.category, "subcategory": self.subcategory}


UNCLASSIFIABLE = FailureCategory("Unclassifiable", None)


def _rx(*patterns: str) -> re.Pattern:
    # a leading (?i) is scoped to its own alternative
    return re.compile("|".join(f"(?i:{p[4:]})" if p.startswith("(?i)") else f"(?:{p})" for p in patterns))


_DEPENDENCY = _rx(
    r"nothing provides",
    r"is needed by",
    r"No module named",
    r"ModuleNotFoundError",
    r"command not found",
    r"Could not find a package configuration file",
    r"(?i)could not find",
    r"required by .* not found",
    r"Package '?[\w.+-]+'? was not found",
)
_DEP_CONFLICT = _rx(
    r"(?i)conflict",
    r"(?i)incompatible",
    r"(?i)version mismatch",
    r"(?i)requires .* (?:>=|<=|==|<|>) ?\d",
    r"(?i)unsupported (?:python|go|rust) version",
)
_PACKAGING = _rx(
    r"Installed \(but unpackaged\) file",
    r"File not found",
    r"conflicts with file",
    r"error: line \d+:",
    r"(?i)bad exit status from .*%files",
    r"(?i)macro .* (?:undefined|not defined)",
    r"libtool: .*(?:error|cannot install)",
    r"Hunk #\d+ FAILED",
    r"saving rejects to file",
)
_INSTALL_VERIFY = _rx(
    r"Installed \(but unpackaged\) file", r"File not found", r"conflicts with file"
)
_TEST_ASSERT = _rx(r"AssertionError", r"\bassert", r"(?i)expected .* (?:got|but)", r"(?i)mismatch")
_TEST_COMPAT = _rx(
    r"ImportError",
    r"AttributeError",
    r"TypeError",
    r"DeprecationWarning",
    r"has no attribute",
    r"(?i)deprecated",
)
_COMPILER = _rx(r"\berror:", r"fatal error", r"undefined reference", r"collect2")
_API = _rx(
    r"(?i)deprecated",
    r"implicit declaration of function",
    r"was not declared",
    r"has no member",
    r"no member named",
    r"too (?:few|many) arguments",
)
_BUILD_ERR = _rx(
    r"unrecognized command[- ]line option",
    r"(?i)unknown option",
    r"(?i)unsupported",
    r"collect2",
    r"ld returned",
    r"undefined reference",
    r"\blto\b|-flto",
    r"CMake Error",
)


def classify(signals: Sequence[FailureSignal]) -> FailureCategory:
    """Map signals onto the failure taxonomy using the earliest-stage signal.

    The rule table is documented in ``docs/classification.md``.
    """
    if not signals:
        return UNCLASSIFIABLE
    primary = min(signals, key=lambda s: (s.stage.rank, s.line_span))
    text = "\n".join((primary.template,) + primary.window)

    if primary.stage is BuildStage.DEPENDENCY_RESOLUTION or _DEPENDENCY.search(text):
        sub = "Dependency Conflict" if _DEP_CONFLICT.search(text) else "Missing Dependency"
        return FailureCategory("Dependency", sub)
    if _PACKAGING.search(text):
        sub = (
            "Installation/Verification Failures"
            if _INSTALL_VERIFY.search(text)
            else "Packaging Configuration Errors"
        )
        return FailureCategory("Packaging", sub)
    if primary.stage is BuildStage.CHECK:
        if _TEST_ASSERT.search(text):
            sub = "Assertion & Compliance Violations"
        elif _TEST_COMPAT.search(text):
            sub = "Code & Compatibility Issues"
        else:
            sub = "Test Execution Problems"
        return FailureCategory("Test", sub)
    if primary.stage is BuildStage.INSTALL:
        return FailureCategory("Packaging", "Packaging Configuration Errors")
    if _API.search(text):
        return FailureCategory("Compilation", "API & Function Issues")
    if _BUILD_ERR.search(text):
        return FailureCategory("Compilation", "Build Errors")
    if _COMPILER.search(text):
        return FailureCategory("Compilation", "Code-Level Issues")
    return FailureCategory("Compilation", "Build Errors")
