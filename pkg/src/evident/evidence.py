"""Iteration-aware evidence context and fixed-slot prompt rendering.

The context holds at most one build feedback, an append-only repair
history, cached tool findings valid for the current iteration only, and
retrieved knowledge. :meth:`EvidenceContext.fuse` renders all of it into a
:class:`PromptDocument` whose four evidence slots always appear, in order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Sequence

from evident._util import canonical_json, sha256_text
from evident.enums import BuildStatus, RepairKind, ValidationResult
from evident.errors import (
    BoundaryViolation,
    BudgetExhausted,
    DuplicateEntryError,
    PreconditionError,
)

if TYPE_CHECKING:
    from evident.distill import FailureSignal
    from evident.knowledge import RetrievedKnowledge

log = logging.getLogger(__name__)

CONTEXT_SCHEMA = "context.v1"
DEFAULT_BUDGET = 3
TRUNCATED = "[truncated]"
SLOT_HEADERS = ("## FEEDBACK", "## HISTORY", "## FINDINGS", "## KNOWLEDGE")
SLOT_FIELDS = ("slot_feedback", "slot_history", "slot_findings", "slot_knowledge")


@dataclass(frozen=True)
class BuildFeedback:
    iteration: int
    status: BuildStatus
    log_ref: str | None = None
    signals: tuple["FailureSignal", ...] = ()
    complete: bool = True
    last_observed_state: str | None = None
    elapsed: float = 0.0
    initial: bool = False

    def __post_init__(self):
        object.__setattr__(self, "status", BuildStatus(self.status))
        object.__setattr__(self, "signals", tuple(self.signals))
        if self.status is BuildStatus.TIMEOUT and self.complete:
            raise ValueError("timeout feedback must have complete=False")
        if self.status is BuildStatus.SUCCEEDED and self.signals:
            raise ValueError("succeeded feedback carries no failure signals")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "status": self.status.value,
            "log_ref": self.log_ref,
            "signals": [s.to_dict() for s in self.signals],
            "complete": self.complete,
            "last_observed_state": self.last_observed_state,
            "elapsed": self.elapsed,
            "initial": self.initial,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BuildFeedback":
        from evident.distill import FailureSignal

        return cls(
            iteration=d["iteration"],
            status=BuildStatus(d["status"]),
            log_ref=d.get("log_ref"),
            signals=tuple(FailureSignal.from_dict(s) for s in d.get("signals", ())),
            complete=d.get("complete", True),
            last_observed_state=d.get("last_observed_state"),
            elapsed=d.get("elapsed", 0.0),
            initial=d.get("initial", False),
        )


@dataclass
class HistoryEntry:
    iteration: int
    sequence: int
    action_kind: RepairKind
    target_path: str
    diff_summary: str
    validated: ValidationResult = ValidationResult.PENDING
    content_hash: str = ""
    note: str = ""

    def __post_init__(self):
        self.action_kind = RepairKind(self.action_kind)
        self.validated = ValidationResult(self.validated)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "sequence": self.sequence,
            "action_kind": self.action_kind.value,
            "target_path": self.target_path,
            "diff_summary": self.diff_summary,
            "validated": self.validated.value,
            "content_hash": self.content_hash,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HistoryEntry":
        return cls(**d)


@dataclass(frozen=True)
class CachedFinding:
    """A deterministic tool output, stored as canonical JSON so it cannot be mutated."""

    key: str
    iteration: int
    payload_json: str
    stable_id: str

    @property
    def payload(self) -> Any:
        return json.loads(self.payload_json)

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "iteration": self.iteration,
            "payload": self.payload,
            "stable_id": self.stable_id,
        }

    @classmethod
    def create(cls, key: str, iteration: int, payload: Any) -> "CachedFinding":
        body = canonical_json(payload)
        return cls(key, iteration, body, sha256_text(canonical_json([key, body])))


@dataclass(frozen=True)
class SlotBudgets:
    feedback: int = 8000
    history: int = 4000
    findings: int = 6000
    knowledge: int = 4000


@dataclass(frozen=True)
class PromptDocument:
    rules_section: str
    slot_feedback: str
    slot_history: str
    slot_findings: str
    slot_knowledge: str
    workflow_section: str
    feedback_status: str | None = None

    def render(self) -> str:
        parts = [
            self.rules_section,
            self.slot_feedback,
            self.slot_history,
            self.slot_findings,
            self.slot_knowledge,
            self.workflow_section,
        ]
        return "\n\n".join(p.rstrip("\n") for p in parts) + "\n"


RULES = """\
# REPAIR RULES
- Ground every decision in the evidence slots below; prioritize artifacts named by the failure signals.
- Make minimal but complete edits: always supply the full new content of a file, never a fragment.
- Preserve the original structure and formatting of every file you touch.
- Never edit files inside the unpack scratch area directly; edit archive members through the archive tools and repack before validation.
- Never repeat an edit listed under do-not-repeat.
- Every repair attempt must end with exactly one submit_build call; an unsuccessful build starts the next iteration."""

WORKFLOW = """\
# WORKFLOW
1. Analysis and localization: distill_log, parse_recipe, inventory, read_file.
   e.g. distill_log -> parse_recipe when a dependency is missing.
2. Targeted artifact-level modification: apply_config, apply_source, unpack/edit_member/repack.
   e.g. apply_config {"path": "foo.spec", "content": "<full new spec>"}
3. Build-based validation: submit_build (exactly once, last)."""


def _fit(items: Sequence[tuple[int, str]], budget: int) -> tuple[list[str], bool]:
    """Pick items in priority order while they fit ``budget`` characters.

    ``items`` are ``(priority, text)`` in display order; lower priority
    numbers are kept first. A single oversize item is cut rather than dropped
    when nothing else has been kept yet.
    """
    order = sorted(range(len(items)), key=lambda i: (items[i][0], i))
    keep: set[int] = set()
    cut: dict[int, str] = {}
    used = 0
    dropped = False
    for i in order:
        text = items[i][1]
        size = len(text) + 1
        if used + size <= budget:
            keep.add(i)
            used += size
        elif not keep and budget - used > 0:
            cut[i] = text[: max(0, budget - used - 1)]
            keep.add(i)
            used = budget
            dropped = True
        else:
            dropped = True
    return [cut.get(i, items[i][1]) for i in range(len(items)) if i in keep], dropped


def _slot(header: str, body_lines: list[str], empty_marker: str, truncated: bool) -> str:
    if not body_lines:
        body_lines = [empty_marker]
    if truncated:
        body_lines = body_lines + [TRUNCATED]
    return "\n".join([header, *body_lines])


def _render_payload(payload: Any) -> str:
    if isinstance(payload, dict):
        parts = []
        for k in sorted(payload):
            parts.append(f"    {k}: {canonical_json(payload[k])}")
        return "\n".join(parts)
    return f"    {canonical_json(payload)}"


@dataclass
class EvidenceContext:
    package_id: str
    budget: int = DEFAULT_BUDGET
    iteration: int = 0
    feedback: BuildFeedback | None = None
    history: list[HistoryEntry] = field(default_factory=list)
    findings: dict[str, CachedFinding] = field(default_factory=dict)
    knowledge: list["RetrievedKnowledge"] = field(default_factory=list)
    build_terminal: bool = False
    relevance_threshold: float = 0.15
    budgets: SlotBudgets = field(default_factory=SlotBudgets)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    # -- mutation -----------------------------------------------------------

    def record_feedback(self, fb: BuildFeedback) -> "EvidenceContext":
        """Store ``fb`` as the only feedback; earlier feedback is discarded."""
        if fb.iteration != self.iteration:
            raise BoundaryViolation(
                f"feedback for iteration {fb.iteration} recorded at iteration {self.iteration}"
            )
        self.feedback = fb
        if not fb.initial:
            self.build_terminal = True
        self._invalidate_stale()
        return self

    def next_sequence(self) -> int:
        seqs = [h.sequence for h in self.history if h.iteration == self.iteration]
        return max(seqs) + 1 if seqs else 0

    def append_history(self, entry: HistoryEntry) -> "EvidenceContext":
        if entry.iteration != self.iteration:
            raise BoundaryViolation(
                f"history entry for iteration {entry.iteration} appended at iteration {self.iteration}"
            )
        if any(h.iteration == entry.iteration and h.sequence == entry.sequence for h in self.history):
            raise DuplicateEntryError(f"history already has ({entry.iteration}, {entry.sequence})")
        expected = self.next_sequence()
        if entry.sequence != expected:
            raise PreconditionError(f"expected sequence {expected}, got {entry.sequence}")
        self.history.append(entry)
        return self

    def mark_validated(self, iteration: int, result: ValidationResult) -> "EvidenceContext":
        """Attach ``result`` to every pending entry of ``iteration``."""
        result = ValidationResult(result)
        if result is ValidationResult.PENDING:
            raise ValueError("cannot mark entries back to pending")
        pending = [
            h for h in self.history
            if h.iteration == iteration and h.validated is ValidationResult.PENDING
        ]
        if not pending:
            log.warning("mark_validated: no pending entries at iteration %d", iteration)
            return self
        for h in pending:
            h.validated = result
        return self

    def cache_finding(self, key: str, payload: Any) -> CachedFinding:
        finding = CachedFinding.create(key, self.iteration, payload)
        self.findings[key] = finding
        return finding

    def cached(self, key: str) -> CachedFinding | None:
        f = self.findings.get(key)
        return f if f is not None and f.iteration == self.iteration else None

    def invalidate_findings(self) -> None:
        """Drop every finding (used when an artifact changes mid-iteration)."""
        self.findings.clear()

    def _invalidate_stale(self) -> None:
        for key in [k for k, f in self.findings.items() if f.iteration < self.iteration]:
            del self.findings[key]

    def set_knowledge(self, retrieved: Sequence["RetrievedKnowledge"]) -> "EvidenceContext":
        self.knowledge = sorted(retrieved, key=lambda r: (-r.score, r.entry.id))
        return self

    def advance_iteration(self) -> "EvidenceContext":
        if not self.build_terminal:
            raise PreconditionError(
                f"iteration {self.iteration} has no terminal build yet"
            )
        if self.iteration + 1 >= self.budget:
            raise BudgetExhausted(
                f"budget {self.budget} allows iterations 0..{self.budget - 1}"
            )
        self.iteration += 1
        self.build_terminal = False
        self.findings.clear()
        return self

    # -- rendering ----------------------------------------------------------

    def do_not_repeat(self) -> list[tuple[str, RepairKind, int]]:
        """``(target_path, action_kind, first failed iteration)`` for failed edits."""
        rules: dict[tuple[str, RepairKind], int] = {}
        for h in self.history:
            if h.validated is ValidationResult.CONFIRMED_FAILED:
                rules.setdefault((h.target_path, h.action_kind), h.iteration)
        return [(p, k, it) for (p, k), it in rules.items()]

    def _feedback_slot(self) -> str:
        fb = self.feedback
        if fb is None:
            return _slot(SLOT_HEADERS[0], [], "(none: no build feedback yet)", False)
        head = [
            f"iteration: {fb.iteration}",
            f"status: {fb.status.value}",
            f"complete: {'yes' if fb.complete else 'no (partial feedback)'}",
            f"log: {fb.log_ref or '(none)'}",
        ]
        if fb.last_observed_state:
            head.append(f"last observed state: {fb.last_observed_state}")
        if not fb.signals:
            head.append("signals: (none)")
            return _slot(SLOT_HEADERS[0], head, "", False)
        head.append("signals:")
        items = []
        for n, s in enumerate(fb.signals, start=1):
            lines = [
                f"  [{n}] stage={s.stage.value} lines={s.line_span[0]}-{s.line_span[1]} rank={s.severity_rank}",
                f"      template: {s.template}",
                f"      keywords: {', '.join(s.keywords)}",
                "      window:",
                *(f"        | {w}" for w in s.window),
            ]
            items.append((s.severity_rank, "\n".join(lines)))
        budget = self.budgets.feedback - sum(len(h) + 1 for h in head)
        kept, truncated = _fit(items, max(budget, 0))
        return _slot(SLOT_HEADERS[0], head + kept, "", truncated)

    def _history_slot(self) -> str:
        if not self.history:
            return _slot(SLOT_HEADERS[1], [], "(no prior edits)", False)
        rules = self.do_not_repeat()
        rule_lines = ["do-not-repeat:"] + [
            f"  - DO NOT repeat {k.value} on {p} (failed at iteration {it})" for p, k, it in rules
        ] if rules else ["do-not-repeat: (none)"]
        items = []
        n = len(self.history)
        for idx, h in enumerate(self.history):
            diff_lines = h.diff_summary.splitlines()[:12]
            text = "\n".join(
                [f"  - iter {h.iteration} seq {h.sequence} {h.action_kind.value} {h.target_path} [{h.validated.value}]"]
                + [f"      {d}" for d in diff_lines]
            )
            items.append((n - idx, text))  # newest first
        budget = self.budgets.history - sum(len(r) + 1 for r in rule_lines) - len("edits:") - 1
        kept, truncated = _fit(items, max(budget, 0))
        return _slot(SLOT_HEADERS[1], rule_lines + ["edits:"] + kept, "", truncated)

    def _findings_slot(self) -> str:
        current = [f for f in self.findings.values() if f.iteration == self.iteration]
        if not current:
            return _slot(SLOT_HEADERS[2], [], "(none)", False)
        items = []
        for rank, f in enumerate(sorted(current, key=lambda f: f.key)):
            text = f"  - {f.key} id={f.stable_id[:16]} iteration={f.iteration}\n{_render_payload(f.payload)}"
            items.append((rank, text))
        kept, truncated = _fit(items, self.budgets.findings)
        return _slot(SLOT_HEADERS[2], kept, "(none)", truncated)

    def _knowledge_slot(self) -> str:
        relevant = [k for k in self.knowledge if k.score >= self.relevance_threshold]
        if not relevant:
            return _slot(SLOT_HEADERS[3], [], "(none relevant)", False)
        items = []
        for rank, r in enumerate(relevant):
            e = r.entry
            items.append((rank, f"  - [{e.id}] isa={e.isa} score={r.score:.3f}\n    {e.text}"))
        kept, truncated = _fit(items, self.budgets.knowledge)
        return _slot(SLOT_HEADERS[3], kept, "(none relevant)", truncated)

    def fuse(self) -> PromptDocument:
        """Render the prompt for the current iteration (pure; no mutation)."""
        return PromptDocument(
            rules_section=RULES,
            slot_feedback=self._feedback_slot(),
            slot_history=self._history_slot(),
            slot_findings=self._findings_slot(),
            slot_knowledge=self._knowledge_slot(),
            workflow_section=WORKFLOW,
            feedback_status=self.feedback.status.value if self.feedback else None,
        )

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": CONTEXT_SCHEMA,
            "package_id": self.package_id,
            "budget": self.budget,
            "iteration": self.iteration,
            "build_terminal": self.build_terminal,
            "relevance_threshold": self.relevance_threshold,
            "budgets": vars(self.budgets).copy(),
            "feedback": self.feedback.to_dict() if self.feedback else None,
            "history": [h.to_dict() for h in self.history],
            "findings": {k: f.to_dict() for k, f in sorted(self.findings.items())},
            "knowledge": [k.to_dict() for k in self.knowledge],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceContext":
        from evident.knowledge import RetrievedKnowledge

        if d.get("schema") != CONTEXT_SCHEMA:
            raise ValueError(f"expected schema {CONTEXT_SCHEMA}, got {d.get('schema')!r}")
        return cls(
            package_id=d["package_id"],
            budget=d["budget"],
            iteration=d["iteration"],
            feedback=BuildFeedback.from_dict(d["feedback"]) if d.get("feedback") else None,
            history=[HistoryEntry.from_dict(h) for h in d["history"]],
            findings={
                k: CachedFinding.create(f["key"], f["iteration"], f["payload"])
                for k, f in d["findings"].items()
            },
            knowledge=[RetrievedKnowledge.from_dict(k) for k in d["knowledge"]],
            build_terminal=d.get("build_terminal", False),
            relevance_threshold=d.get("relevance_threshold", 0.15),
            budgets=SlotBudgets(**d.get("budgets", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvidenceContext":
        return cls.from_dict(json.loads(text))
