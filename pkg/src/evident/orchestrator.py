"""End-to-end repair sessions and batch summaries.

:func:`run_session` boots the evidence context from the reproduced failure
log, then for each iteration renders the prompt, lets the driver call tools,
submits exactly one build, records its feedback and either stops or
advances. Nothing escapes as an exception: every problem ends up in the
:class:`SessionReport`.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Any, Callable, Sequence

from evident._util import sha256_bytes
from evident.agent import (
    EARLY_TERMINATION,
    VERDICTS,
    AgentTurn,
    Driver,
    Observation,
    RemoteDriver,
    Script,
    ScriptedDriver,
    ToolRegistry,
    enforce_workflow,
    http_transport,
)
from evident.build import (
    DEFAULT_WINDOW,
    BuildOutcome,
    BuildService,
    BuildSubmission,
    ObsBuildService,
    ObsConfig,
    SessionFixture,
    SimulatedBuildService,
    collect_payload,
    validate,
)
from evident.distill import UNCLASSIFIABLE, FailureCategory, LogDistiller, classify, load_keywords
from evident.enums import BuildStatus, Outcome, RepairKind, ValidationResult
from evident.errors import (
    BrokenArchiveError,
    BrokenInputError,
    BudgetExhausted,
    ConfigError,
    DriverUnavailable,
    EvidentError,
    MalformedTurnError,
    MissingMemberError,
    MissingRecipeError,
    NotFoundError,
    UnsupportedFormatError,
)
from evident.evidence import BuildFeedback, EvidenceContext, HistoryEntry
from evident.knowledge import KnowledgeRetriever, bundled_corpus, load_corpus
from evident.recipe import RecipeConstraints, list_dependency_gaps, parse_recipe
from evident.repair import (
    ArchiveHandle,
    RepairAction,
    apply_config_adaptation,
    apply_source_modification,
    diff_summary,
    read_file,
    repack,
    resolve_in_workspace,
    unpack,
    verify_archive,
)
from evident.workspace import LOG_DIR, PruneRules, inventory

log = logging.getLogger(__name__)

REPORT_SCHEMA = "report.v1"
MANIFEST_SCHEMA = "manifest.v1"
DEFAULT_MAX_TOOL_CALLS = 20


@dataclass(frozen=True)
class SessionConfig:
    """Per-session settings.

    ``driver`` is ``scripted:<script.json>`` or ``remote``; ``service`` is
    ``sim:<session.json>`` or ``real``. Both are only consulted when no
    driver or service object is handed to :func:`run_session`.
    """

    budget: int = 3
    window: float = DEFAULT_WINDOW
    isa: str = "riscv64"
    keyword_config: str | None = None
    corpus_path: str | None = None
    prune_rules: str | None = None
    driver: str = "scripted"
    service: str = "simulated"
    package_id: str | None = None
    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS
    poll_interval: float | None = None

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.window <= 0:
            raise ConfigError("window must be > 0")
        if self.max_tool_calls < 1:
            raise ConfigError("max_tool_calls must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    prompt: str
    turns: list[AgentTurn] = field(default_factory=list)
    observations: list[dict] = field(default_factory=list)
    verdict: str = EARLY_TERMINATION
    outcome: BuildOutcome | None = None
    feedback: BuildFeedback | None = None
    history: list[HistoryEntry] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        o = self.outcome
        return {
            "iteration": self.iteration,
            "prompt": self.prompt,
            "turns": [t.to_dict() for t in self.turns],
            "observations": self.observations,
            "verdict": self.verdict,
            "outcome": None if o is None else {
                "status": o.status.value,
                "log_ref": o.log_ref,
                "last_observed_state": o.last_observed_state,
                "elapsed": o.elapsed,
            },
            "feedback": None if self.feedback is None else self.feedback.to_dict(),
            "history": [h.to_dict() for h in self.history],
            "errors": self.errors,
        }


@dataclass
class SessionReport:
    package_id: str
    outcome: Outcome = Outcome.FAILED
    iterations_used: int = 0
    iterations: list[IterationRecord] = field(default_factory=list)
    failure_category: FailureCategory | None = None
    time_r: float = 0.0
    time_b: float = 0.0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def verdicts(self) -> list[str]:
        return [r.verdict for r in self.iterations]

    @property
    def history(self) -> list[HistoryEntry]:
        return [h for r in self.iterations for h in r.history]

    @property
    def submissions(self) -> int:
        return sum(1 for r in self.iterations if r.outcome is not None)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "package_id": self.package_id,
            "outcome": self.outcome.value,
            "iterations_used": self.iterations_used,
            "failure_category": None if self.failure_category is None else self.failure_category.to_dict(),
            "timings": {"repair_seconds": self.time_r, "build_seconds": self.time_b},
            "verdicts": self.verdicts,
            "diagnostics": self.diagnostics,
            "iterations": [r.to_dict() for r in self.iterations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=str)


def classify_outcome(last_outcome: BuildOutcome | None, errors: Sequence[BaseException] = ()) -> Outcome:
    """Success iff the last build succeeded; B/U on broken inputs or an unresolvable service state."""
    if any(isinstance(e, BrokenInputError) for e in errors):
        return Outcome.BROKEN_UNSOLVABLE
    if last_outcome is None:
        return Outcome.FAILED
    if last_outcome.status is BuildStatus.SUCCEEDED:
        return Outcome.SUCCESS
    if last_outcome.status is BuildStatus.UNRESOLVABLE:
        return Outcome.BROKEN_UNSOLVABLE
    return Outcome.FAILED


# -- preflight ---------------------------------------------------------------------


def find_recipe(workspace: Path, package_id: str | None = None) -> Path:
    specs = sorted(p for p in workspace.glob("*.spec") if p.is_file())
    if not specs:
        raise MissingRecipeError(f"no .spec file in {workspace}")
    for p in specs:
        if package_id and p.stem == package_id:
            return p
    return specs[0]


def preflight(workspace: Path, package_id: str | None, rules: PruneRules | None) -> tuple[Path, RecipeConstraints]:
    """Locate and parse the recipe and check every archive; raises BrokenInputError subclasses."""
    if not workspace.is_dir():
        raise MissingRecipeError(f"workspace {workspace} does not exist")
    recipe_path = find_recipe(workspace, package_id)
    rc = parse_recipe(recipe_path.read_text("utf-8", "replace"))
    for entry in inventory(workspace, rules).by_kind("archive"):
        try:
            verify_archive(workspace / entry.path)
        except UnsupportedFormatError:
            log.warning("%s: archive format not supported for editing", entry.path)
    return recipe_path, rc


# -- tool dispatch -----------------------------------------------------------------


def _recipe_summary(rc: RecipeConstraints, gaps: list[str]) -> dict:
    d = rc.to_dict()
    return {
        "name": d["name"],
        "version": d["version"],
        "build_requires": d["build_requires"],
        "requires": d["requires"],
        "macros": d["macros"],
        "sources": d["sources"],
        "patches": d["patches"],
        "stages": {k: len(v) for k, v in d["stages"].items() if v},
        "arch_conditionals": d["arch_conditionals"],
        "dependency_gaps": gaps,
    }


def _manifest_text(handle_members: dict) -> bytes:
    return "".join(f"{m.path} {m.sha256} {m.mode:o}\n" for m in sorted(handle_members.values(), key=lambda m: m.path)).encode()


class ToolDispatcher:
    """Executes registry tools against one workspace and evidence context."""

    def __init__(self, workspace: Path, ctx: EvidenceContext, distiller: LogDistiller,
                 rules: PruneRules | None, recipe_path: Path, initial_log: Path | None):
        self.workspace = workspace
        self.ctx = ctx
        self.distiller = distiller
        self.rules = rules
        self.recipe_path = recipe_path
        self.initial_log = initial_log
        self.handles: dict[str, ArchiveHandle] = {}

    def __call__(self, turn: AgentTurn) -> Any:
        return getattr(self, "tool_" + turn.tool)(**turn.arguments)

    def _cached(self, key: str, produce: Callable[[], Any]) -> Any:
        hit = self.ctx.cached(key)
        if hit is not None:
            return hit.payload
        return self.ctx.cache_finding(key, produce()).payload

    def _record(self, entry: HistoryEntry) -> dict:
        self.ctx.append_history(entry)
        self.ctx.invalidate_findings()
        return {"recorded": f"iter {entry.iteration} seq {entry.sequence}", "target": entry.target_path,
                "diff": entry.diff_summary}

    def _current_log(self) -> Path | None:
        fb = self.ctx.feedback
        if fb is not None and fb.log_ref:
            return Path(fb.log_ref)
        return self.initial_log

    # analysis

    def tool_distill_log(self, log: str | None = None) -> Any:
        path = resolve_in_workspace(self.workspace, log) if log else self._current_log()
        if path is None or not path.is_file():
            raise NotFoundError("no build log available")

        def produce():
            signals = self.distiller.distill_one(path.read_bytes())
            return {"log": path.name, "signals": [s.to_dict() for s in signals],
                    "category": classify(signals).to_dict()}

        return self._cached(f"failure_signals:{path.name}", produce)

    def tool_parse_recipe(self, path: str | None = None) -> Any:
        target = resolve_in_workspace(self.workspace, path) if path else self.recipe_path
        if not target.is_file():
            raise NotFoundError(f"{path} does not exist")

        def produce():
            rc = parse_recipe(target.read_text("utf-8", "replace"))
            signals = self.ctx.feedback.signals if self.ctx.feedback else ()
            return _recipe_summary(rc, list_dependency_gaps(rc, signals))

        return self._cached("recipe_constraints", produce)

    def tool_inventory(self) -> Any:
        def produce():
            inv = inventory(self.workspace, self.rules).to_dict()
            inv["root"] = "."
            return inv

        return self._cached("structure_inventory", produce)

    def tool_read_file(self, path: str, archive: str | None = None) -> Any:
        content = read_file(self._handle(archive), path) if archive else read_file(self.workspace, path)
        if isinstance(content, bytes):
            return f"<binary, {len(content)} bytes>"
        return content

    # repair

    def _handle(self, archive: str, auto: bool = True) -> ArchiveHandle:
        if archive not in self.handles:
            if not auto:
                raise NotFoundError(f"{archive} is not unpacked")
            self.tool_unpack(archive)
        return self.handles[archive]

    def tool_unpack(self, archive: str) -> Any:
        handle = self.handles.get(archive)
        if handle is None or not handle.scratch_dir.is_dir():
            handle = unpack(resolve_in_workspace(self.workspace, archive), self.workspace)
            self.handles[archive] = handle
        return {"archive": archive, "format": handle.format, "members": [m[0] for m in handle.member_manifest]}

    def tool_edit_member(self, archive: str, member: str, content: str | None = None,
                         create: bool = False, delete: bool = False) -> Any:
        handle = self._handle(archive)
        if PurePosixPath(member).as_posix() not in handle.members and not create and not delete:
            raise MissingMemberError(f"{archive} has no member {member!r}; pass create=true to add it")
        return self.tool_apply_source(member, content, archive=archive, delete=delete)

    def tool_repack(self, archive: str) -> Any:
        handle = self._handle(archive, auto=False)
        return self._repack(archive, handle)

    def _repack(self, archive: str, handle: ArchiveHandle) -> dict:
        before = _manifest_text(handle.original)
        repack(handle)
        after = _manifest_text(handle.members)
        entry = HistoryEntry(
            iteration=self.ctx.iteration,
            sequence=self.ctx.next_sequence(),
            action_kind=RepairKind.ARCHIVE_REPACKAGE,
            target_path=archive,
            diff_summary=diff_summary(before, after, archive + " (member manifest)"),
            content_hash=sha256_bytes(after),
        )
        return self._record(entry)

    def tool_apply_config(self, path: str, content: str, rationale: str = "") -> Any:
        action = RepairAction(RepairKind.CONFIG_ADAPTATION, path, content, rationale)
        return self._record(apply_config_adaptation(self.workspace, action, self.ctx.iteration, self.ctx.next_sequence()))

    def tool_apply_source(self, path: str, content: str | None = None, archive: str | None = None,
                          rationale: str = "", delete: bool = False) -> Any:
        if content is None and not delete:
            raise ValueError("content is required unless delete is true")
        action = RepairAction(RepairKind.SOURCE_MODIFICATION, path, content or "", rationale, delete)
        target = self._handle(archive) if archive else self.workspace
        return self._record(apply_source_modification(target, action, self.ctx.iteration, self.ctx.next_sequence()))

    def repack_dirty(self) -> list[str]:
        """Repack every edited archive; returns their names."""
        done = []
        for archive, handle in sorted(self.handles.items()):
            if handle.dirty:
                self._repack(archive, handle)
                done.append(archive)
        return done


# -- session -----------------------------------------------------------------------------


def make_driver(spec: str, registry: ToolRegistry | None = None) -> Driver:
    if spec.startswith("scripted:"):
        return ScriptedDriver(Script.load(spec.split(":", 1)[1]), registry)
    if spec == "remote":
        url = os.environ.get("EVIDENT_DRIVER_URL")
        if not url:
            raise ConfigError("remote driver needs EVIDENT_DRIVER_URL")
        model = os.environ.get("EVIDENT_DRIVER_MODEL", "default")
        temperature = float(os.environ.get("EVIDENT_DRIVER_TEMPERATURE", "1.0"))
        return RemoteDriver(http_transport(url), model, temperature, registry)
    raise ConfigError(f"unknown driver {spec!r}; use scripted:<script.json> or remote")


def make_service(spec: str) -> BuildService:
    if spec.startswith("sim:"):
        return SimulatedBuildService(SessionFixture.load(spec.split(":", 1)[1]))
    if spec == "real":
        return ObsBuildService(ObsConfig.from_env())
    raise ConfigError(f"unknown service {spec!r}; use sim:<session.json> or real")


def _load_retriever(config: SessionConfig) -> KnowledgeRetriever | None:
    path = Path(config.corpus_path) if config.corpus_path else None
    if path is None and config.isa:
        candidate = bundled_corpus(config.isa)
        path = candidate if candidate.is_file() else None
    if path is None:
        return None
    return KnowledgeRetriever(isa=config.isa if config.isa else None).fit(load_corpus(path))


def _brief(result: Any, limit: int = 2000) -> Any:
    text = result if isinstance(result, str) else json.dumps(result, sort_keys=True, default=str)
    return text if len(text) <= limit else text[:limit] + " [truncated]"


def run_session(
    config: SessionConfig,
    workspace: str | Path,
    initial_log: str | Path | None,
    driver: Driver | None = None,
    service: BuildService | None = None,
    retriever: KnowledgeRetriever | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> SessionReport:
    started = clock()
    workspace = Path(workspace)
    report = SessionReport(package_id=config.package_id or workspace.name)
    errors: list[BaseException] = []
    last_outcome: BuildOutcome | None = None

    def finish() -> SessionReport:
        report.outcome = classify_outcome(last_outcome, errors)
        report.time_r = max(0.0, clock() - started - report.time_b)
        return report

    try:
        rules = PruneRules.from_file(config.prune_rules) if config.prune_rules else None
        distiller = LogDistiller(keywords=load_keywords(config.keyword_config) if config.keyword_config else None).fit()
        registry = ToolRegistry()
        driver = driver or make_driver(config.driver, registry)
        service = service or make_service(config.service)
        if retriever is None:
            retriever = _load_retriever(config)
    except (EvidentError, OSError, ValueError) as exc:
        report.diagnostics.append(f"configuration: {exc}")
        errors.append(exc)
        return finish()

    try:
        recipe_path, rc = preflight(workspace, config.package_id, rules)
    except BrokenInputError as exc:
        report.diagnostics.append(f"preflight: {type(exc).__name__}: {exc}")
        errors.append(exc)
        return finish()
    except EvidentError as exc:
        # structural recipe errors are left for the agent to repair
        report.diagnostics.append(f"preflight: {type(exc).__name__}: {exc}")
        recipe_path, rc = find_recipe(workspace, config.package_id), None
    if config.package_id is None and rc is not None and rc.name:
        report.package_id = rc.name

    ctx = EvidenceContext(report.package_id, budget=config.budget)
    log_path = Path(initial_log) if initial_log else None
    if log_path is not None:
        try:
            signals = distiller.distill_one(log_path.read_bytes())
        except OSError as exc:
            report.diagnostics.append(f"initial log unreadable: {exc}")
            signals = []
        ctx.record_feedback(BuildFeedback(0, BuildStatus.FAILED, str(log_path), tuple(signals), initial=True))
        report.failure_category = classify(signals) if signals else UNCLASSIFIABLE
        if retriever is not None:
            ctx.set_knowledge(retriever.retrieve(signals))

    tools = ToolDispatcher(workspace, ctx, distiller, rules, recipe_path, log_path)
    log_dir = workspace / LOG_DIR

    while True:
        k = ctx.iteration
        rec = IterationRecord(k, ctx.fuse().render())
        report.iterations.append(rec)
        report.iterations_used = k + 1
        observations: list[Observation] = []
        submitted = False
        terminate = False

        for _ in range(config.max_tool_calls):
            try:
                turn = driver.next_turn(ctx.fuse(), observations)
            except (MalformedTurnError, DriverUnavailable) as exc:
                rec.errors.append(f"driver: {type(exc).__name__}: {exc}")
                break
            except Exception as exc:  # noqa: BLE001 - crash containment
                rec.errors.append(f"driver crashed: {type(exc).__name__}: {exc}")
                break
            if turn.kind == "final":
                rec.observations.append({"final": turn.note})
                break
            rec.turns.append(turn)
            if turn.tool == "submit_build":
                submitted = True
                break
            try:
                result = tools(turn)
                obs = Observation(turn, True, result)
            except BrokenArchiveError as exc:
                errors.append(exc)
                rec.errors.append(f"{turn.tool}: {exc}")
                terminate = True
                break
            except Exception as exc:  # noqa: BLE001 - tool failures are observations
                obs = Observation(turn, False, f"{type(exc).__name__}: {exc}")
            observations.append(obs)
            rec.observations.append({"tool": turn.tool, "ok": obs.ok, "result": _brief(obs.result)})
        else:
            rec.errors.append(f"tool-call cap {config.max_tool_calls} reached")

        rec.verdict = enforce_workflow(rec.turns, registry)
        if terminate:
            rec.history = [h for h in ctx.history if h.iteration == k]
            report.diagnostics.append(f"iteration {k}: broken input, session stopped")
            return finish()
        if not submitted:
            rec.errors.append("no submit_build issued; submitting on the agent's behalf")

        try:
            for name in tools.repack_dirty():
                rec.errors.append(f"{name} was edited but not repacked; repacked before submission")
            submission = BuildSubmission(report.package_id, k, collect_payload(workspace))
            fb, outcome = validate(service, submission, config.window, log_dir, distiller,
                                   poll_interval=config.poll_interval)
            report.time_b += outcome.elapsed
            last_outcome = outcome
        except Exception as exc:  # noqa: BLE001 - crash containment
            rec.errors.append(f"build: {type(exc).__name__}: {exc}")
            fb = BuildFeedback(k, BuildStatus.FAILED, complete=False, last_observed_state=f"error: {exc}")
            outcome = BuildOutcome(BuildStatus.FAILED, None, f"error: {exc}", 0.0)
            last_outcome = outcome
        rec.outcome, rec.feedback = outcome, fb
        ctx.record_feedback(fb)
        if any(h.iteration == k and h.validated is ValidationResult.PENDING for h in ctx.history):
            result = (ValidationResult.CONFIRMED_SUCCEEDED if fb.status is BuildStatus.SUCCEEDED
                      else ValidationResult.CONFIRMED_FAILED)
            ctx.mark_validated(k, result)
        rec.history = [replace(h) for h in ctx.history if h.iteration == k]
        if retriever is not None and fb.signals:
            ctx.set_knowledge(retriever.retrieve(fb.signals))

        if fb.status in (BuildStatus.SUCCEEDED, BuildStatus.UNRESOLVABLE):
            return finish()
        try:
            ctx.advance_iteration()
        except BudgetExhausted:
            return finish()


# -- batch ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchItem:
    workspace: str
    initial_log: str | None = None
    package_id: str | None = None
    driver: str | None = None
    service: str | None = None
    driver_factory: Callable[[], Driver] | None = None
    service_factory: Callable[[], BuildService] | None = None


@dataclass
class BatchSummary:
    reports: list[SessionReport]

    def count(self, outcome: Outcome) -> int:
        return sum(1 for r in self.reports if r.outcome is outcome)

    @property
    def total(self) -> int:
        return len(self.reports)

    @property
    def success(self) -> int:
        return self.count(Outcome.SUCCESS)

    @property
    def failed(self) -> int:
        return self.count(Outcome.FAILED)

    @property
    def broken(self) -> int:
        return self.count(Outcome.BROKEN_UNSOLVABLE)

    @property
    def success_rate(self) -> float | None:
        return None if not self.reports else 100.0 * self.success / self.total

    @property
    def success_rate_text(self) -> str:
        rate = self.success_rate
        return "n/a" if rate is None else f"{rate:.2f}"

    @property
    def mean_time_r(self) -> float:
        return sum(r.time_r for r in self.reports) / self.total if self.reports else 0.0

    @property
    def mean_time_b(self) -> float:
        return sum(r.time_b for r in self.reports) / self.total if self.reports else 0.0

    @property
    def verdict_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(VERDICTS, 0)
        for r in self.reports:
            for v in r.verdicts:
                counts[v] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "packages": self.total,
            "success": self.success,
            "failed": self.failed,
            "broken_unsolvable": self.broken,
            "success_rate": self.success_rate_text,
            "mean_time_r": round(self.mean_time_r, 3),
            "mean_time_b": round(self.mean_time_b, 3),
            "verdicts": self.verdict_counts,
            "outcomes": {r.package_id: r.outcome.value for r in self.reports},
        }

    def table(self) -> str:
        return (
            f"{'Packages':>8} {'Success':>7} {'Failed':>6} {'B/U':>4} {'Rate(%)':>8} {'Time-R':>8} {'Time-B':>8}\n"
            f"{self.total:>8} {self.success:>7} {self.failed:>6} {self.broken:>4} "
            f"{self.success_rate_text:>8} {self.mean_time_r:>8.2f} {self.mean_time_b:>8.2f}"
        )


def _run_item(config: SessionConfig, item: BatchItem) -> SessionReport:
    cfg = replace(
        config,
        package_id=item.package_id or config.package_id,
        driver=item.driver or config.driver,
        service=item.service or config.service,
    )
    try:
        driver = item.driver_factory() if item.driver_factory else None
        service = item.service_factory() if item.service_factory else None
        return run_session(cfg, item.workspace, item.initial_log, driver, service)
    except Exception as exc:  # noqa: BLE001 - a batch never aborts
        report = SessionReport(item.package_id or Path(item.workspace).name)
        report.diagnostics.append(f"session crashed: {type(exc).__name__}: {exc}")
        return report


def run_batch(config: SessionConfig, items: Sequence[BatchItem], workers: int = 1) -> BatchSummary:
    """Run independent sessions (optionally in parallel) and summarize them."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda it: _run_item(config, it), items))
    else:
        reports = [_run_item(config, it) for it in items]
    return BatchSummary(reports)


def load_manifest(path: str | Path) -> list[BatchItem]:
    """Read a ``manifest.v1`` batch file; relative paths resolve against its directory.

    ``{"schema": "manifest.v1", "packages": [{"workspace": ..., "log": ...,
    "package_id": ..., "script": ..., "session": ...}]}``
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if data.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError(f"manifest must declare schema {MANIFEST_SCHEMA}")
    base = path.parent

    def rel(p: str | None) -> str | None:
        return None if p is None else str(base / p)

    items = []
    for raw in data.get("packages", []):
        items.append(BatchItem(
            workspace=rel(raw["workspace"]),
            initial_log=rel(raw.get("log")),
            package_id=raw.get("package_id"),
            driver=f"scripted:{rel(raw['script'])}" if raw.get("script") else raw.get("driver"),
            service=f"sim:{rel(raw['session'])}" if raw.get("session") else raw.get("service"),
        ))
    return items
