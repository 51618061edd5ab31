"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py`` to get the PASS/FAIL table printed at
the end of the session (see ``conftest.py``).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import scenarios as S
from archives import FORMATS, make_archive, oracle_manifest
from evident.agent import EARLY_TERMINATION, MISORDERED, OK
from evident.build import BuildSubmission, SessionFixture, SimulatedBuildService, collect_payload, validate
from evident.cli import main
from evident.distill import FailureSignal, condense, distill
from evident.drain import DrainTemplateMiner, template_matches
from evident.enums import BuildStage, BuildStatus, Outcome, RepairKind, ValidationResult
from evident.errors import (
    BoundaryViolation,
    BrokenArchiveError,
    BrokenRecipeError,
    BudgetExhausted,
    DuplicateEntryError,
    PreconditionError,
    RecipeStructureError,
)
from evident.evidence import SLOT_HEADERS, BuildFeedback, EvidenceContext, HistoryEntry
from evident.knowledge import KnowledgeEntry, KnowledgeRetriever, RetrievedKnowledge
from evident.orchestrator import BatchItem, BatchSummary, SessionConfig, SessionReport, run_batch, run_session
from evident.recipe import parse_recipe
from evident.repair import edit_member, repack, unpack

FIXTURES = Path(__file__).parent / "fixtures"

# -- 1. evidence laws ---------------------------------------------------------------

OPS = st.lists(st.tuples(
    st.sampled_from(["edit", "bad_edit", "feedback", "stale_feedback", "mark", "advance"]),
    st.sampled_from(list(RepairKind)),
    st.sampled_from(["p.spec", "src/a.c", "p-1.0.tar.gz::p-1.0/x.h"]),
    st.sampled_from([BuildStatus.FAILED, BuildStatus.SUCCEEDED, BuildStatus.TIMEOUT]),
    st.booleans(),
), max_size=25)


def _feedback(iteration, status):
    if status is BuildStatus.TIMEOUT:
        return BuildFeedback(iteration, status, complete=False, last_observed_state="building")
    return BuildFeedback(iteration, status, "log")


def _key(h):
    return h.iteration, h.sequence, h.action_kind, h.target_path, h.diff_summary


def check_evidence_laws(budget, ops):
    ctx = EvidenceContext("p", budget=budget)
    feedback, terminal = None, False
    keys, validated = [], []
    closed = []  # history keys at the end of each iteration
    for op, kind, path, status, flag in ops:
        it = ctx.iteration
        if op == "edit":
            ctx.append_history(HistoryEntry(it, ctx.next_sequence(), kind, path, "-a\n+b"))
        elif op == "bad_edit":
            seq = ctx.next_sequence()
            wrong = HistoryEntry(it + 1, 0, kind, path, "") if flag else HistoryEntry(it, seq + 1, kind, path, "")
            with pytest.raises((BoundaryViolation, PreconditionError)):
                ctx.append_history(wrong)
            if seq:
                with pytest.raises(DuplicateEntryError):
                    ctx.append_history(HistoryEntry(it, seq - 1, kind, path, ""))
        elif op == "feedback":
            feedback, terminal = _feedback(it, status), True
            ctx.record_feedback(feedback)
        elif op == "stale_feedback":
            with pytest.raises(BoundaryViolation):
                ctx.record_feedback(_feedback(it + 1 if flag else it - 1, status))
        elif op == "mark":
            ctx.mark_validated(it, ValidationResult.CONFIRMED_FAILED if flag else ValidationResult.CONFIRMED_SUCCEEDED)
        elif op == "advance":
            if not terminal:
                with pytest.raises(PreconditionError):
                    ctx.advance_iteration()
            elif it + 1 >= budget:
                with pytest.raises(BudgetExhausted):
                    ctx.advance_iteration()
            else:
                closed.append([_key(h) for h in ctx.history])
                ctx.advance_iteration()
                terminal = False

        # single-feedback law: exactly the last accepted feedback, never a future one
        assert ctx.feedback is feedback
        assert feedback is None or feedback.iteration <= ctx.iteration
        # history monotonicity: nothing removed or rewritten, validation never reverts
        now = [_key(h) for h in ctx.history]
        assert now[:len(keys)] == keys
        states = [h.validated for h in ctx.history]
        assert all(old is ValidationResult.PENDING or old is new for old, new in zip(validated, states))
        keys, validated = now, states
        # prefix property at every iteration end
        assert all(now[:len(snap)] == snap for snap in closed)
        # budget bound
        assert 0 <= ctx.iteration < budget
        assert [h.sequence for h in ctx.history if h.iteration == ctx.iteration] == \
            list(range(ctx.next_sequence()))


def test_criterion_1_evidence_laws():
    runs = []

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.integers(1, 4), OPS)
    def prop(budget, ops):
        runs.append(1)
        check_evidence_laws(budget, ops)

    start = time.perf_counter()
    prop()
    elapsed = time.perf_counter() - start
    assert len(runs) >= 1000
    assert elapsed < 10.0, f"{elapsed:.2f}s"


# -- 2. prompt contract -------------------------------------------------------------

SIG = FailureSignal(BuildStage.BUILD, "main.c:3:10: fatal error: zlib.h: No such file or directory",
                    ("fatal error",), ("main.c:3:10: fatal error: zlib.h: No such file or directory",), (10, 10), 0)


def golden_context():
    ctx = EvidenceContext("foo")
    ctx.record_feedback(BuildFeedback(0, BuildStatus.FAILED, "L0", (SIG,)))
    ctx.append_history(HistoryEntry(0, 0, RepairKind.CONFIG_ADAPTATION, "foo.spec",
                                    "-BuildRequires:  zlib\n+BuildRequires:  zlib-devel"))
    ctx.mark_validated(0, ValidationResult.CONFIRMED_FAILED)
    ctx.advance_iteration()
    ctx.record_feedback(BuildFeedback(1, BuildStatus.FAILED, "L1", (SIG,)))
    ctx.cache_finding("recipe_constraints", {"name": "foo", "build_requires": ["gcc", "zlib-devel"]})
    ctx.set_knowledge([RetrievedKnowledge(KnowledgeEntry("hdr", "any", "missing header: add the -devel package"), 0.42),
                       RetrievedKnowledge(KnowledgeEntry("noise", "any", "unrelated"), 0.05)])
    return ctx


def test_criterion_2_prompt_contract():
    ctx = golden_context()
    text = ctx.fuse().render()
    assert text == (FIXTURES / "prompt" / "golden.txt").read_text()
    assert [line for line in text.splitlines() if line.startswith("## ")] == list(SLOT_HEADERS)
    empty = EvidenceContext("foo").fuse()
    assert "(none: no build feedback yet)" in empty.slot_feedback
    assert "(no prior edits)" in empty.slot_history
    assert "(none)" in empty.slot_findings
    assert "(none relevant)" in empty.slot_knowledge
    for h in ctx.history:
        if h.validated is ValidationResult.CONFIRMED_FAILED:
            assert f"DO NOT repeat {h.action_kind.value} on {h.target_path}" in ctx.fuse().slot_history
    assert ctx.fuse().render().encode() == text.encode()
    assert EvidenceContext.from_json(ctx.to_json()).fuse().render().encode() == text.encode()


# -- 3. distillation oracle equivalence ---------------------------------------------


def test_criterion_3_distillation_recall():
    from test_distill import oracle_paths

    plants = json.loads((FIXTURES / "logs" / "plants.json").read_text())
    planted_logs = [name for name, ps in plants.items() if ps]
    assert len(planted_logs) >= 10
    found = total = 0
    for name in plants:
        raw = (FIXTURES / "logs" / f"{name}.log").read_text()
        signals = distill(raw)
        for plant in plants[name]:
            total += 1
            covering = [s for s in signals if s.line_span[0] <= plant["line"] <= s.line_span[1]]
            hit = any(oracle_paths(plant["needle"]) in w for s in covering for w in s.window)
            if hit and {s.stage.value for s in covering} == {plant["stage"]}:
                found += 1
        assert sum(len(line) for seg in condense(raw) for line in seg.lines) <= len(raw)
    assert found / total == 1.0, f"recall {found}/{total}"


# -- 4. drain conformance -----------------------------------------------------------


def test_criterion_4_drain_gold():
    cases = json.loads((FIXTURES / "drain" / "gold.json").read_text())["cases"]
    assert any(c["params"]["depth"] == 4 and c["params"]["sim_threshold"] == 0.4 for c in cases)
    for case in cases:
        miner = DrainTemplateMiner(**case["params"]).fit(case["lines"])
        assert [list(t) for t in miner.templates_] == case["templates"], case["name"]
        for line, label in zip(case["lines"], miner.labels_):
            assert template_matches(miner.clusters_[label].template_str, line)


# -- 5. TF-IDF oracle ---------------------------------------------------------------


def test_criterion_5_tfidf_oracle():
    from test_knowledge import CORPORA, QUERIES, oracle_scores

    assert 3 <= len(CORPORA) <= 5
    for name, corpus in CORPORA.items():
        r = KnowledgeRetriever(isa=None).fit(corpus)
        np.testing.assert_allclose(r.similarities(QUERIES[name]), oracle_scores([e.document for e in corpus],
                                                                                 QUERIES[name]), atol=1e-9)
        for e in corpus:
            assert abs(r.similarities(e.document).max() - 1.0) <= 1e-9
        assert np.all(r.similarities("quux frobnicate zzz") == 0.0)


# -- 6. recipe goldens --------------------------------------------------------------


def test_criterion_6_recipe_goldens():
    recipes = FIXTURES / "recipes"
    specs = sorted(recipes.glob("*.spec"))
    assert len(specs) >= 5
    for spec in specs:
        text = spec.read_text()
        rc = parse_recipe(text)
        assert json.loads(rc.to_json()) == json.loads((recipes / "golden" / f"{spec.stem}.json").read_text())
        assert len(rc.attribution) == len(text.splitlines())
    with pytest.raises(BrokenRecipeError):
        parse_recipe((recipes / "broken" / "noname.spec").read_text())
    with pytest.raises(RecipeStructureError) as info:
        parse_recipe((recipes / "broken" / "unbalanced_if.spec").read_text())
    assert info.value.line == 6


# -- 7. archive round-trip ----------------------------------------------------------

NAMES = st.text("abcdef", min_size=1, max_size=4)
TREES = st.dictionaries(st.lists(NAMES, min_size=1, max_size=3).map("/".join), st.binary(max_size=64),
                        min_size=1, max_size=5).filter(
    lambda t: not any(b.startswith(a + "/") for a in t for b in t if a != b))


def test_criterion_7_archive_round_trip(tmp_path_factory):
    runs = []

    @settings(max_examples=200, deadline=None, database=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.filter_too_much])
    @given(TREES, st.sampled_from(sorted(FORMATS)), st.data())
    def prop(tree, fmt, data):
        runs.append(fmt)
        path = make_archive(tmp_path_factory.mktemp("a"), fmt, tree)
        before = oracle_manifest(path)
        repack(unpack(path))
        assert oracle_manifest(path) == before
        victim = data.draw(st.sampled_from(sorted(tree)))
        handle = unpack(path)
        edit_member(handle, victim, tree[victim] + b"!")
        repack(handle)
        after = oracle_manifest(path)
        assert [k for k in before if before[k] != after[k]] == [victim]

    prop()
    assert len(runs) >= 200 and set(runs) == set(FORMATS)
    for fmt in FORMATS:
        path = make_archive(tmp_path_factory.mktemp("bad"), fmt, {"pkg-1.0/a.c": b"int a;\n" * 50})
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(BrokenArchiveError):
            unpack(path)


# -- 8. validation semantics --------------------------------------------------------


def test_criterion_8_validation_semantics(tmp_path):
    sc = S.hanging(tmp_path, delay=5.0)
    service = SimulatedBuildService(SessionFixture.load(sc.session))
    submission = BuildSubmission(sc.name, 0, tuple(collect_payload(sc.workspace)))
    poll = 0.1
    start = time.monotonic()
    fb, outcome = validate(service, submission, window=2.0, log_dir=tmp_path / "logs", poll_interval=poll)
    elapsed = time.monotonic() - start
    assert outcome.status is BuildStatus.TIMEOUT
    assert not fb.complete and fb.last_observed_state
    assert elapsed <= 2.0 + poll + 0.25, f"{elapsed:.2f}s"
    with pytest.raises(BoundaryViolation):
        service.submit(submission)

    harness = [S.converging(tmp_path / "h", f"c{k}", k) for k in (1, 2, 3)] + [
        S.never_fixed(tmp_path / "h"), S.unresolvable(tmp_path / "h"), S.misordered(tmp_path / "h"),
        S.no_submission(tmp_path / "h"), S.hanging(tmp_path / "h", delay=0.05)]
    for sc in harness:
        service = SimulatedBuildService(SessionFixture.load(sc.session))
        report = run_session(SessionConfig(driver=f"scripted:{sc.script}", poll_interval=0.01),
                             sc.workspace, sc.log, service=service)
        assert [s.iteration for s in service.accepted] == list(range(report.iterations_used)), sc.name
        assert report.submissions == len(service.accepted)


# -- 9. convergence shape -----------------------------------------------------------


def test_criterion_9_convergence_shape(tmp_path):
    start = time.perf_counter()
    successes = []
    for budget in (1, 2, 3):
        items = [BatchItem(str(sc.workspace), str(sc.log), sc.name, f"scripted:{sc.script}", f"sim:{sc.session}")
                 for sc in (S.converging(tmp_path / f"b{budget}", f"fix{k}", k) for k in (1, 2, 3))]
        successes.append(run_batch(SessionConfig(budget=budget), items).success)
    assert all(a <= b for a, b in zip(successes, successes[1:])), successes
    assert successes[-1] == 3
    assert time.perf_counter() - start < 30.0


# -- 10. outcome taxonomy -----------------------------------------------------------


def summary_of(success, failed, broken):
    return BatchSummary([SessionReport("s", Outcome.SUCCESS)] * success + [SessionReport("f", Outcome.FAILED)] * failed
                        + [SessionReport("b", Outcome.BROKEN_UNSOLVABLE)] * broken)


def test_criterion_10_outcome_taxonomy(tmp_path):
    for build in (S.missing_recipe, S.broken_archive, S.unresolvable):
        sc = build(tmp_path)
        report = run_session(SessionConfig(driver=f"scripted:{sc.script}", service=f"sim:{sc.session}"),
                             sc.workspace, sc.log)
        assert report.outcome is Outcome.BROKEN_UNSOLVABLE, sc.name

    def cli(sc):
        return main(["repair", "--workspace", str(sc.workspace), "--log", str(sc.log),
                     "--driver", f"scripted:{sc.script}", "--service", f"sim:{sc.session}"])

    assert cli(S.converging(tmp_path, "fine", 1)) == 0
    assert cli(S.never_fixed(tmp_path)) == 1
    # table rows: 118/59/42 of 219 and 13/195/11 of 219
    assert summary_of(118, 59, 42).success_rate_text == "53.88"
    assert summary_of(13, 195, 11).success_rate_text == "5.94"
    assert summary_of(2, 1, 0).success_rate_text == "66.67"


# -- 11. workflow auditing ----------------------------------------------------------


def test_criterion_11_workflow_auditing(tmp_path):
    scs = [S.misordered(tmp_path), S.no_submission(tmp_path), S.converging(tmp_path, "fine", 1)]
    summary = run_batch(SessionConfig(), [BatchItem(str(sc.workspace), str(sc.log), sc.name,
                                                    f"scripted:{sc.script}", f"sim:{sc.session}") for sc in scs])
    verdicts = {r.package_id: r.verdicts for r in summary.reports}
    assert verdicts[scs[0].name] == [MISORDERED]
    assert verdicts[scs[1].name] == [EARLY_TERMINATION]
    assert verdicts["fine"] == [OK]
    assert summary.to_dict()["verdicts"] == {OK: 1, MISORDERED: 1, EARLY_TERMINATION: 1}
