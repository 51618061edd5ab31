"""Build service contract, a replaying simulator, and timeout-bounded validation.

A service accepts exactly one submission per (package, iteration). The
:func:`validate` composition submits, polls until a terminal state or the
monitoring window expires, stores the new log locally and turns the result
into :class:`~evident.evidence.BuildFeedback`.
"""

from __future__ import annotations

import json
import logging
import io
import os
import tarfile
import time
import zipfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable

from evident._util import atomic_write, canonical_json, sha256_bytes, to_bytes
from evident.distill import LogDistiller
from evident.enums import BuildStatus
from evident.errors import (
    BoundaryViolation,
    ConfigError,
    InvalidTokenError,
    ScratchLeakError,
    TransportError,
)
from evident.evidence import BuildFeedback
from evident.repair import ARCHIVE_SEP
from evident.workspace import HISTORY_DIR, LOG_DIR, SCRATCH_DIR

log = logging.getLogger(__name__)

SESSION_SCHEMA = "session.v1"
DEFAULT_WINDOW = 600.0
REAL_POLL_INTERVAL = 10.0
SIM_POLL_INTERVAL = 0.05
MAX_TRANSPORT_RETRIES = 3

# Service-native state -> (BuildStatus, terminal). Unknown states are
# treated as terminal failures with the raw state preserved.
STATUS_TABLE: dict[str, tuple[BuildStatus | None, bool]] = {
    "succeeded": (BuildStatus.SUCCEEDED, True),
    "failed": (BuildStatus.FAILED, True),
    "unresolvable": (BuildStatus.UNRESOLVABLE, True),
    "broken": (BuildStatus.UNRESOLVABLE, True),
    "excluded": (BuildStatus.FAILED, True),
    "disabled": (BuildStatus.FAILED, True),
    "scheduled": (None, False),
    "dispatching": (None, False),
    "building": (None, False),
    "signing": (None, False),
    "finished": (None, False),
    "blocked": (None, False),
    "locked": (None, False),
}


def map_state(state: str) -> tuple[BuildStatus | None, bool]:
    """``(status, terminal)`` for a service-native state string."""
    return STATUS_TABLE.get(state, (BuildStatus.FAILED, True))


@dataclass(frozen=True)
class BuildOutcome:
    status: BuildStatus
    log_ref: str | None
    last_observed_state: str
    elapsed: float
    token: str = ""


@dataclass(frozen=True)
class BuildSubmission:
    package_id: str
    iteration: int
    payload: tuple[tuple[str, bytes], ...]
    submitted_at: float = field(default_factory=time.time)

    @property
    def digest(self) -> str:
        """Hash over sorted (path, content hash) pairs; timestamps excluded."""
        items = sorted((p, sha256_bytes(c)) for p, c in self.payload)
        return sha256_bytes(canonical_json(items).encode())

    def paths(self) -> list[str]:
        return [p for p, _ in self.payload]

    def content(self, path: str) -> bytes | None:
        for p, c in self.payload:
            if p == path:
                return c
        return None


def payload_content(submission: BuildSubmission, path: str) -> bytes | None:
    """Content of a payload file, or of ``archive::member`` inside a payload archive."""
    if ARCHIVE_SEP not in path:
        return submission.content(path)
    archive, member = path.split(ARCHIVE_SEP, 1)
    data = submission.content(archive)
    if data is None:
        return None
    try:
        if zipfile.is_zipfile(io.BytesIO(data)):
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                names = {PurePosixPath(n).as_posix(): n for n in zf.namelist()}
                return zf.read(names[member]) if member in names else None
        with tarfile.open(fileobj=io.BytesIO(data)) as tf:
            for info in tf.getmembers():
                if info.isfile() and PurePosixPath(info.name).as_posix() == member:
                    return tf.extractfile(info).read()
    except (tarfile.TarError, zipfile.BadZipFile, OSError, EOFError):
        return None
    return None


_EXCLUDED_DIRS = {SCRATCH_DIR, HISTORY_DIR, LOG_DIR}


def collect_payload(workspace: str | Path) -> tuple[tuple[str, bytes], ...]:
    """Every regular file of the workspace except the session's own directories."""
    root = Path(workspace)
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _EXCLUDED_DIRS and d != ".git")
        for name in sorted(filenames):
            full = Path(dirpath) / name
            if full.is_symlink() or not full.is_file():
                continue
            out.append((full.relative_to(root).as_posix(), full.read_bytes()))
    return tuple(out)


def check_no_scratch_leak(paths: Iterable[str]) -> None:
    for p in paths:
        if SCRATCH_DIR in PurePosixPath(p).parts:
            raise ScratchLeakError(f"payload path {p!r} lies under the unpack scratch area")


class BuildService:
    """Upload-and-trigger, poll and fetch-log contract.

    Subclasses implement ``_submit``, ``_poll`` and ``_log``. The base class
    enforces the one-build law and the scratch-leak guard, and retries
    transport errors a bounded number of times.
    """

    poll_interval: float = REAL_POLL_INTERVAL
    max_retries: int = MAX_TRANSPORT_RETRIES

    def __init__(self):
        self.accepted: list[BuildSubmission] = []
        self._tokens: dict[str, BuildSubmission] = {}

    def submit(self, submission: BuildSubmission) -> str:
        if any(
            s.package_id == submission.package_id and s.iteration == submission.iteration
            for s in self.accepted
        ):
            raise BoundaryViolation(
                f"{submission.package_id}: a build was already submitted at iteration {submission.iteration}"
            )
        check_no_scratch_leak(submission.paths())
        token = self._retry(lambda: self._submit(submission), "submit")
        self.accepted.append(submission)
        self._tokens[token] = submission
        return token

    def poll(self, token: str) -> str:
        self._check_token(token)
        return self._retry(lambda: self._poll(token), "poll")

    def get_log(self, token: str) -> str | None:
        self._check_token(token)
        return self._retry(lambda: self._log(token), "log fetch")

    def _check_token(self, token: str) -> None:
        if token not in self._tokens:
            raise InvalidTokenError(f"unknown build token {token!r}")

    def _retry(self, fn: Callable, what: str):
        for attempt in range(self.max_retries + 1):
            try:
                return fn()
            except TransportError as exc:
                if attempt == self.max_retries:
                    raise
                log.warning("%s failed (%s); retry %d/%d", what, exc, attempt + 1, self.max_retries)

    def _submit(self, submission: BuildSubmission) -> str:
        raise NotImplementedError

    def _poll(self, token: str) -> str:
        raise NotImplementedError

    def _log(self, token: str) -> str | None:
        raise NotImplementedError


# -- simulator -----------------------------------------------------------------


@dataclass(frozen=True)
class FixtureStep:
    """One scripted build.

    ``expect`` is ``"*"``, a payload digest, or ``{"contains": {path: text}}``.
    A submission that does not satisfy it ends in ``mismatch_state`` with
    ``mismatch_log`` instead of the scripted result.
    """

    expect: str | dict = "*"
    state: str = "failed"
    log: str | None = ""
    delay: float = 0.0
    mismatch_state: str = "failed"
    mismatch_log: str | None = None

    def matches(self, submission: BuildSubmission) -> bool:
        if self.expect == "*":
            return True
        if isinstance(self.expect, str):
            return self.expect == submission.digest
        contains = dict(self.expect).get("contains", {})
        for path, needle in contains.items():
            body = payload_content(submission, path)
            if body is None or needle.encode() not in body:
                return False
        return True


@dataclass
class SessionFixture:
    package_id: str
    steps: list[FixtureStep]

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "SessionFixture":
        if d.get("schema") != SESSION_SCHEMA:
            raise ConfigError(f"session fixture must declare schema {SESSION_SCHEMA}")
        steps = []
        for raw in d["steps"]:
            raw = dict(raw)
            for key in ("log", "mismatch_log"):
                ref = raw.pop(key + "_file", None)
                if ref is not None:
                    raw[key] = ((base or Path(".")) / ref).read_text("utf-8")
            steps.append(FixtureStep(**raw))
        return cls(d.get("package_id", ""), steps)

    @classmethod
    def load(cls, path: str | Path) -> "SessionFixture":
        path = Path(path)
        try:
            data = json.loads(path.read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read session fixture {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)


_MISSING_STEP_LOG = "simulator: no scripted step left for this submission\nerror: build not scripted\n"


class SimulatedBuildService(BuildService):
    """Replays a :class:`SessionFixture`; steps are consumed in submission order."""

    poll_interval = SIM_POLL_INTERVAL

    def __init__(self, fixture: SessionFixture, clock: Callable[[], float] = time.monotonic):
        super().__init__()
        self.fixture = fixture
        self.clock = clock
        self._runs: dict[str, tuple[FixtureStep | None, bool, float]] = {}

    def _submit(self, submission: BuildSubmission) -> str:
        idx = len(self._runs)
        step = self.fixture.steps[idx] if idx < len(self.fixture.steps) else None
        matched = step is not None and step.matches(submission)
        token = f"sim-{submission.package_id}-{submission.iteration}-{idx}"
        self._runs[token] = (step, matched, self.clock())
        return token

    def _poll(self, token: str) -> str:
        step, matched, started = self._runs[token]
        if step is None:
            return "failed"
        if self.clock() - started < step.delay:
            return "building"
        return step.state if matched else step.mismatch_state

    def _log(self, token: str) -> str | None:
        step, matched, _ = self._runs[token]
        if step is None:
            return _MISSING_STEP_LOG
        if matched:
            return step.log
        if step.mismatch_log is not None:
            return step.mismatch_log
        return step.log


# -- real service ------------------------------------------------------------------


@dataclass(frozen=True)
class ObsConfig:
    url: str
    project: str
    repository: str
    arch: str
    user: str = ""
    password: str = field(default="", repr=False)
    timeout: float = 30.0

    @classmethod
    def from_env(cls, env: dict | None = None) -> "ObsConfig":
        env = os.environ if env is None else env
        missing = [k for k in ("EVIDENT_OBS_URL", "EVIDENT_OBS_PROJECT") if not env.get(k)]
        if missing:
            raise ConfigError("missing environment variables: " + ", ".join(missing))
        return cls(
            url=env["EVIDENT_OBS_URL"].rstrip("/"),
            project=env["EVIDENT_OBS_PROJECT"],
            repository=env.get("EVIDENT_OBS_REPOSITORY", "standard"),
            arch=env.get("EVIDENT_OBS_ARCH", "riscv64"),
            user=env.get("EVIDENT_OBS_USER", ""),
            password=env.get("EVIDENT_OBS_PASSWORD", ""),
        )


class ObsBuildService(BuildService):
    """Adapter for an OBS-compatible HTTP API.

    Uploads every payload file into the package, commits, triggers a
    rebuild and polls ``_result``. Terminal states reported before the new
    build has been seen in a non-terminal state are ignored for
    ``settle`` seconds, since the service may still show the previous result.
    """

    def __init__(self, config: ObsConfig, session=None, settle: float = 60.0,
                 clock: Callable[[], float] = time.monotonic):
        super().__init__()
        import requests

        self.config = config
        self.settle = settle
        self.clock = clock
        self._requests = requests
        self.http = session or requests.Session()
        if config.user:
            self.http.auth = (config.user, config.password)
        self._started: dict[str, list] = {}

    def _call(self, method: str, path: str, **kw):
        try:
            resp = self.http.request(method, self.config.url + path, timeout=self.config.timeout, **kw)
        except self._requests.RequestException as exc:
            raise TransportError(f"{method} {path}: {type(exc).__name__}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"{method} {path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigError(f"{method} {path}: HTTP {resp.status_code}")
        return resp

    def _submit(self, submission: BuildSubmission) -> str:
        c = self.config
        pkg = submission.package_id
        for path, content in submission.payload:
            self._call("PUT", f"/source/{c.project}/{pkg}/{path}", params={"rev": "upload"}, data=content)
        self._call("POST", f"/source/{c.project}/{pkg}", params={"cmd": "commit", "comment": f"evident iteration {submission.iteration}"})
        self._call("POST", f"/build/{c.project}", params={
            "cmd": "rebuild", "package": pkg, "repository": c.repository, "arch": c.arch,
        })
        token = f"obs-{pkg}-{submission.iteration}"
        self._started[token] = [self.clock(), False]
        return token

    def _poll(self, token: str) -> str:
        c = self.config
        pkg = self._tokens[token].package_id
        resp = self._call("GET", f"/build/{c.project}/_result", params={
            "package": pkg, "repository": c.repository, "arch": c.arch,
        })
        state = "unknown"
        node = ET.fromstring(resp.content).find(f".//status[@package='{pkg}']")
        if node is not None:
            state = node.get("code", "unknown")
        started = self._started[token]
        _, terminal = map_state(state)
        if not terminal:
            started[1] = True
        elif not started[1] and self.clock() - started[0] < self.settle:
            return "scheduled"
        return state

    def _log(self, token: str) -> str | None:
        c = self.config
        pkg = self._tokens[token].package_id
        try:
            resp = self._call("GET", f"/build/{c.project}/{c.repository}/{c.arch}/{pkg}/_log")
        except TransportError:
            return None
        return resp.text


# -- validation ----------------------------------------------------------------------


def await_terminal(
    service: BuildService,
    token: str,
    window: float = DEFAULT_WINDOW,
    poll_interval: float | None = None,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> BuildOutcome:
    """Poll until a terminal state or until ``window`` seconds have passed.

    Returns within ``window`` plus one poll call. On expiry the outcome is
    ``timeout`` and carries the last state seen; no log is fetched.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    interval = service.poll_interval if poll_interval is None else poll_interval
    start = clock()
    while True:
        state = service.poll(token)
        status, terminal = map_state(state)
        elapsed = clock() - start
        if terminal:
            return BuildOutcome(status, None, state, elapsed, token)
        if elapsed >= window:
            return BuildOutcome(BuildStatus.TIMEOUT, None, state, elapsed, token)
        sleep(min(interval, window - elapsed))


def fetch_log(service: BuildService, token: str, log_dir: str | Path, name: str | None = None) -> Path | None:
    """Store the build's new log under ``log_dir``; ``None`` if the service has none."""
    text = service.get_log(token)
    if text is None:
        return None
    path = Path(log_dir) / (name or f"{token}.log")
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, to_bytes(text))
    return path


def validate(
    service: BuildService,
    submission: BuildSubmission,
    window: float = DEFAULT_WINDOW,
    log_dir: str | Path = LOG_DIR,
    distiller: LogDistiller | None = None,
    poll_interval: float | None = None,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[BuildFeedback, BuildOutcome]:
    """Submit, await, fetch and distill one build into feedback."""
    token = service.submit(submission)
    outcome = await_terminal(service, token, window, poll_interval, clock, sleep)
    if outcome.status is BuildStatus.TIMEOUT:
        return (
            BuildFeedback(
                iteration=submission.iteration,
                status=BuildStatus.TIMEOUT,
                complete=False,
                last_observed_state=outcome.last_observed_state,
                elapsed=outcome.elapsed,
            ),
            outcome,
        )
    path = fetch_log(service, token, log_dir, f"iter{submission.iteration}.log")
    outcome = BuildOutcome(outcome.status, str(path) if path else None,
                           outcome.last_observed_state, outcome.elapsed, token)
    signals: tuple = ()
    if path is not None and outcome.status is not BuildStatus.SUCCEEDED:
        signals = tuple((distiller or LogDistiller()).distill_one(path.read_text("utf-8", "replace")))
    return (
        BuildFeedback(
            iteration=submission.iteration,
            status=outcome.status,
            log_ref=outcome.log_ref,
            signals=signals,
            complete=path is not None,
            last_observed_state=outcome.last_observed_state,
            elapsed=outcome.elapsed,
        ),
        outcome,
    )
