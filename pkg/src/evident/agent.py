"""Tool registry, agent drivers and workflow auditing.

A driver receives the rendered prompt plus the observations of the current
iteration and answers with one :class:`AgentTurn`: a tool call or a final
proposal. :class:`ScriptedDriver` replays a JSON script deterministically;
:class:`RemoteDriver` talks to a chat-completions endpoint with function
calling and validates every reply against the registry.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import jsonschema

from evident.distill import CandidateBlock, Verdict
from evident.drain import mine_templates
from evident.errors import ConfigError, DriverUnavailable, MalformedTurnError, TransportError
from evident.evidence import PromptDocument

log = logging.getLogger(__name__)

SCRIPT_SCHEMA = "script.v1"
ANALYSIS, REPAIR, VALIDATION, NEUTRAL = "analysis", "repair", "validation", "neutral"
PHASE_RANK = {ANALYSIS: 0, REPAIR: 1, VALIDATION: 2}
MAX_MALFORMED = 2
MAX_TRANSPORT_RETRIES = 3

_STR = {"type": "string"}
_BOOL = {"type": "boolean"}


def _obj(required: Sequence[str] = (), **props) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict
    phase: str


DEFAULT_TOOLS = (
    ToolSpec("distill_log", "Distill a build log into stage-tagged failure signals. Defaults to the latest build log.",
             _obj(log=_STR), ANALYSIS),
    ToolSpec("parse_recipe", "Parse the spec file into dependencies, macros, stages and arch conditionals.",
             _obj(path=_STR), ANALYSIS),
    ToolSpec("inventory", "List workspace files with their kind and size, pruning irrelevant directories.",
             _obj(), ANALYSIS),
    ToolSpec("read_file", "Return the full content of a workspace file or of a member of an unpacked archive.",
             _obj(["path"], path=_STR, archive=_STR), NEUTRAL),
    ToolSpec("unpack", "Unpack a source archive into the scratch area for editing.",
             _obj(["archive"], archive=_STR), REPAIR),
    ToolSpec("edit_member", "Replace, create or delete one member of an unpacked archive.",
             _obj(["archive", "member"], archive=_STR, member=_STR, content=_STR, create=_BOOL, delete=_BOOL),
             REPAIR),
    ToolSpec("repack", "Reassemble an unpacked archive in its original format.",
             _obj(["archive"], archive=_STR), REPAIR),
    ToolSpec("apply_config", "Replace a recipe or packaging script with complete new content.",
             _obj(["path", "content"], path=_STR, content=_STR, rationale=_STR), REPAIR),
    ToolSpec("apply_source", "Replace a source file with complete new content, in the workspace or inside an archive.",
             _obj(["path"], path=_STR, content=_STR, archive=_STR, rationale=_STR, delete=_BOOL), REPAIR),
    ToolSpec("submit_build", "Submit the workspace for exactly one validation build. Must be the last call.",
             _obj(note=_STR), VALIDATION),
)


class ToolRegistry:
    def __init__(self, tools: Sequence[ToolSpec] = DEFAULT_TOOLS):
        self.tools: dict[str, ToolSpec] = {}
        for t in tools:
            if t.name in self.tools:
                raise ValueError(f"duplicate tool {t.name!r}")
            jsonschema.Draft202012Validator.check_schema(t.parameters)
            self.tools[t.name] = t

    def __contains__(self, name: str) -> bool:
        return name in self.tools

    def names(self) -> list[str]:
        return list(self.tools)

    def phase(self, name: str) -> str:
        return self.tools[name].phase

    def validate(self, turn: "AgentTurn") -> "AgentTurn":
        if turn.kind == "final":
            return turn
        if turn.kind != "tool_call":
            raise MalformedTurnError(f"unknown turn kind {turn.kind!r}")
        if turn.tool not in self.tools:
            raise MalformedTurnError(f"unknown tool {turn.tool!r}")
        try:
            jsonschema.validate(turn.arguments, self.tools[turn.tool].parameters)
        except jsonschema.ValidationError as exc:
            raise MalformedTurnError(f"{turn.tool}: {exc.message}") from exc
        return turn

    def as_functions(self) -> list[dict]:
        """Tool declarations in the chat-completions function-calling format."""
        return [
            {"type": "function", "function": {"name": t.name, "description": t.description, "parameters": t.parameters}}
            for t in self.tools.values()
        ]


@dataclass(frozen=True)
class AgentTurn:
    kind: str
    tool: str | None = None
    arguments: dict = field(default_factory=dict)
    note: str = ""

    @classmethod
    def call(cls, tool: str, note: str = "", **arguments) -> "AgentTurn":
        return cls("tool_call", tool, arguments, note)

    @classmethod
    def final(cls, note: str = "") -> "AgentTurn":
        return cls("final", None, {}, note)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tool": self.tool, "arguments": self.arguments, "note": self.note}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentTurn":
        return cls(d["kind"], d.get("tool"), dict(d.get("arguments", {})), d.get("note", ""))


@dataclass(frozen=True)
class Observation:
    turn: AgentTurn
    ok: bool
    result: Any


class Driver(Protocol):
    def next_turn(self, prompt: PromptDocument, observations: Sequence[Observation]) -> AgentTurn: ...


# -- scripted driver -------------------------------------------------------------


@dataclass(frozen=True)
class ScriptStep:
    turn: AgentTurn
    when: str | None = None  # required latest BuildStatus value, if any


@dataclass
class Script:
    steps: list[ScriptStep]

    @classmethod
    def from_dict(cls, d: dict) -> "Script":
        if d.get("schema") != SCRIPT_SCHEMA:
            raise ConfigError(f"script must declare schema {SCRIPT_SCHEMA}")
        steps = []
        for raw in d["turns"]:
            raw = dict(raw)
            when = raw.pop("when", None)
            raw.setdefault("kind", "tool_call")
            steps.append(ScriptStep(AgentTurn.from_dict(raw), when))
        return cls(steps)

    @classmethod
    def load(cls, path: str | Path) -> "Script":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read script {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def of(cls, *turns: AgentTurn | tuple[AgentTurn, str]) -> "Script":
        steps = [ScriptStep(*t) if isinstance(t, tuple) else ScriptStep(t) for t in turns]
        return cls(steps)


class ScriptedDriver:
    """Replays a :class:`Script` in order across the whole session.

    A step whose ``when`` does not equal the latest build status is consumed
    and skipped. When the script runs out every further turn is ``final``.
    """

    def __init__(self, script: Script, registry: ToolRegistry | None = None):
        self.script = script
        self.registry = registry or ToolRegistry()
        self.position = 0

    def next_turn(self, prompt: PromptDocument, observations: Sequence[Observation] = ()) -> AgentTurn:
        while self.position < len(self.script.steps):
            step = self.script.steps[self.position]
            self.position += 1
            if step.when is not None and step.when != prompt.feedback_status:
                continue
            return self.registry.validate(step.turn)
        return AgentTurn.final("script exhausted")


# -- remote driver ---------------------------------------------------------------------

Transport = Callable[[dict], dict]


def http_transport(endpoint: str, key_env: str = "EVIDENT_DRIVER_KEY", timeout: float = 120.0) -> Transport:
    """POST chat-completions requests to ``endpoint`` with a bearer token from ``key_env``."""
    import requests

    key = os.environ.get(key_env, "")
    session = requests.Session()
    if key:
        session.headers["Authorization"] = f"Bearer {key}"

    def send(request: dict) -> dict:
        try:
            resp = session.post(endpoint, json=request, timeout=timeout)
        except requests.RequestException as exc:
            raise TransportError(type(exc).__name__) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise DriverUnavailable(f"HTTP {resp.status_code}")
        return resp.json()

    return send


def _observation_text(obs: Observation) -> str:
    body = obs.result if isinstance(obs.result, str) else json.dumps(obs.result, sort_keys=True, default=str)
    return ("ok: " if obs.ok else "error: ") + body


class RemoteDriver:
    """Chat-completions driver with function calling.

    Request shape::

        {"model": ..., "temperature": ..., "tools": [...],
         "messages": [{"role": "system", "content": <rendered prompt>},
                      {"role": "assistant", "tool_calls": [...]},
                      {"role": "tool", "tool_call_id": ..., "content": ...}, ...]}

    Only the first tool call of a reply is used. A reply naming an unknown
    tool or carrying invalid arguments is returned to the model as an error
    message; the second such reply in one turn raises
    :class:`MalformedTurnError`.
    """

    def __init__(self, transport: Transport, model: str = "default", temperature: float = 1.0,
                 registry: ToolRegistry | None = None, max_malformed: int = MAX_MALFORMED,
                 max_retries: int = MAX_TRANSPORT_RETRIES):
        self.transport = transport
        self.model = model
        self.temperature = temperature
        self.registry = registry or ToolRegistry()
        self.max_malformed = max_malformed
        self.max_retries = max_retries

    def _messages(self, prompt: PromptDocument, observations: Sequence[Observation]) -> list[dict]:
        msgs: list[dict] = [{"role": "system", "content": prompt.render()}]
        for n, obs in enumerate(observations):
            call_id = f"call_{n}"
            msgs.append({"role": "assistant", "content": obs.turn.note or None, "tool_calls": [{
                "id": call_id, "type": "function",
                "function": {"name": obs.turn.tool, "arguments": json.dumps(obs.turn.arguments)},
            }]})
            msgs.append({"role": "tool", "tool_call_id": call_id, "content": _observation_text(obs)})
        return msgs

    def _send(self, messages: list[dict]) -> dict:
        request = {
            "model": self.model,
            "temperature": self.temperature,
            "tools": self.registry.as_functions(),
            "messages": messages,
        }
        for attempt in range(self.max_retries + 1):
            try:
                return self.transport(request)
            except TransportError as exc:
                log.warning("driver transport error (%s), attempt %d", exc, attempt + 1)
        raise DriverUnavailable(f"no response after {self.max_retries + 1} attempts")

    @staticmethod
    def _parse(reply: dict) -> AgentTurn:
        try:
            message = reply["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedTurnError("reply has no message") from exc
        calls = message.get("tool_calls") or []
        note = message.get("content") or ""
        if not calls:
            return AgentTurn.final(note)
        fn = calls[0].get("function", {})
        try:
            args = json.loads(fn.get("arguments") or "{}")
        except ValueError as exc:
            raise MalformedTurnError(f"arguments of {fn.get('name')!r} are not JSON") from exc
        if not isinstance(args, dict):
            raise MalformedTurnError("arguments must be an object")
        return AgentTurn("tool_call", fn.get("name"), args, note)

    def next_turn(self, prompt: PromptDocument, observations: Sequence[Observation] = ()) -> AgentTurn:
        messages = self._messages(prompt, observations)
        malformed = 0
        while True:
            reply = self._send(messages)
            try:
                return self.registry.validate(self._parse(reply))
            except MalformedTurnError as exc:
                malformed += 1
                if malformed >= self.max_malformed:
                    raise
                messages = messages + [{
                    "role": "user",
                    "content": f"Invalid tool call: {exc}. Use one of: {', '.join(self.registry.names())}.",
                }]

    def ask(self, question: str) -> str:
        reply = self._send([{"role": "user", "content": question}])
        try:
            return reply["choices"][0]["message"].get("content") or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedTurnError("reply has no message") from exc


class DriverVerifier:
    """Candidate-block verifier backed by a remote model's yes/no judgement."""

    name = "driver"

    def __init__(self, driver: RemoteDriver):
        self.driver = driver

    def __call__(self, block: CandidateBlock) -> Verdict:
        templates = "\n".join(t for t, _ in mine_templates(block.lines))
        answer = self.driver.ask(
            "Does this build log excerpt show the actual cause of a build failure? "
            "Answer KEEP or DROP followed by a short reason.\n\n"
            f"Raw lines:\n{block.text}\n\nTemplates:\n{templates}"
        )
        keep = answer.strip().upper().startswith("KEEP")
        return Verdict(keep, answer.strip()[:200], self.name)


# -- workflow auditing -------------------------------------------------------------------

OK, MISORDERED, EARLY_TERMINATION = "ok", "misordered", "early_termination"
VERDICTS = (OK, MISORDERED, EARLY_TERMINATION)


def enforce_workflow(turns: Sequence[AgentTurn], registry: ToolRegistry | None = None) -> str:
    """Audit one iteration's tool calls.

    ``early_termination`` if the last call is not ``submit_build``;
    otherwise ``misordered`` if any analysis call follows a repair call or
    anything follows the submission; else ``ok``. ``read_file`` is allowed
    in either of the first two phases.
    """
    registry = registry or ToolRegistry()
    calls = [t for t in turns if t.kind == "tool_call"]
    if not calls or calls[-1].tool != "submit_build":
        return EARLY_TERMINATION
    highest = -1
    for t in calls:
        phase = registry.phase(t.tool) if t.tool in registry else NEUTRAL
        if phase == NEUTRAL:
            if highest >= PHASE_RANK[VALIDATION]:
                return MISORDERED
            continue
        rank = PHASE_RANK[phase]
        if rank < highest or (rank == highest == PHASE_RANK[VALIDATION]):
            return MISORDERED
        highest = rank
    return OK
