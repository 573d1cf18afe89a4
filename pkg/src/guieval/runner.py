"""Agent evaluation: prompt assembly, endpoint calls, resumable step logs."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

import numpy as np

from .chat import ChatClient, ChatReply, RetryPolicy, reply_from_json, with_retries
from .codec import DEFAULT_RULE, MatchConfig, MatchVerdict, ParseRule, judge, parse_action
from .errors import EndpointError, EndpointUnreachable, LogCorrupt, ScriptMiss, UnparseableResponse
from .items import EvalItem, items_from_trajectories
from .trajectory import POINT_KINDS, Action, ActionKind, Direction, Trajectory

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "prompt-v1"
IMAGE_TOKEN_ESTIMATE = 1024
# fields that legitimately differ between otherwise identical runs
TIMING_FIELDS = ("timestamp", "latency_ms")


# -- endpoints ----------------------------------------------------------------------

@dataclass(frozen=True)
class AgentEndpoint:
    agent_key: str
    base_url: str = ""
    model: str = ""
    api_key_env: str | None = None
    system_prompt: str = (
        "You are a GUI agent operating a smartphone. Reply with exactly one JSON object "
        '{"action": <TYPE>, ...} using the action types CLICK, TYPE, SCROLL, PRESS_BACK, '
        "PRESS_HOME, ENTER, OPEN_APP, WAIT, LONG_PRESS, COMPLETE, IMPOSSIBLE."
    )
    parse_rule_key: str = "default"
    max_tokens: int = 512
    temperature: float = 0.0


@dataclass(frozen=True)
class Prompt:
    item: EvalItem
    request: Mapping[str, Any]
    digest: str
    text: str


class Agent(Protocol):
    endpoint: AgentEndpoint

    def act(self, prompt: Prompt) -> ChatReply: ...


class HttpAgent:
    """Agent behind a chat-completions HTTP endpoint."""

    def __init__(self, endpoint: AgentEndpoint, timeout: float = 60.0, transport=None):
        self.endpoint = endpoint
        # the runner owns retries; the client makes single attempts
        self.client = ChatClient(endpoint.base_url, endpoint.model, endpoint.api_key_env, timeout,
                                 RetryPolicy(retries=0), transport)

    def act(self, prompt: Prompt) -> ChatReply:
        return self.client.post(prompt.request)


# -- prompt assembly ----------------------------------------------------------------

_SLOT_TITLES = {"memory": "Memory", "knowledge": "Knowledge", "status": "Status"}


def render_prompt_text(item: EvalItem) -> str:
    """User-turn text. Injected blocks sit in labelled sections after the history."""
    lines = ["## Instruction", item.instruction, "", "## History"]
    if len(item.history):
        lines += [f"Step {e.step_idx}: {e.action.describe()}" for e in item.history.entries]
    else:
        lines.append("(none)")
    if item.injected_text is not None:
        lines += ["", f"## {_SLOT_TITLES[item.injected_text.slot]}", item.injected_text.content]
    lines += ["", "## Current screen",
              f"Screen size: {item.step.screen_width}x{item.step.screen_height} pixels.",
              "Output the next action."]
    return "\n".join(lines)


def assemble_prompt(item: EvalItem, endpoint: AgentEndpoint) -> Prompt:
    text = render_prompt_text(item)
    png = item.image_bytes()
    image_url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
    request = {
        "model": endpoint.model,
        "messages": [
            {"role": "system", "content": endpoint.system_prompt},
            {"role": "user", "content": [
                {"type": "text", "text": text},
                {"type": "image_url", "image_url": {"url": image_url}},
            ]},
        ],
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
    }
    h = hashlib.sha256()
    for part in (TEMPLATE_VERSION, endpoint.system_prompt, text, hashlib.sha256(png).hexdigest()):
        h.update(part.encode("utf-8"))
        h.update(b"\0")
    return Prompt(item, request, h.hexdigest(), text)


# -- token accounting ---------------------------------------------------------------

def estimate_tokens(text: str) -> int:
    """Character-class heuristic: ~4 ASCII chars per token, one token per other char."""
    if not text:
        return 0
    ascii_chars = sum(1 for c in text if ord(c) < 128)
    return math.ceil(ascii_chars / 4) + (len(text) - ascii_chars)


def token_usage(reply: ChatReply | Mapping[str, Any] | None, request_text: str = "",
                n_images: int = 0) -> tuple[int, int, bool]:
    """``(tokens_in, tokens_out, estimated)`` from the reply's usage, else estimated."""
    if isinstance(reply, Mapping):
        reply = reply_from_json(reply)
    usage = None if reply is None else reply.usage
    if usage and "prompt_tokens" in usage and "completion_tokens" in usage:
        return int(usage["prompt_tokens"]), int(usage["completion_tokens"]), False
    tin = estimate_tokens(request_text) + IMAGE_TOKEN_ESTIMATE * n_images
    content = "" if reply is None else reply.content
    return tin, estimate_tokens(content), True


# -- mock agents --------------------------------------------------------------------

def action_to_response(action: Action) -> str:
    d: dict[str, Any] = {"action": action.kind.value}
    if action.kind in POINT_KINDS:
        d["coordinate"] = [action.x, action.y]
    if action.text is not None:
        d["text"] = action.text
    if action.direction is not None:
        d["direction"] = action.direction.value
    if action.app_name is not None:
        d["app_name"] = action.app_name
    return json.dumps(d)


def _item_rng(seed: int, item: EvalItem) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{item.trajectory_id}|{item.step_idx}|{item.perturbation}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def random_action(rng: np.random.Generator, width: int, height: int) -> Action:
    kind = list(ActionKind)[int(rng.integers(len(ActionKind)))]
    if kind in POINT_KINDS:
        return Action(kind, x=int(rng.integers(width)), y=int(rng.integers(height)))
    if kind is ActionKind.TYPE:
        return Action(kind, text="".join(rng.choice(list("abcdefgh"), size=6)))
    if kind is ActionKind.SCROLL:
        return Action(kind, direction=list(Direction)[int(rng.integers(4))])
    if kind is ActionKind.OPEN_APP:
        return Action(kind, app_name=["Settings", "Maps", "Mail", "Camera"][int(rng.integers(4))])
    return Action(kind)


class MockAgent:
    """In-process agent with a fixed policy; no network."""

    POLICIES = ("oracle", "distracted", "random", "scripted")

    def __init__(self, policy: str, seed: int = 0, *, agent_key: str | None = None, latency_ms: float = 0.0,
                 tokens: tuple[int, int] | None = (1000, 100), script: Mapping[Any, str] | None = None):
        if policy not in self.POLICIES:
            raise ValueError(f"unknown mock policy {policy!r}")
        if policy == "scripted" and script is None:
            raise ValueError("scripted policy needs a script table")
        self.policy = policy
        self.seed = seed
        self.latency_ms = latency_ms
        self.tokens = tokens
        self.script = dict(script or {})
        self.endpoint = AgentEndpoint(agent_key or f"mock-{policy}")
        self.calls = 0
        self._lock = threading.Lock()

    def respond(self, item: EvalItem) -> str:
        if self.policy == "oracle":
            return action_to_response(item.step.gold_action)
        if self.policy == "distracted":
            return action_to_response(item.distraction_action or item.step.gold_action)
        if self.policy == "random":
            rng = _item_rng(self.seed, item)
            return action_to_response(random_action(rng, item.step.screen_width, item.step.screen_height))
        for key in (item.key, (item.trajectory_id, item.step_idx),
                    f"{item.trajectory_id}#{item.step_idx}#{item.perturbation}", f"{item.trajectory_id}#{item.step_idx}"):
            if key in self.script:
                return self.script[key]
        raise ScriptMiss(f"no scripted response for {item.key}")

    def act(self, prompt: Prompt) -> ChatReply:
        with self._lock:
            self.calls += 1
        text = self.respond(prompt.item)
        if self.latency_ms:
            time.sleep(self.latency_ms / 1000.0)
        usage = None
        if self.tokens is not None:
            usage = {"prompt_tokens": self.tokens[0], "completion_tokens": self.tokens[1]}
        body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
        if usage:
            body["usage"] = usage
        return ChatReply(text, usage, body)


def mock_agent(policy: str, seed: int = 0, **kwargs: Any) -> MockAgent:
    return MockAgent(policy, seed, **kwargs)


# -- step logs ------------------------------------------------------------------------

@dataclass(frozen=True)
class StepLog:
    agent_key: str
    subset: str
    trajectory_id: str
    step_idx: int
    perturbation: str
    prompt_digest: str
    response_text: str
    verdict: MatchVerdict
    latency_ms: float
    tokens_in: int
    tokens_out: int
    timestamp: str
    action: Mapping[str, Any] | None = None
    parse_error: str | None = None
    tokens_estimated: bool = False
    error: str | None = None
    template_version: str = TEMPLATE_VERSION
    scenario: str | None = None
    difficulty: str | None = None

    def __post_init__(self) -> None:
        if self.latency_ms < 0 or self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("latency and token counts must be non-negative")

    @property
    def key(self) -> tuple[str, str, str, int, str]:
        return (self.agent_key, self.subset, self.trajectory_id, self.step_idx, self.perturbation)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_key": self.agent_key,
            "subset": self.subset,
            "trajectory_id": self.trajectory_id,
            "step_idx": self.step_idx,
            "perturbation": self.perturbation,
            "prompt_digest": self.prompt_digest,
            "template_version": self.template_version,
            "response_text": self.response_text,
            "action": None if self.action is None else dict(self.action),
            "parse_error": self.parse_error,
            "verdict": self.verdict.to_dict(),
            "latency_ms": self.latency_ms,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "tokens_estimated": self.tokens_estimated,
            "error": self.error,
            "scenario": self.scenario,
            "difficulty": self.difficulty,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StepLog":
        return cls(
            agent_key=d["agent_key"],
            subset=d["subset"],
            trajectory_id=d["trajectory_id"],
            step_idx=int(d["step_idx"]),
            perturbation=d.get("perturbation", "Normal"),
            prompt_digest=d.get("prompt_digest", ""),
            response_text=d.get("response_text", ""),
            verdict=MatchVerdict.from_dict(d["verdict"]),
            latency_ms=float(d.get("latency_ms", 0.0)),
            tokens_in=int(d.get("tokens_in", 0)),
            tokens_out=int(d.get("tokens_out", 0)),
            timestamp=d.get("timestamp", ""),
            action=d.get("action"),
            parse_error=d.get("parse_error"),
            tokens_estimated=bool(d.get("tokens_estimated", False)),
            error=d.get("error"),
            template_version=d.get("template_version", TEMPLATE_VERSION),
            scenario=d.get("scenario"),
            difficulty=d.get("difficulty"),
        )


def strip_timing(d: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in d.items() if k not in TIMING_FIELDS}


def read_logs(path: str | os.PathLike) -> list[StepLog]:
    """Parse a JSONL log; any malformed line raises :class:`LogCorrupt`."""
    out = []
    path = Path(path)
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(StepLog.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise LogCorrupt(f"{path}:{n}: unparseable record ({exc})") from None
    return out


def _index_existing(path: Path) -> dict[tuple, dict[str, Any]]:
    seen: dict[tuple, dict[str, Any]] = {}
    for log in read_logs(path):
        rec = strip_timing(log.to_dict())
        prev = seen.get(log.key)
        if prev is not None and prev != rec:
            raise LogCorrupt(f"{path}: key {log.key} logged twice with differing payloads")
        seen[log.key] = rec
    return seen


# -- runner ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    subset: str = "p"
    log_path: str | os.PathLike = "logs.jsonl"
    max_steps: int | None = None
    in_flight: int = 4
    retries: int = 2
    backoff: float = 0.5
    timeout: float = 60.0
    seed: int = 0
    match: MatchConfig = field(default_factory=MatchConfig)

    def __post_init__(self) -> None:
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.in_flight < 1:
            raise ValueError("in_flight must be >= 1")


@dataclass
class RunSummary:
    log_path: Path
    requested: int = 0
    written: int = 0
    skipped: int = 0
    errors: int = 0
    aborted: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"log_path": str(self.log_path), "requested": self.requested, "written": self.written,
                "skipped": self.skipped, "errors": self.errors, "aborted": self.aborted}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def evaluate_item(agent: Agent, prompt: Prompt, subset: str, rule: ParseRule, cfg: RunConfig) -> StepLog:
    """Call the agent for one item and judge the reply.

    Transient failures are retried; a failure that survives the retries
    becomes an error record. :class:`EndpointUnreachable` propagates.
    """
    item = prompt.item
    policy = RetryPolicy(retries=cfg.retries, backoff=cfg.backoff)
    base = dict(
        agent_key=agent.endpoint.agent_key, subset=subset, trajectory_id=item.trajectory_id,
        step_idx=item.step_idx, perturbation=item.perturbation, prompt_digest=prompt.digest,
        scenario=None if item.scenario is None else item.scenario.value,
        difficulty=None if item.difficulty is None else item.difficulty.value,
    )
    failed = judge(None, item.step, item.distraction_action)
    t0 = time.perf_counter()
    try:
        reply = with_retries(lambda: agent.act(prompt), policy, what=f"{agent.endpoint.agent_key} {item.key}")
    except EndpointError as exc:
        latency = (time.perf_counter() - t0) * 1000.0
        tin = estimate_tokens(prompt.text) + IMAGE_TOKEN_ESTIMATE
        return StepLog(**base, response_text="", verdict=failed, latency_ms=latency, tokens_in=tin,
                       tokens_out=0, tokens_estimated=True, timestamp=_now(), error=exc.code)
    latency = (time.perf_counter() - t0) * 1000.0
    tin, tout, estimated = token_usage(reply, prompt.text, n_images=1)
    screen = (item.step.screen_width, item.step.screen_height)
    try:
        action = parse_action(reply.content, rule, screen)
    except UnparseableResponse as exc:
        return StepLog(**base, response_text=reply.content, verdict=failed, latency_ms=latency, tokens_in=tin,
                       tokens_out=tout, tokens_estimated=estimated, timestamp=_now(), parse_error=exc.code)
    verdict = judge(action, item.step, item.distraction_action, cfg.match, item.distraction_bbox)
    return StepLog(**base, response_text=reply.content, verdict=verdict, latency_ms=latency, tokens_in=tin,
                   tokens_out=tout, tokens_estimated=estimated, timestamp=_now(), action=action.to_dict())


def run_subset(agent: Agent, items: Iterable[EvalItem | Trajectory], config: RunConfig,
               rules: Mapping[str, ParseRule] | None = None) -> RunSummary:
    """Evaluate ``agent`` on ``items``, appending one JSONL record per item.

    Items already present in the log are skipped (resume). A prompt digest
    that differs from the logged one for the same key raises
    :class:`LogCorrupt`. On :class:`EndpointUnreachable` the run stops, the
    records completed so far stay in the log, and the error is re-raised.
    """
    items = list(items)
    if items and isinstance(items[0], Trajectory):
        items = items_from_trajectories(items, config.max_steps)  # type: ignore[arg-type]
    elif config.max_steps is not None:
        items = [it for it in items if it.step_idx < config.max_steps]  # type: ignore[union-attr]
    rules = rules or {}
    rule = rules.get(agent.endpoint.parse_rule_key, DEFAULT_RULE)
    log_path = Path(config.log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    existing = _index_existing(log_path)
    summary = RunSummary(log_path, requested=len(items))

    pending: list[Prompt] = []
    seen_keys: set[tuple] = set()
    for it in sorted(items, key=lambda i: i.key):  # type: ignore[union-attr]
        key = (agent.endpoint.agent_key, config.subset) + it.key  # type: ignore[union-attr]
        if key in seen_keys:
            raise ValueError(f"duplicate evaluation item {key}")
        seen_keys.add(key)
        prompt = assemble_prompt(it, agent.endpoint)  # type: ignore[arg-type]
        prev = existing.get(key)
        if prev is not None:
            if prev["prompt_digest"] != prompt.digest:
                raise LogCorrupt(f"{log_path}: {key} already logged with a different prompt digest")
            summary.skipped += 1
            continue
        pending.append(prompt)

    abort: EndpointUnreachable | None = None
    # results are committed in key order so identical runs give identical files
    done_logs: dict[int, StepLog] = {}
    next_commit = 0

    def commit(log: StepLog) -> None:
        fh.write(json.dumps(log.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        fh.flush()
        if log.error is not None:
            summary.errors += 1
        else:
            summary.written += 1

    with open(log_path, "a", encoding="utf-8") as fh, ThreadPoolExecutor(max_workers=config.in_flight) as ex:
        queue = iter(enumerate(pending))
        running: dict[Future, int] = {}

        def submit_next() -> bool:
            nxt = next(queue, None)
            if nxt is None:
                return False
            idx, p = nxt
            running[ex.submit(evaluate_item, agent, p, config.subset, rule, config)] = idx
            return True

        for _ in range(config.in_flight):
            if not submit_next():
                break
        while running:
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                idx = running.pop(fut)
                try:
                    done_logs[idx] = fut.result()
                except EndpointUnreachable as exc:
                    abort = abort or exc
                    continue
                if abort is None:
                    submit_next()
            while next_commit in done_logs:
                commit(done_logs.pop(next_commit))
                next_commit += 1
        # after an abort, keep every finished record even past a gap
        for idx in sorted(done_logs):
            commit(done_logs[idx])
    if abort is not None:
        summary.aborted = True
        logger.error("run aborted: %s (%d written, %d errors)", abort, summary.written, summary.errors)
        raise abort
    return summary
