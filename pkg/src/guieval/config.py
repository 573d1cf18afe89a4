"""TOML harness configuration."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ._version import __version__
from .codec import MatchConfig
from .errors import ConfigError
from .metrics import RobustnessConfig
from .perturb.spec import ALL_KINDS, DEFAULT_PARAMS, PerturbationKind
from .runner import AgentEndpoint, MockAgent

SUBSETS = ("s", "p", "e", "r")


@dataclass(frozen=True)
class EndpointConfig:
    endpoint: AgentEndpoint
    mock: str | None = None  # policy used offline or when no base_url is set
    script: str | None = None


@dataclass(frozen=True)
class RunSettings:
    max_steps: int | None = None
    in_flight: int = 4
    retries: int = 2
    backoff: float = 0.5
    timeout: float = 60.0
    mock_latency_ms: float = 0.0


@dataclass(frozen=True)
class CurateSettings:
    small_ensemble: tuple[str, ...] = ()
    large_ensemble: tuple[str, ...] = ()
    tau: float = 0.9
    ratio: tuple[float, float, float] = (4.0, 3.0, 3.0)
    sample_size: int = 0
    results: Path | None = None


@dataclass(frozen=True)
class PerturbSettings:
    kinds: tuple[PerturbationKind, ...] = ALL_KINDS
    params: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULT_PARAMS))
    generator: str = "template"
    generator_endpoint: str | None = None
    workers: int = 1


@dataclass(frozen=True)
class ReportSettings:
    backend: str = "deterministic"
    endpoint: str | None = None
    fallback: bool = True


@dataclass(frozen=True)
class HarnessConfig:
    path: Path
    digest: str
    seed: int
    output_dir: Path
    datasets: Mapping[str, Path]
    endpoints: Mapping[str, EndpointConfig]
    run: RunSettings
    curate: CurateSettings
    perturb: PerturbSettings
    robustness: RobustnessConfig
    match: MatchConfig
    report: ReportSettings
    parse_rules: Path | None = None

    def meta(self, stage: str) -> dict[str, Any]:
        return {"config_digest": self.digest, "stage": stage, "seed": self.seed, "tool_version": __version__}


def _section(raw: Mapping[str, Any], name: str) -> dict[str, Any]:
    sec = raw.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _known(sec: Mapping[str, Any], name: str, allowed: set[str]) -> None:
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"[{name}] has unknown keys {sorted(extra)}")


def _path(base: Path, v: Any, what: str) -> Path:
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{what} must be a non-empty path string")
    p = Path(v)
    return p if p.is_absolute() else (base / p)


def _build(raw: Mapping[str, Any], path: Path, digest: str) -> HarnessConfig:
    base = path.parent
    _known(raw, "top level", {"seed", "output_dir", "datasets", "endpoints", "run", "curate", "perturb",
                              "robustness", "match", "report", "parse_rules"})
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    ds = _section(raw, "datasets")
    _known(ds, "datasets", set(SUBSETS) | {"pool"})
    datasets = {k: _path(base, v, f"datasets.{k}") for k, v in ds.items()}

    endpoints: dict[str, EndpointConfig] = {}
    raw_eps = raw.get("endpoints", [])
    if not isinstance(raw_eps, list):
        raise ConfigError("endpoints must be an array of tables ([[endpoints]])")
    for i, e in enumerate(raw_eps):
        _known(e, f"endpoints[{i}]", {"key", "base_url", "model", "api_key_env", "system_prompt", "parse_rule",
                                      "max_tokens", "temperature", "mock", "script"})
        key = e.get("key")
        if not isinstance(key, str) or not key:
            raise ConfigError(f"endpoints[{i}] needs a key")
        if key in endpoints:
            raise ConfigError(f"duplicate endpoint key {key!r}")
        mock = e.get("mock")
        if mock is not None and mock not in MockAgent.POLICIES:
            raise ConfigError(f"endpoint {key!r}: unknown mock policy {mock!r}")
        if mock == "scripted" and not e.get("script"):
            raise ConfigError(f"endpoint {key!r}: scripted mock needs a script file")
        kw = {k2: e[k1] for k1, k2 in (("base_url", "base_url"), ("model", "model"), ("api_key_env", "api_key_env"),
                                       ("system_prompt", "system_prompt"), ("parse_rule", "parse_rule_key"),
                                       ("max_tokens", "max_tokens"), ("temperature", "temperature")) if k1 in e}
        script = e.get("script")
        endpoints[key] = EndpointConfig(AgentEndpoint(key, **kw), mock,
                                        None if script is None else str(_path(base, script, "script")))

    run = _section(raw, "run")
    _known(run, "run", {"max_steps", "in_flight", "retries", "backoff", "timeout", "mock_latency_ms"})
    try:
        run_s = RunSettings(**run)
        if run_s.max_steps is not None and run_s.max_steps < 1:
            raise ValueError("run.max_steps must be >= 1")
        if run_s.in_flight < 1:
            raise ValueError("run.in_flight must be >= 1")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    cur = _section(raw, "curate")
    _known(cur, "curate", {"small_ensemble", "large_ensemble", "tau", "ratio", "sample_size", "results"})
    if "results" in cur:
        cur["results"] = _path(base, cur["results"], "curate.results")
    for k in ("small_ensemble", "large_ensemble", "ratio"):
        if k in cur:
            cur[k] = tuple(cur[k])
    curate = CurateSettings(**cur)
    for k in curate.small_ensemble + curate.large_ensemble:
        if k not in endpoints and curate.results is None:
            raise ConfigError(f"curate ensemble references unknown endpoint key {k!r}")

    pt = _section(raw, "perturb")
    _known(pt, "perturb", {"kinds", "generator", "generator_endpoint", "workers"} | set(DEFAULT_PARAMS))
    try:
        kinds = tuple(PerturbationKind(k) for k in pt.pop("kinds", [k.value for k in ALL_KINDS]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    gen = pt.pop("generator", "template")
    gen_ep = pt.pop("generator_endpoint", None)
    if gen not in ("template", "llm"):
        raise ConfigError(f"perturb.generator must be 'template' or 'llm', got {gen!r}")
    if gen == "llm" and gen_ep not in endpoints:
        raise ConfigError(f"perturb.generator_endpoint {gen_ep!r} is not a known endpoint key")
    workers = int(pt.pop("workers", 1))
    perturb = PerturbSettings(kinds, {**DEFAULT_PARAMS, **pt}, gen, gen_ep, workers)

    rb = _section(raw, "robustness")
    _known(rb, "robustness", {"gamma", "decrease_mode"})
    mt = _section(raw, "match")
    _known(mt, "match", {"click_radius", "type_match_mode", "type_f1_threshold"})
    rp = _section(raw, "report")
    _known(rp, "report", {"backend", "endpoint", "fallback"})
    try:
        robustness = RobustnessConfig(**rb)
        match = MatchConfig(**mt)
        report = ReportSettings(**rp)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if report.backend not in ("deterministic", "llm"):
        raise ConfigError(f"report.backend must be 'deterministic' or 'llm', got {report.backend!r}")
    if report.backend == "llm" and report.endpoint not in endpoints:
        raise ConfigError(f"report.endpoint {report.endpoint!r} is not a known endpoint key")

    rules = raw.get("parse_rules")
    return HarnessConfig(
        path=path, digest=digest, seed=seed,
        output_dir=_path(base, raw.get("output_dir", "out"), "output_dir"),
        datasets=datasets, endpoints=endpoints, run=run_s, curate=curate, perturb=perturb,
        robustness=robustness, match=match, report=report,
        parse_rules=None if rules is None else _path(base, rules, "parse_rules"),
    )


def load_config(path: str | Path) -> HarnessConfig:
    """Parse and validate a TOML config. Every problem raises :class:`ConfigError`."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return _build(raw, path.resolve(), hashlib.sha256(data).hexdigest())
