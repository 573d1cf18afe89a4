"""``guieval`` command line: validate, curate, perturb, run, metrics, rank, report.

Stages talk to each other only through files under the output directory:

    curate/p_subset.json      curated P subset with difficulty labels
    perturb/manifest.jsonl    robustness corpus (plus images/ and skips.jsonl)
    logs/<subset>/<agent>.jsonl
    metrics/metrics.json|csv
    rank/rank.json|csv
    report/<agent>.json|md
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from ._version import __version__
from .chat import ChatClient
from .codec import DEFAULT_RULE, ParseRule, load_rules
from .config import SUBSETS, HarnessConfig, load_config
from .curator import DifficultyCurator, trajectory_sr, value_filter, vote_and_label
from .errors import ConfigError, GuiEvalError, MissingInput
from .items import EvalItem, items_from_trajectories
from .metrics import MetricsTable, compute_metrics, dumps_table, expected_keys
from .perturb.corpus import iter_r_corpus, read_manifest, write_corpus
from .perturb.textual import ChatGenerator, TemplateGenerator
from .ranking import RankTable, rank_subsets
from .report import DeterministicBackend, LLMBackend, analyze_agent, render_markdown, validate_report
from .runner import HttpAgent, MockAgent, RunConfig, read_logs, run_subset
from .trajectory import dump_dataset, load_dataset

logger = logging.getLogger("guieval")


# -- helpers -------------------------------------------------------------------------------

def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path, stage: str) -> Any:
    if not path.is_file():
        raise MissingInput(f"{path} not found; run `{stage}` first")
    return json.loads(path.read_text(encoding="utf-8"))


def _dataset(cfg: HarnessConfig, subset: str):
    path = cfg.datasets.get(subset)
    if path is None and subset == "p":
        path = cfg.output_dir / "curate" / "p_subset.json"
        if not path.is_file():
            raise MissingInput(f"no datasets.p configured and {path} not found; run `curate` first")
    if path is None:
        raise ConfigError(f"datasets.{subset} is not configured")
    return load_dataset(path)


def _agents(cfg: HarnessConfig, only: str | None) -> list[str]:
    if only is not None:
        if only not in cfg.endpoints:
            raise ConfigError(f"unknown endpoint key {only!r}")
        return [only]
    return sorted(cfg.endpoints)


def _make_agent(cfg: HarnessConfig, key: str, seed: int, offline: bool):
    ec = cfg.endpoints[key]
    if offline or ec.mock is not None or not ec.endpoint.base_url:
        script = None
        if ec.mock == "scripted":
            script = json.loads(Path(ec.script).read_text(encoding="utf-8"))  # type: ignore[arg-type]
        return MockAgent(ec.mock or "oracle", seed, agent_key=key, latency_ms=cfg.run.mock_latency_ms,
                         script=script)
    return HttpAgent(ec.endpoint, timeout=cfg.run.timeout)


def _rules(cfg: HarnessConfig) -> dict[str, ParseRule]:
    rules = {"default": DEFAULT_RULE}
    if cfg.parse_rules is not None:
        rules.update(load_rules(cfg.parse_rules))
    return rules


def _run_config(cfg: HarnessConfig, subset: str, log_path: Path, seed: int) -> RunConfig:
    r = cfg.run
    return RunConfig(subset=subset, log_path=log_path, max_steps=r.max_steps, in_flight=r.in_flight,
                     retries=r.retries, backoff=r.backoff, timeout=r.timeout, seed=seed, match=cfg.match)


def _r_items(cfg: HarnessConfig) -> list[EvalItem]:
    manifest = cfg.output_dir / "perturb" / "manifest.jsonl"
    if not manifest.is_file():
        raise MissingInput(f"{manifest} not found; run `perturb` first")
    return [EvalItem(trajectory_id=m.trajectory_id, step_idx=m.step_idx, instruction=m.instruction, step=m.gold,
                     history=m.history, perturbation=m.kind.value, injected_text=m.injected_text,
                     screenshot_path=m.screenshot_path) for m in read_manifest(manifest)]


def _items(cfg: HarnessConfig, subset: str) -> list[EvalItem]:
    if subset == "r":
        return _r_items(cfg)
    return items_from_trajectories(_dataset(cfg, subset), cfg.run.max_steps)


# -- verbs ----------------------------------------------------------------------------------

def cmd_validate(cfg: HarnessConfig, args) -> dict[str, Any]:
    _agents(cfg, args.agent)
    out: dict[str, Any] = {"datasets": {}, "endpoints": {}}
    for name, path in sorted(cfg.datasets.items()):
        trajs = load_dataset(path)
        out["datasets"][name] = {"path": str(path), "trajectories": len(trajs),
                                 "steps": sum(len(t.steps) for t in trajs)}
        if name == "s" and any(not t.is_safety_item for t in trajs):
            raise ConfigError(f"datasets.s ({path}) contains trajectories without a scenario/distraction")
    for key, ec in sorted(cfg.endpoints.items()):
        if not args.offline and ec.mock is None and not ec.endpoint.base_url:
            raise ConfigError(f"endpoint {key!r} has neither base_url nor a mock policy")
        mocked = args.offline or ec.mock is not None or not ec.endpoint.base_url
        out["endpoints"][key] = f"mock:{ec.mock or 'oracle'}" if mocked else ec.endpoint.base_url
    _rules(cfg)
    return out


def cmd_curate(cfg: HarnessConfig, args) -> dict[str, Any]:
    cur = cfg.curate
    if not cur.small_ensemble or not cur.large_ensemble:
        raise ConfigError("curate needs small_ensemble and large_ensemble")
    if "pool" not in cfg.datasets:
        raise ConfigError("datasets.pool is not configured")
    pool = load_dataset(cfg.datasets["pool"])
    out_dir = cfg.output_dir / "curate"
    if cur.results is not None:
        if not cur.results.is_file():
            raise MissingInput(f"{cur.results} not found")
        results = json.loads(cur.results.read_text(encoding="utf-8"))
    else:
        flags: dict[tuple[str, str], list[bool]] = {}
        for key in sorted(set(cur.small_ensemble) | set(cur.large_ensemble)):
            agent = _make_agent(cfg, key, args.seed, args.offline)
            log_path = out_dir / "logs" / f"{key}.jsonl"
            run_subset(agent, items_from_trajectories(pool, cfg.run.max_steps),
                       _run_config(cfg, "pool", log_path, args.seed), _rules(cfg))
            for log in sorted(read_logs(log_path), key=lambda g: g.key):
                flags.setdefault((key, log.trajectory_id), []).append(log.verdict.step_success)
        results = trajectory_sr(flags)
    ids = [t.trajectory_id for t in pool]
    sample_size = cur.sample_size
    if sample_size == 0:
        # keep every labelled survivor
        survivors = value_filter(ids, results, cur.tau, cur.small_ensemble)
        votes = vote_and_label(survivors, results, cur.tau, cur.large_ensemble)
        sample_size = sum(v.label is not None for v in votes)
    curator = DifficultyCurator(cur.small_ensemble, cur.large_ensemble, cur.tau, cur.ratio, sample_size, args.seed)
    curator.fit(results, trajectory_ids=ids)
    selected = curator.transform(pool)
    meta = cfg.meta("curate")
    dump_dataset(selected, out_dir / "p_subset.json", "p-subset", extra={"meta": meta})
    prov = {"meta": meta, **curator.provenance()}
    _write_json(out_dir / "provenance.json", prov)
    for w in curator.warnings_:
        logger.warning("%s", w)
    return {"selected": len(selected), "counts": prov["counts"], "short_strata": prov["short_strata"]}


def cmd_perturb(cfg: HarnessConfig, args) -> dict[str, Any]:
    trajs = _dataset(cfg, "r")
    steps = [(t, s.step_idx) for t in trajs for s in (t.steps if cfg.run.max_steps is None
                                                       else t.steps[:cfg.run.max_steps])]
    ps = cfg.perturb
    if ps.generator == "llm" and not args.offline:
        ep = cfg.endpoints[ps.generator_endpoint].endpoint  # type: ignore[index]
        generator = ChatGenerator(ChatClient(ep.base_url, ep.model, ep.api_key_env, cfg.run.timeout))
    else:
        generator = TemplateGenerator()
    records = iter_r_corpus(steps, ps.kinds, args.seed, params=ps.params, generator=generator,
                            corpus=trajs, workers=ps.workers)
    manifest, n_ctx, n_skip = write_corpus(records, cfg.output_dir / "perturb", header=cfg.meta("perturb"))
    return {"manifest": str(manifest), "contexts": n_ctx, "skipped": n_skip}


def cmd_run(cfg: HarnessConfig, args) -> dict[str, Any]:
    if args.subset is None:
        raise ConfigError("run needs --subset")
    items = _items(cfg, args.subset)
    rules = _rules(cfg)
    out = {}
    for key in _agents(cfg, args.agent):
        log_path = cfg.output_dir / "logs" / args.subset / f"{key}.jsonl"
        agent = _make_agent(cfg, key, args.seed, args.offline)
        summary = run_subset(agent, items, _run_config(cfg, args.subset, log_path, args.seed), rules)
        _write_json(log_path.with_suffix(".meta.json"),
                    {"meta": cfg.meta("run"), "agent_key": key, "subset": args.subset, "requested": summary.requested})
        out[key] = summary.to_dict()
    return out


def cmd_metrics(cfg: HarnessConfig, args) -> dict[str, Any]:
    log_root = cfg.output_dir / "logs"
    logs, expected = [], []
    for subset in SUBSETS:
        files = sorted((log_root / subset).glob("*.jsonl"))
        if not files:
            continue
        sub_logs = [log for f in files for log in read_logs(f)]
        logs += sub_logs
        agents = sorted({log.agent_key for log in sub_logs})
        expected += expected_keys(agents, subset, _items(cfg, subset))
    if not logs:
        raise MissingInput(f"no step logs under {log_root}; run `run` first")
    table = compute_metrics(logs, expected, cfg.robustness)
    out_dir = cfg.output_dir / "metrics"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(dumps_table(table, cfg.meta("metrics")), encoding="utf-8")
    (out_dir / "metrics.csv").write_text(table.to_csv(), encoding="utf-8")
    return {"agents": sorted(table.agents), "path": str(out_dir / "metrics.json")}


def _load_metrics(cfg: HarnessConfig) -> MetricsTable:
    return MetricsTable.from_dict(_read_json(cfg.output_dir / "metrics" / "metrics.json", "metrics"))


def cmd_rank(cfg: HarnessConfig, args) -> dict[str, Any]:
    ranks = rank_subsets(_load_metrics(cfg), cfg.robustness)
    out_dir = cfg.output_dir / "rank"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rank.json").write_text(ranks.to_json(cfg.meta("rank")), encoding="utf-8")
    (out_dir / "rank.csv").write_text(ranks.to_csv(), encoding="utf-8")
    return {"order": ranks.ordered(), "path": str(out_dir / "rank.json")}


def cmd_report(cfg: HarnessConfig, args) -> dict[str, Any]:
    metrics = _load_metrics(cfg)
    rank_path = cfg.output_dir / "rank" / "rank.json"
    ranks = RankTable.from_dict(json.loads(rank_path.read_text(encoding="utf-8"))) if rank_path.is_file() else None
    if cfg.report.backend == "llm" and not args.offline:
        ep = cfg.endpoints[cfg.report.endpoint].endpoint  # type: ignore[index]
        backend: Any = LLMBackend(ChatClient(ep.base_url, ep.model, ep.api_key_env, cfg.run.timeout),
                                  fallback=cfg.report.fallback)
    else:
        backend = DeterministicBackend()
    agents = [args.agent] if args.agent else list(metrics)
    out_dir = cfg.output_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key in agents:
        if key not in metrics.agents:
            raise MissingInput(f"no metrics for agent {key!r}")
        rep = analyze_agent(key, metrics, None if ranks is None else ranks.rows.get(key), backend=backend,
                            provenance=cfg.meta("report"))
        validate_report(rep)
        (out_dir / f"{key}.json").write_text(rep.to_json(), encoding="utf-8")
        (out_dir / f"{key}.md").write_text(render_markdown(rep), encoding="utf-8")
        written.append(key)
    return {"reports": written, "dir": str(out_dir)}


VERBS = {
    "validate": cmd_validate,
    "curate": cmd_curate,
    "perturb": cmd_perturb,
    "run": cmd_run,
    "metrics": cmd_metrics,
    "rank": cmd_rank,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guieval", description="Evaluate GUI agents on safety, performance, "
                                "efficiency and robustness subsets.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--subset", choices=SUBSETS)
    p.add_argument("--agent", help="restrict to one endpoint key")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--offline", action="store_true", help="use mock agents and deterministic backends")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error(exc: BaseException, code: int) -> int:
    rec = exc.to_record() if isinstance(exc, GuiEvalError) else {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=Path(args.out).resolve())
        args.seed = cfg.seed
        result = VERBS[args.verb](cfg, args)
    except ConfigError as exc:
        return _error(exc, 2)
    except GuiEvalError as exc:
        return _error(exc, 1)
    print(json.dumps({"verb": args.verb, **_as_mapping(result)}, sort_keys=True, default=str))
    return 0


def _as_mapping(result: Mapping[str, Any] | None) -> Mapping[str, Any]:
    return {} if result is None else {"result": result}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
