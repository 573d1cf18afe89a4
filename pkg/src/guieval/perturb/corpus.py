"""Materialize robustness corpora: one context per (step, kind) plus a Normal baseline."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from ..errors import MalformedDataset, PerturbationError
from ..trajectory import Action, History, HistoryEntry, Trajectory, build_history, step_from_dict, step_to_dict
from .spec import (
    ALL_KINDS,
    DEFAULT_PARAMS,
    GAUSS_LEVELS,
    KIND_ORDER,
    InjectedText,
    PerturbationKind,
    PerturbedContext,
    derive_seed,
)
from .textual import TextGenerator, perturb_textual
from .visual import load_screenshot, normal_context, perturb_gauss, perturb_mask, perturb_zoom, save_png


@dataclass(frozen=True)
class SkipRecord:
    trajectory_id: str
    step_idx: int
    kind: PerturbationKind
    reason: str
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"trajectory_id": self.trajectory_id, "step_idx": self.step_idx,
                "kind": self.kind.value, "reason": self.reason, "message": self.message}


@dataclass
class RCorpus:
    contexts: list[PerturbedContext] = field(default_factory=list)
    skips: list[SkipRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.contexts)


def _one_step(traj: Trajectory, step_idx: int, kinds: Sequence[PerturbationKind], seed: int,
              params: Mapping[str, Any], generator: TextGenerator | None,
              corpus: Sequence[Trajectory]) -> list[PerturbedContext | SkipRecord]:
    step = traj.steps[step_idx]
    image = load_screenshot(step)
    history = build_history(traj, step_idx)
    tid = traj.trajectory_id
    base = normal_context(step, image, trajectory_id=tid, instruction=traj.instruction, history=history,
                          seed=derive_seed(seed, tid, step_idx, PerturbationKind.NORMAL))
    out: list[PerturbedContext | SkipRecord] = [base]
    for kind in kinds:
        s = derive_seed(seed, tid, step_idx, kind)
        try:
            if kind is PerturbationKind.MASK:
                ctx = perturb_mask(base, s, params["mask_fraction"])
            elif kind is PerturbationKind.ZOOM_IN:
                ctx = perturb_zoom(base, s, params["crop_fraction"])
            elif kind in GAUSS_LEVELS:
                ctx = perturb_gauss(base, s, GAUSS_LEVELS[kind], params["noise_mode"],
                                    sigma_base=params["sigma_base"])
            else:
                ctx = perturb_textual((traj, step_idx, history), kind, s, generator,
                                      corpus=corpus, image=base.screenshot)
        except PerturbationError as exc:
            out.append(SkipRecord(tid, step_idx, kind, exc.code, str(exc)))
            continue
        out.append(ctx)
    return out


def iter_r_corpus(steps: Iterable[tuple[Trajectory, int]], kinds: Sequence[PerturbationKind | str] = ALL_KINDS,
                  seed: int = 0, *, params: Mapping[str, Any] | None = None,
                  generator: TextGenerator | None = None, corpus: Sequence[Trajectory] | None = None,
                  workers: int = 1) -> Iterator[PerturbedContext | SkipRecord]:
    """Yield contexts and skip records in canonical (trajectory_id, step_idx, kind) order."""
    merged = {**DEFAULT_PARAMS, **(params or {})}
    kinds = sorted({PerturbationKind(k) for k in kinds} - {PerturbationKind.NORMAL}, key=KIND_ORDER.__getitem__)
    steps = sorted(steps, key=lambda ts: (ts[0].trajectory_id, ts[1]))
    pool = list(corpus) if corpus is not None else list({t.trajectory_id: t for t, _ in steps}.values())

    def job(ts: tuple[Trajectory, int]):
        return _one_step(ts[0], ts[1], kinds, seed, merged, generator, pool)

    if workers <= 1:
        for ts in steps:
            yield from job(ts)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        for batch in ex.map(job, steps):  # map preserves input order
            yield from batch


def build_r_corpus(steps: Iterable[tuple[Trajectory, int]], kinds: Sequence[PerturbationKind | str] = ALL_KINDS,
                   seed: int = 0, **kwargs: Any) -> RCorpus:
    out = RCorpus()
    for rec in iter_r_corpus(steps, kinds, seed, **kwargs):
        (out.skips if isinstance(rec, SkipRecord) else out.contexts).append(rec)
    return out


# -- manifest I/O -----------------------------------------------------------------

def _history_to_list(h: History) -> list[dict[str, Any]]:
    return [{"step_idx": e.step_idx, "action": e.action.to_dict(), "thought": e.thought} for e in h.entries]


def _history_from_list(raw: list[Mapping[str, Any]]) -> History:
    return History(tuple(HistoryEntry(e["step_idx"], Action.from_dict(e["action"]), e.get("thought")) for e in raw))


def image_name(ctx: PerturbedContext) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in ctx.trajectory_id)
    return f"{safe}__{ctx.step_idx:03d}__{ctx.kind.value}.png"


def context_record(ctx: PerturbedContext, screenshot_out_path: str) -> dict[str, Any]:
    return {
        "trajectory_id": ctx.trajectory_id,
        "step_idx": ctx.step_idx,
        "kind": ctx.kind.value,
        "seed": ctx.applied.seed,
        "params": dict(ctx.applied.params),
        "screenshot_out_path": screenshot_out_path,
        "remapped_gold": step_to_dict(ctx.remapped_gold),
        "injected_text": None if ctx.injected_text is None else ctx.injected_text.to_dict(),
        "instruction": ctx.instruction,
        "history": _history_to_list(ctx.history),
    }


def write_corpus(records: Iterable[PerturbedContext | SkipRecord], out_dir: str | os.PathLike,
                 header: Mapping[str, Any] | None = None) -> tuple[Path, int, int]:
    """Write PNGs plus ``manifest.jsonl`` / ``skips.jsonl``; returns (manifest, n_contexts, n_skips)."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    n_ctx = n_skip = 0
    with open(manifest, "w", encoding="utf-8") as mf, open(out_dir / "skips.jsonl", "w", encoding="utf-8") as sf:
        for rec in records:
            if isinstance(rec, SkipRecord):
                sf.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                n_skip += 1
                continue
            name = image_name(rec)
            save_png(rec.screenshot, img_dir / name)
            line = context_record(rec, f"images/{name}")
            if header:
                line["meta"] = dict(header)
            mf.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
            n_ctx += 1
    return manifest, n_ctx, n_skip


@dataclass(frozen=True)
class ManifestEntry:
    trajectory_id: str
    step_idx: int
    kind: PerturbationKind
    seed: int
    params: Mapping[str, Any]
    screenshot_path: Path
    gold: Any  # Step in the perturbed frame
    injected_text: InjectedText | None
    instruction: str
    history: History


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent.resolve()
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{n}"
            try:
                d = json.loads(line)
                out.append(ManifestEntry(
                    trajectory_id=d["trajectory_id"],
                    step_idx=d["step_idx"],
                    kind=PerturbationKind(d["kind"]),
                    seed=d["seed"],
                    params=d.get("params", {}),
                    screenshot_path=root / d["screenshot_out_path"],
                    gold=step_from_dict(d["remapped_gold"], where),
                    injected_text=InjectedText.from_dict(d.get("injected_text")),
                    instruction=d.get("instruction", ""),
                    history=_history_from_list(d.get("history", [])),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                if isinstance(exc, MalformedDataset):
                    raise
                raise MalformedDataset(f"bad manifest line: {exc}", where) from None
    return out
