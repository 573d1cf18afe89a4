"""Seeded perturbations of the agent's textual context.

The screenshot is passed through untouched; only history or injected text
blocks change.
"""

from __future__ import annotations

import hashlib
import json
import logging
from functools import lru_cache
from importlib import resources
from typing import Protocol, Sequence

import numpy as np

from ..chat import ChatClient
from ..errors import EndpointError, EndpointUnreachable, GeneratorUnavailable, TooShortToShuffle
from ..trajectory import History, HistoryEntry, Trajectory, build_history
from .spec import InjectedText, PerturbationKind, PerturbationSpec, PerturbedContext, TEXTUAL_KINDS
from .visual import load_screenshot, normal_context

logger = logging.getLogger(__name__)

STATE_CONFLICT_TEMPLATE = "Note: the task '{instruction}' has already been completed successfully."
IRRELEVANT_MEMORY_COUNT = 3


class TextGenerator(Protocol):
    name: str

    def state_conflict(self, trajectory: Trajectory) -> str: ...


class TemplateGenerator:
    name = "template"

    def state_conflict(self, trajectory: Trajectory) -> str:
        return STATE_CONFLICT_TEMPLATE.format(instruction=trajectory.instruction)


class ChatGenerator:
    """Asks an instruct model for a sentence claiming the task is already done."""

    name = "llm"

    def __init__(self, client: ChatClient, fallback: bool = True):
        self.client = client
        self.fallback = fallback

    def state_conflict(self, trajectory: Trajectory) -> str:
        steps = "; ".join(trajectory.low_level_steps())
        prompt = (
            "Write one short sentence stating that the following phone task has already been "
            f"completed. Task: {trajectory.instruction}" + (f" Steps: {steps}" if steps else "")
        )
        try:
            reply = self.client.complete([{"role": "user", "content": prompt}], temperature=0.0, max_tokens=64)
            text = reply.content.strip()
            if text:
                return text
            raise EndpointError("empty generation")
        except (EndpointError, EndpointUnreachable) as exc:
            if not self.fallback:
                raise GeneratorUnavailable(f"state-conflict generator failed: {exc}") from exc
            logger.warning("generator unavailable (%s); using template", exc)
            return TemplateGenerator().state_conflict(trajectory)


def pool_bytes() -> bytes:
    return resources.files("guieval.data").joinpath("irrelevant_memory.json").read_bytes()


def pool_digest() -> str:
    return hashlib.sha256(pool_bytes()).hexdigest()


@lru_cache(maxsize=1)
def irrelevant_pool() -> tuple[str, ...]:
    return tuple(json.loads(pool_bytes())["snippets"])


def non_identity_permutation(n: int, rng: np.random.Generator) -> list[int]:
    """Uniform over permutations of ``range(n)`` other than the identity (n >= 2)."""
    if n < 2:
        raise TooShortToShuffle(f"cannot shuffle {n} item(s) into a different order")
    ident = list(range(n))
    while True:
        perm = [int(i) for i in rng.permutation(n)]
        if perm != ident:
            return perm


def shuffle_history(history: History, rng: np.random.Generator) -> tuple[History, list[int]]:
    """Reorder the history's actions; step slots keep their indices."""
    perm = non_identity_permutation(len(history), rng)
    src = history.entries
    entries = tuple(
        HistoryEntry(src[i].step_idx, src[j].action, src[j].thought) for i, j in enumerate(perm)
    )
    return History(entries), perm


def _bulleted(items: Sequence[str]) -> str:
    return "\n".join(f"{i + 1}. {s}" for i, s in enumerate(items))


def knowledge_list(trajectory: Trajectory) -> list[str]:
    """Low-level step list; falls back to rendered gold actions when unannotated."""
    steps = trajectory.low_level_steps()
    return steps if steps else [s.gold_action.describe() for s in trajectory.steps]


def perturb_textual(item: tuple[Trajectory, int, History] | tuple[Trajectory, int],
                    kind: PerturbationKind | str, seed: int,
                    generator: TextGenerator | None = None, *,
                    corpus: Sequence[Trajectory] = (), image: np.ndarray | None = None) -> PerturbedContext:
    """Apply one textual perturbation to ``(trajectory, step_idx[, history])``."""
    kind = PerturbationKind(kind)
    if kind not in TEXTUAL_KINDS:
        raise ValueError(f"{kind.value} is not a textual perturbation")
    traj, step_idx = item[0], item[1]
    history = item[2] if len(item) > 2 else build_history(traj, step_idx)
    step = traj.steps[step_idx]
    img = load_screenshot(step) if image is None else image
    base = normal_context(step, img, trajectory_id=traj.trajectory_id,
                          instruction=traj.instruction, history=history)
    rng = np.random.default_rng(seed)
    params: dict = {}
    injected: InjectedText | None = None

    if kind is PerturbationKind.STATE_CONFLICT:
        gen = generator or TemplateGenerator()
        injected = InjectedText("status", gen.state_conflict(traj))
        params["generator"] = gen.name
    elif kind is PerturbationKind.BAD_MEMORY:
        if len(history) < 2:
            raise TooShortToShuffle(f"{traj.trajectory_id}#{step_idx}: BadMemory needs >= 2 history entries")
        history, perm = shuffle_history(history, rng)
        params["permutation"] = perm
    elif kind is PerturbationKind.BAD_KNOWLEDGE:
        steps = traj.low_level_steps()
        if len(steps) < 2:
            raise TooShortToShuffle(f"{traj.trajectory_id}: BadKnowledge needs >= 2 low-level instructions")
        perm = non_identity_permutation(len(steps), rng)
        items = [steps[j] for j in perm]
        injected = InjectedText("knowledge", _bulleted(items), tuple(items))
        params["permutation"] = perm
    elif kind is PerturbationKind.IRRELEVANT_MEMORY:
        pool = irrelevant_pool()
        picks = sorted(int(i) for i in rng.choice(len(pool), size=min(IRRELEVANT_MEMORY_COUNT, len(pool)), replace=False))
        items = [pool[i] for i in picks]
        injected = InjectedText("memory", " ".join(items), tuple(items))
        params.update(pool_indices=picks, pool_sha256=pool_digest())
    else:  # IRRELEVANT_KNOWLEDGE
        others = sorted({t.trajectory_id: t for t in corpus if t.trajectory_id != traj.trajectory_id}.items())
        if not others:
            raise TooShortToShuffle("IrrelevantKnowledge needs at least two trajectories in the corpus")
        donor = others[int(rng.integers(len(others)))][1]
        items = knowledge_list(donor)
        injected = InjectedText("knowledge", _bulleted(items), tuple(items))
        params["donor_trajectory_id"] = donor.trajectory_id

    return PerturbedContext(
        trajectory_id=base.trajectory_id,
        step_idx=base.step_idx,
        instruction=base.instruction,
        screenshot=base.screenshot,
        remapped_gold=base.remapped_gold,
        history=history,
        applied=PerturbationSpec(kind, seed, params),
        injected_text=injected,
    )
