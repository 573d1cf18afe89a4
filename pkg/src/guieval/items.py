"""Evaluation items: one (trajectory, step, perturbation) unit of agent work."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .perturb.spec import InjectedText, PerturbationKind, PerturbedContext
from .perturb.visual import load_screenshot
from .trajectory import Action, Box, Difficulty, History, Scenario, Step, Trajectory, build_history


@dataclass(frozen=True, eq=False)
class EvalItem:
    trajectory_id: str
    step_idx: int
    instruction: str
    step: Step
    history: History = History()
    perturbation: str = PerturbationKind.NORMAL.value
    injected_text: InjectedText | None = None
    scenario: Scenario | None = None
    difficulty: Difficulty | None = None
    distraction_action: Action | None = None
    distraction_bbox: Box | None = None
    screenshot_path: Path | None = None
    image: np.ndarray | None = field(default=None, repr=False)

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.trajectory_id, self.step_idx, self.perturbation)

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.screenshot_path is not None:
            with Image.open(self.screenshot_path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
        return load_screenshot(self.step)

    def image_bytes(self) -> bytes:
        """PNG bytes of the item's screenshot."""
        if self.image is None and self.screenshot_path is not None and self.screenshot_path.suffix.lower() == ".png":
            return self.screenshot_path.read_bytes()
        if self.image is None and self.screenshot_path is None and self.step.screenshot_path.suffix.lower() == ".png":
            return self.step.screenshot_path.read_bytes()
        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(self.load_image()), mode="RGB").save(buf, format="PNG")
        return buf.getvalue()


def items_from_trajectory(t: Trajectory, max_steps: int | None = None) -> Iterator[EvalItem]:
    """Unperturbed, teacher-forced items for every step (up to ``max_steps``)."""
    steps = t.steps if max_steps is None else t.steps[:max_steps]
    for s in steps:
        yield EvalItem(
            trajectory_id=t.trajectory_id,
            step_idx=s.step_idx,
            instruction=t.instruction,
            step=s,
            history=build_history(t, s.step_idx),
            scenario=t.scenario,
            difficulty=t.difficulty,
            distraction_action=t.distraction_action,
            distraction_bbox=t.distraction_bbox,
        )


def items_from_trajectories(trajs: Iterable[Trajectory], max_steps: int | None = None) -> list[EvalItem]:
    return [it for t in trajs for it in items_from_trajectory(t, max_steps)]


def item_from_context(ctx: PerturbedContext, screenshot_path: Path | None = None,
                      trajectory: Trajectory | None = None) -> EvalItem:
    return EvalItem(
        trajectory_id=ctx.trajectory_id,
        step_idx=ctx.step_idx,
        instruction=ctx.instruction,
        step=ctx.remapped_gold,
        history=ctx.history,
        perturbation=ctx.kind.value,
        injected_text=ctx.injected_text,
        difficulty=None if trajectory is None else trajectory.difficulty,
        screenshot_path=screenshot_path,
        image=None if screenshot_path is not None else ctx.screenshot,
    )
