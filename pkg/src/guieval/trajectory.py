"""Core domain types: actions, steps, trajectories, histories, dataset I/O.

All types are frozen dataclasses so they can be shared freely between worker
threads. Coordinates are absolute pixels in the screenshot's native
resolution; datasets declaring ``"coordinates": "normalized_1000"`` are
converted on load.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import IndexOutOfRange, MalformedAction, MalformedDataset, MissingAsset

Box = tuple[int, int, int, int]


class ActionKind(str, enum.Enum):
    CLICK = "CLICK"
    TYPE = "TYPE"
    SCROLL = "SCROLL"
    PRESS_BACK = "PRESS_BACK"
    PRESS_HOME = "PRESS_HOME"
    ENTER = "ENTER"
    OPEN_APP = "OPEN_APP"
    WAIT = "WAIT"
    LONG_PRESS = "LONG_PRESS"
    COMPLETE = "COMPLETE"
    IMPOSSIBLE = "IMPOSSIBLE"


class Direction(str, enum.Enum):
    UP = "UP"
    DOWN = "DOWN"
    LEFT = "LEFT"
    RIGHT = "RIGHT"


class Difficulty(str, enum.Enum):
    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"


class Scenario(str, enum.Enum):
    ENVIRONMENTAL_DISTRACTION = "EnvironmentalDistraction"
    REAL_WORLD_ANOMALY = "RealWorldAnomaly"
    ADVERSARIAL_MISLEADING = "AdversarialMisleading"


POINT_KINDS = frozenset({ActionKind.CLICK, ActionKind.LONG_PRESS})

# kind -> the one payload field it requires (besides x/y for point kinds)
_PAYLOAD = {
    ActionKind.TYPE: "text",
    ActionKind.SCROLL: "direction",
    ActionKind.OPEN_APP: "app_name",
}


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    x: int | None = None
    y: int | None = None
    text: str | None = None
    direction: Direction | None = None
    app_name: str | None = None

    def __post_init__(self) -> None:
        try:
            kind = ActionKind(self.kind)
        except ValueError:
            raise MalformedAction(f"unknown action type {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        if self.direction is not None and not isinstance(self.direction, Direction):
            try:
                object.__setattr__(self, "direction", Direction(str(self.direction).upper()))
            except ValueError:
                raise MalformedAction(f"unknown scroll direction {self.direction!r}") from None

        has_point = self.x is not None or self.y is not None
        if kind in POINT_KINDS:
            if self.x is None or self.y is None:
                raise MalformedAction(f"{kind.value} requires x and y")
            if isinstance(self.x, bool) or isinstance(self.y, bool):
                raise MalformedAction("coordinates must be integers")
            if self.x < 0 or self.y < 0:
                raise MalformedAction(f"negative coordinates ({self.x}, {self.y})")
        elif has_point:
            raise MalformedAction(f"{kind.value} must not carry coordinates")

        required = _PAYLOAD.get(kind)
        for name in ("text", "direction", "app_name"):
            present = getattr(self, name) is not None
            if name == required and not present:
                raise MalformedAction(f"{kind.value} requires {name}")
            if name != required and present:
                raise MalformedAction(f"{kind.value} must not carry {name}")

    @property
    def point(self) -> tuple[int, int] | None:
        if self.kind in POINT_KINDS:
            return (self.x, self.y)  # type: ignore[return-value]
        return None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.kind.value}
        if self.kind in POINT_KINDS:
            out["x"], out["y"] = self.x, self.y
        if self.text is not None:
            out["text"] = self.text
        if self.direction is not None:
            out["direction"] = self.direction.value
        if self.app_name is not None:
            out["app_name"] = self.app_name
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Action":
        if not isinstance(data, Mapping) or "type" not in data:
            raise MalformedAction("action must be an object with a 'type' field")
        allowed = {"type", "x", "y", "text", "direction", "app_name"}
        extra = set(data) - allowed
        if extra:
            raise MalformedAction(f"unexpected action fields {sorted(extra)}")
        x, y = data.get("x"), data.get("y")
        for v in (x, y):
            if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
                raise MalformedAction(f"coordinate {v!r} is not an integer")
        return cls(
            kind=data["type"],
            x=x,
            y=y,
            text=data.get("text"),
            direction=data.get("direction"),
            app_name=data.get("app_name"),
        )

    def describe(self) -> str:
        """Short human-readable rendering used in prompts."""
        if self.kind in POINT_KINDS:
            return f"{self.kind.value}({self.x}, {self.y})"
        if self.kind is ActionKind.TYPE:
            return f'TYPE("{self.text}")'
        if self.kind is ActionKind.SCROLL:
            return f"SCROLL({self.direction.value})"  # type: ignore[union-attr]
        if self.kind is ActionKind.OPEN_APP:
            return f'OPEN_APP("{self.app_name}")'
        return self.kind.value


def check_box(box: Sequence[int], width: int, height: int) -> Box:
    """Validate an ``[x1, y1, x2, y2]`` rectangle against screen bounds."""
    if len(box) != 4 or any(isinstance(v, bool) or not isinstance(v, int) for v in box):
        raise ValueError(f"rectangle must be four integers, got {box!r}")
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"rectangle {list(box)} has non-positive area")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise ValueError(f"rectangle {list(box)} outside {width}x{height} screen")
    return (x1, y1, x2, y2)


def point_in_box(x: float, y: float, box: Sequence[float]) -> bool:
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


def boxes_overlap(a: Sequence[int], b: Sequence[int]) -> bool:
    """Positive-area intersection under half-open pixel semantics."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _check_point(action: Action, width: int, height: int) -> None:
    if action.point is not None:
        x, y = action.point
        if x >= width or y >= height:
            raise ValueError(f"point ({x}, {y}) outside {width}x{height} screen")


@dataclass(frozen=True)
class LayoutElement:
    bbox: Box
    label: str = ""


@dataclass(frozen=True)
class Step:
    step_idx: int
    screenshot_ref: str
    screen_width: int
    screen_height: int
    gold_action: Action
    layout: tuple[LayoutElement, ...] = ()
    gold_bbox: Box | None = None
    low_level_instruction: str | None = None
    # directory screenshot_ref is relative to; not part of the value
    root: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.screen_width <= 0 or self.screen_height <= 0:
            raise ValueError("screen dimensions must be positive")
        object.__setattr__(self, "layout", tuple(self.layout))
        for el in self.layout:
            check_box(el.bbox, self.screen_width, self.screen_height)
        _check_point(self.gold_action, self.screen_width, self.screen_height)
        if self.gold_bbox is not None:
            box = check_box(self.gold_bbox, self.screen_width, self.screen_height)
            object.__setattr__(self, "gold_bbox", box)
            pt = self.gold_action.point
            if pt is not None and not point_in_box(*pt, box):
                raise ValueError(f"gold point {pt} outside gold_bbox {list(box)}")

    @property
    def screenshot_path(self) -> Path:
        p = Path(self.screenshot_ref)
        if not p.is_absolute() and self.root is not None:
            p = Path(self.root) / p
        return p


@dataclass(frozen=True)
class Trajectory:
    trajectory_id: str
    instruction: str
    steps: tuple[Step, ...]
    source: str = ""
    difficulty: Difficulty | None = None
    scenario: Scenario | None = None
    distraction_action: Action | None = None
    distraction_bbox: Box | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("trajectory has no steps")
        idx = [s.step_idx for s in self.steps]
        if idx != list(range(len(idx))):
            raise ValueError(f"step_idx values must be 0..{len(idx) - 1}, got {idx}")
        if self.difficulty is not None:
            object.__setattr__(self, "difficulty", Difficulty(self.difficulty))
        if self.scenario is not None:
            object.__setattr__(self, "scenario", Scenario(self.scenario))
        if (self.scenario is None) != (self.distraction_action is None):
            raise ValueError("scenario and distraction_action must be both present or both absent")
        if self.distraction_bbox is not None and self.distraction_action is None:
            raise ValueError("distraction_bbox without distraction_action")
        if self.distraction_action is not None:
            for s in self.steps:
                _check_point(self.distraction_action, s.screen_width, s.screen_height)
                if self.distraction_bbox is not None:
                    check_box(self.distraction_bbox, s.screen_width, s.screen_height)

    @property
    def is_safety_item(self) -> bool:
        return self.distraction_action is not None

    def low_level_steps(self) -> list[str]:
        return [s.low_level_instruction for s in self.steps if s.low_level_instruction]


@dataclass(frozen=True)
class HistoryEntry:
    step_idx: int
    action: Action
    thought: str | None = None


@dataclass(frozen=True)
class History:
    entries: tuple[HistoryEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        idx = [e.step_idx for e in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"history step_idx must be strictly increasing, got {idx}")

    def __len__(self) -> int:
        return len(self.entries)

    def actions(self) -> list[Action]:
        return [e.action for e in self.entries]


def build_history(trajectory: Trajectory, upto_step: int) -> History:
    """Teacher-forced history: gold actions of steps ``0..upto_step-1``."""
    if not 0 <= upto_step <= len(trajectory.steps):
        raise IndexOutOfRange(
            f"upto_step={upto_step} outside 0..{len(trajectory.steps)} for {trajectory.trajectory_id}"
        )
    return History(tuple(
        HistoryEntry(s.step_idx, s.gold_action, s.low_level_instruction)
        for s in trajectory.steps[:upto_step]
    ))


# -- serialization -------------------------------------------------------------

def _scale(v: int, dim: int) -> int:
    return int(round(v * dim / 1000))


def _normalize_action(a: Mapping[str, Any], w: int, h: int) -> dict[str, Any]:
    out = dict(a)
    if out.get("x") is not None and out.get("y") is not None:
        out["x"] = min(_scale(out["x"], w), w - 1)
        out["y"] = min(_scale(out["y"], h), h - 1)
    return out


def _normalize_box(b: Sequence[int], w: int, h: int) -> list[int]:
    return [_scale(b[0], w), _scale(b[1], h), _scale(b[2], w), _scale(b[3], h)]


def _require(obj: Mapping[str, Any], key: str, where: str, typ: type | tuple = object) -> Any:
    if key not in obj:
        raise MalformedDataset("missing required field", where, key)
    val = obj[key]
    if not isinstance(val, typ) or isinstance(val, bool) and typ is int:
        raise MalformedDataset(f"wrong type {type(val).__name__}", where, key)
    return val


def _box(val: Any, w: int, h: int, where: str, name: str) -> Box:
    try:
        return check_box(list(val), w, h)
    except (TypeError, ValueError) as exc:
        raise MalformedDataset(str(exc), where, name) from None


def step_from_dict(d: Mapping[str, Any], where: str, normalized: bool = False, root: str | None = None) -> Step:
    if not isinstance(d, Mapping):
        raise MalformedDataset("step must be an object", where)
    w = _require(d, "screen_width", where, int)
    h = _require(d, "screen_height", where, int)
    raw_action = _require(d, "gold_action", where, dict)
    layout_raw = d.get("layout", [])
    bbox = d.get("gold_bbox")
    if normalized:
        raw_action = _normalize_action(raw_action, w, h)
        layout_raw = [dict(el, bbox=_normalize_box(el["bbox"], w, h)) if isinstance(el, Mapping) and "bbox" in el else el
                      for el in layout_raw]
        if bbox is not None:
            bbox = _normalize_box(bbox, w, h)
    try:
        action = Action.from_dict(raw_action)
    except MalformedAction as exc:
        raise MalformedDataset(str(exc), where, "gold_action") from None
    layout = []
    for j, el in enumerate(layout_raw):
        if not isinstance(el, Mapping) or "bbox" not in el:
            raise MalformedDataset("layout element needs a bbox", f"{where}.layout[{j}]")
        layout.append(LayoutElement(_box(el["bbox"], w, h, f"{where}.layout[{j}]", "bbox"), str(el.get("label", ""))))
    try:
        return Step(
            step_idx=_require(d, "step_idx", where, int),
            screenshot_ref=_require(d, "screenshot_ref", where, str),
            screen_width=w,
            screen_height=h,
            gold_action=action,
            layout=tuple(layout),
            gold_bbox=None if bbox is None else _box(bbox, w, h, where, "gold_bbox"),
            low_level_instruction=d.get("low_level_instruction"),
            root=root,
        )
    except ValueError as exc:
        if isinstance(exc, MalformedDataset):
            raise
        raise MalformedDataset(str(exc), where) from None


def trajectory_from_dict(d: Mapping[str, Any], where: str = "trajectory", normalized: bool = False,
                         root: str | None = None) -> Trajectory:
    if not isinstance(d, Mapping):
        raise MalformedDataset("trajectory must be an object", where)
    steps_raw = _require(d, "steps", where, list)
    steps = [step_from_dict(s, f"{where}.steps[{i}]", normalized, root) for i, s in enumerate(steps_raw)]
    distraction = d.get("distraction_action")
    dbox = d.get("distraction_bbox")
    if distraction is not None:
        if normalized and steps:
            distraction = _normalize_action(distraction, steps[0].screen_width, steps[0].screen_height)
            if dbox is not None:
                dbox = _normalize_box(dbox, steps[0].screen_width, steps[0].screen_height)
        try:
            distraction = Action.from_dict(distraction)
        except MalformedAction as exc:
            raise MalformedDataset(str(exc), where, "distraction_action") from None
    try:
        return Trajectory(
            trajectory_id=_require(d, "trajectory_id", where, str),
            instruction=_require(d, "instruction", where, str),
            steps=tuple(steps),
            source=str(d.get("source", "")),
            difficulty=d.get("difficulty"),
            scenario=d.get("scenario"),
            distraction_action=distraction,
            distraction_bbox=None if dbox is None else tuple(dbox),
        )
    except ValueError as exc:
        if isinstance(exc, MalformedDataset):
            raise
        raise MalformedDataset(str(exc), where) from None


def step_to_dict(step: Step, rel_to: str | None = None) -> dict[str, Any]:
    ref = step.screenshot_ref
    if rel_to is not None and step.root is not None and not Path(ref).is_absolute():
        ref = os.path.relpath(step.screenshot_path, rel_to)
    out: dict[str, Any] = {
        "step_idx": step.step_idx,
        "screenshot_ref": Path(ref).as_posix(),
        "screen_width": step.screen_width,
        "screen_height": step.screen_height,
        "layout": [{"bbox": list(el.bbox), "label": el.label} for el in step.layout],
        "gold_action": step.gold_action.to_dict(),
    }
    if step.gold_bbox is not None:
        out["gold_bbox"] = list(step.gold_bbox)
    if step.low_level_instruction is not None:
        out["low_level_instruction"] = step.low_level_instruction
    return out


def trajectory_to_dict(t: Trajectory, rel_to: str | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {
        "trajectory_id": t.trajectory_id,
        "instruction": t.instruction,
        "source": t.source,
        "steps": [step_to_dict(s, rel_to) for s in t.steps],
    }
    if t.difficulty is not None:
        out["difficulty"] = t.difficulty.value
    if t.scenario is not None:
        out["scenario"] = t.scenario.value
        out["distraction_action"] = t.distraction_action.to_dict()  # type: ignore[union-attr]
    if t.distraction_bbox is not None:
        out["distraction_bbox"] = list(t.distraction_bbox)
    return out


def parse_dataset(data: Any, root: str | None = None) -> tuple[str, list[Trajectory]]:
    if not isinstance(data, Mapping):
        raise MalformedDataset("top level must be an object", "$")
    dataset_id = _require(data, "dataset_id", "$", str)
    trajs_raw = _require(data, "trajectories", "$", list)
    coords = data.get("coordinates", "pixel")
    if coords not in ("pixel", "normalized_1000"):
        raise MalformedDataset(f"unknown coordinate convention {coords!r}", "$", "coordinates")
    normalized = coords == "normalized_1000"
    trajs = [trajectory_from_dict(t, f"trajectories[{i}]", normalized, root) for i, t in enumerate(trajs_raw)]
    seen: set[str] = set()
    for i, t in enumerate(trajs):
        if t.trajectory_id in seen:
            raise MalformedDataset(f"duplicate trajectory_id {t.trajectory_id!r}", f"trajectories[{i}]", "trajectory_id")
        seen.add(t.trajectory_id)
    return dataset_id, trajs


def load_dataset(path: str | os.PathLike, strict: bool = True) -> list[Trajectory]:
    """Load and validate a dataset file.

    In strict mode every referenced screenshot must exist; lazy mode defers
    that check to first image access.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedDataset(f"invalid JSON: {exc}", str(path)) from None
    _, trajs = parse_dataset(data, root=str(path.parent.resolve()))
    if strict:
        for t in trajs:
            for s in t.steps:
                if not s.screenshot_path.is_file():
                    raise MissingAsset(f"{t.trajectory_id} step {s.step_idx}: {s.screenshot_path} not found")
    return trajs


def dataset_to_dict(trajectories: Iterable[Trajectory], dataset_id: str, rel_to: str | None = None) -> dict[str, Any]:
    return {
        "dataset_id": dataset_id,
        "coordinates": "pixel",
        "trajectories": [trajectory_to_dict(t, rel_to) for t in trajectories],
    }


def dump_dataset(trajectories: Iterable[Trajectory], path: str | os.PathLike, dataset_id: str,
                 extra: Mapping[str, Any] | None = None) -> Path:
    """Write a dataset file; screenshot refs are rewritten relative to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dataset_to_dict(trajectories, dataset_id, rel_to=str(path.parent.resolve()))
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def with_difficulty(t: Trajectory, difficulty: Difficulty | str | None) -> Trajectory:
    return replace(t, difficulty=None if difficulty is None else Difficulty(difficulty))
