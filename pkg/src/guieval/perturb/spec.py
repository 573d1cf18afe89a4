from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from ..trajectory import History, Step


class PerturbationKind(str, enum.Enum):
    NORMAL = "Normal"
    MASK = "Mask"
    ZOOM_IN = "ZoomIn"
    GAUSS30 = "Gauss30"
    GAUSS50 = "Gauss50"
    GAUSS70 = "Gauss70"
    STATE_CONFLICT = "StateConflict"
    BAD_MEMORY = "BadMemory"
    BAD_KNOWLEDGE = "BadKnowledge"
    IRRELEVANT_MEMORY = "IrrelevantMemory"
    IRRELEVANT_KNOWLEDGE = "IrrelevantKnowledge"

    @property
    def is_visual(self) -> bool:
        return self in VISUAL_KINDS

    @property
    def is_textual(self) -> bool:
        return self in TEXTUAL_KINDS


VISUAL_KINDS = (
    PerturbationKind.MASK,
    PerturbationKind.ZOOM_IN,
    PerturbationKind.GAUSS30,
    PerturbationKind.GAUSS50,
    PerturbationKind.GAUSS70,
)
TEXTUAL_KINDS = (
    PerturbationKind.STATE_CONFLICT,
    PerturbationKind.BAD_MEMORY,
    PerturbationKind.BAD_KNOWLEDGE,
    PerturbationKind.IRRELEVANT_MEMORY,
    PerturbationKind.IRRELEVANT_KNOWLEDGE,
)
ALL_KINDS = VISUAL_KINDS + TEXTUAL_KINDS
KIND_ORDER = {k: i for i, k in enumerate(PerturbationKind)}

GAUSS_LEVELS = {
    PerturbationKind.GAUSS30: 0.30,
    PerturbationKind.GAUSS50: 0.50,
    PerturbationKind.GAUSS70: 0.70,
}

DEFAULT_PARAMS: dict[str, Any] = {
    "mask_fraction": 0.5,
    "crop_fraction": 0.6,
    "noise_mode": "additive",
    "sigma_base": 51.0,
}


def derive_seed(seed: int, trajectory_id: str, step_idx: int, kind: PerturbationKind | str) -> int:
    """Stable 64-bit per-item seed, independent of iteration order."""
    kind = PerturbationKind(kind).value
    digest = hashlib.sha256(f"{int(seed)}|{trajectory_id}|{int(step_idx)}|{kind}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    seed: int
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        kind = PerturbationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        params = dict(self.params)
        if kind in GAUSS_LEVELS:
            p = params.setdefault("p", GAUSS_LEVELS[kind])
            if abs(p - GAUSS_LEVELS[kind]) > 1e-12 and not params.get("diagnostic"):
                raise ValueError(f"{kind.value} carries intensity {GAUSS_LEVELS[kind]}, got {p}")
        object.__setattr__(self, "params", params)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "seed": self.seed, "params": dict(self.params)}


@dataclass(frozen=True)
class InjectedText:
    slot: str  # memory | knowledge | status
    content: str
    items: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.slot not in ("memory", "knowledge", "status"):
            raise ValueError(f"unknown injection slot {self.slot!r}")
        object.__setattr__(self, "items", tuple(self.items))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"slot": self.slot, "content": self.content}
        if self.items:
            out["items"] = list(self.items)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "InjectedText | None":
        if d is None:
            return None
        return cls(d["slot"], d["content"], tuple(d.get("items", ())))


@dataclass(frozen=True, eq=False)
class PerturbedContext:
    """One evaluation item after a perturbation.

    ``screenshot`` is a read-only ``uint8`` array of shape ``(H, W, 3)``;
    ``remapped_gold`` is the step with gold annotations in that frame.
    """

    trajectory_id: str
    step_idx: int
    instruction: str
    screenshot: np.ndarray
    remapped_gold: Step
    history: History
    applied: PerturbationSpec
    injected_text: InjectedText | None = None

    @property
    def kind(self) -> PerturbationKind:
        return self.applied.kind

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.trajectory_id, self.step_idx, KIND_ORDER[self.kind])
