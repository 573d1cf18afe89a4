"""Exception types shared across the harness.

Every error carries a stable ``code`` (its class name) so the CLI can emit
machine-readable error records.
"""

from __future__ import annotations

from typing import Any


class GuiEvalError(Exception):
    """Base class for all harness errors."""

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_record(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self)}


# -- dataset / trajectory model ---------------------------------------------

class MalformedDataset(GuiEvalError, ValueError):
    def __init__(self, message: str, item_path: str = "", field: str = ""):
        self.item_path = item_path
        self.field = field
        where = item_path + (f".{field}" if field else "")
        super().__init__(f"{where}: {message}" if where else message)

    def to_record(self) -> dict[str, Any]:
        rec = super().to_record()
        rec.update(item_path=self.item_path, field=self.field)
        return rec


class MalformedAction(GuiEvalError, ValueError):
    pass


class MissingAsset(GuiEvalError, FileNotFoundError):
    pass


class IndexOutOfRange(GuiEvalError, IndexError):
    pass


# -- action codec -------------------------------------------------------------

class UnparseableResponse(GuiEvalError, ValueError):
    def __init__(self, raw: str, reason: str = "no pattern matched"):
        self.raw = raw
        super().__init__(f"{reason}: {raw[:200]!r}")


class MissingDistraction(GuiEvalError, ValueError):
    pass


# -- perturbations ------------------------------------------------------------

class PerturbationError(GuiEvalError, ValueError):
    """A perturbation cannot be applied to this item; callers record a skip."""


class NoMaskCandidates(PerturbationError):
    pass


class GoldTooLarge(PerturbationError):
    pass


class MissingGoldBox(PerturbationError):
    pass


class TooShortToShuffle(PerturbationError):
    pass


class GeneratorUnavailable(PerturbationError):
    pass


# -- curation -----------------------------------------------------------------

class MissingResult(GuiEvalError, KeyError):
    def __init__(self, missing: list[tuple[str, str]]):
        self.missing = list(missing)
        shown = ", ".join(f"{a}×{t}" for a, t in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"missing agent×trajectory results: {shown}{more}")

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0]


class PoolTooSmall(GuiEvalError, ValueError):
    pass


class ShortStratum(UserWarning):
    """A difficulty stratum had fewer trajectories than its quota."""


# -- evaluation runner --------------------------------------------------------

class EndpointError(GuiEvalError, RuntimeError):
    """Transient endpoint failure; retried by the runner."""


class EndpointUnreachable(GuiEvalError, ConnectionError):
    pass


class LogCorrupt(GuiEvalError, RuntimeError):
    pass


class ScriptMiss(GuiEvalError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else "script miss"


# -- metrics / ranking ----------------------------------------------------------

class IncompleteLog(GuiEvalError, ValueError):
    def __init__(self, missing: list[tuple]):
        self.missing = list(missing)
        shown = ", ".join(map(str, self.missing[:10]))
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"{len(self.missing)} missing log keys: {shown}{more}")


class ZeroBaseline(GuiEvalError, ZeroDivisionError):
    pass


class MisalignedSequences(GuiEvalError, ValueError):
    pass


class InsufficientAgents(GuiEvalError, ValueError):
    pass


# -- reporting ------------------------------------------------------------------

class BackendFailure(GuiEvalError, RuntimeError):
    pass


class MissingExpert(GuiEvalError, ValueError):
    pass


# -- cli ------------------------------------------------------------------------

class ConfigError(GuiEvalError, ValueError):
    pass


class MissingInput(GuiEvalError, FileNotFoundError):
    pass
