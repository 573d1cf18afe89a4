"""Benchmark curation: value filtering, ensemble difficulty voting and
difficulty-stratified sampling."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import MissingResult, PoolTooSmall, ShortStratum
from .trajectory import Difficulty, Trajectory, with_difficulty

LABELS = (Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD)

# agent key -> trajectory id -> trajectory SR in [0, 1]
Results = Mapping[str, Mapping[str, float]]


@dataclass(frozen=True)
class CuratorConfig:
    small_ensemble: tuple[str, ...]
    large_ensemble: tuple[str, ...]
    tau: float = 0.9
    ratio: tuple[float, float, float] = (4.0, 3.0, 3.0)
    sample_size: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "small_ensemble", tuple(self.small_ensemble))
        object.__setattr__(self, "large_ensemble", tuple(self.large_ensemble))
        object.__setattr__(self, "ratio", tuple(float(r) for r in self.ratio))
        if not self.small_ensemble or not self.large_ensemble:
            raise ValueError("both ensembles must be non-empty")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if len(self.ratio) != 3 or min(self.ratio) < 0 or sum(self.ratio) <= 0:
            raise ValueError(f"ratio must be three non-negative weights with a positive sum, got {self.ratio}")
        if self.sample_size < 0:
            raise ValueError("sample_size must be non-negative")


@dataclass(frozen=True)
class DifficultyVote:
    trajectory_id: str
    srs: Mapping[str, float]
    vote_count: int
    label: Difficulty | None

    def to_dict(self) -> dict[str, Any]:
        return {"trajectory_id": self.trajectory_id, "srs": dict(self.srs), "vote_count": self.vote_count,
                "label": None if self.label is None else self.label.value}


def _gather(ids: Iterable[str], results: Results, agents: Sequence[str]) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, float]] = {}
    missing = []
    for tid in ids:
        row = {}
        for a in agents:
            try:
                row[a] = float(results[a][tid])
            except KeyError:
                missing.append((a, tid))
        table[tid] = row
    if missing:
        raise MissingResult(missing)
    return table


def value_filter(trajectory_ids: Iterable[str], small_results: Results, tau: float,
                 agents: Sequence[str] | None = None) -> list[str]:
    """Keep trajectories that at least one small agent fails (SR <= tau)."""
    agents = list(small_results) if agents is None else list(agents)
    table = _gather(trajectory_ids, small_results, agents)
    return [tid for tid, row in table.items() if any(sr <= tau for sr in row.values())]


def label_for_votes(v: int, n_agents: int) -> Difficulty | None:
    """Unanimous -> Easy, one vote -> Hard for a three-agent ensemble.

    Larger or smaller ensembles split the vote fraction into thirds.
    """
    if v <= 0:
        return None
    frac = Fraction(v, n_agents)
    if frac > Fraction(2, 3):
        return Difficulty.EASY
    if frac > Fraction(1, 3):
        return Difficulty.MEDIUM
    return Difficulty.HARD


def vote_and_label(survivors: Iterable[str], large_results: Results, tau: float,
                   agents: Sequence[str] | None = None) -> list[DifficultyVote]:
    agents = list(large_results) if agents is None else list(agents)
    table = _gather(survivors, large_results, agents)
    out = []
    for tid, row in table.items():
        v = sum(1 for sr in row.values() if sr > tau)
        out.append(DifficultyVote(tid, row, v, label_for_votes(v, len(agents))))
    return out


def largest_remainder(total: int, weights: Sequence[Fraction | float]) -> list[int]:
    """Hamilton apportionment; equal remainders favour the earlier stratum."""
    w = [Fraction(x) for x in weights]
    s = sum(w)
    if total == 0 or s == 0:
        return [0] * len(w)
    ideal = [total * x / s for x in w]
    q = [math.floor(t) for t in ideal]
    left = total - sum(q)
    order = sorted(range(len(w)), key=lambda i: (-(ideal[i] - q[i]), i))
    for i in order[:left]:
        q[i] += 1
    return q


def waterfill_targets(total: int, weights: Sequence[float], available: Sequence[int]) -> tuple[list[Fraction], set[int]]:
    """Proportional targets where short strata are capped at their size and
    their deficit is shared by the rest in proportion to their weights."""
    w = [Fraction(x) for x in weights]
    capped: set[int] = set()
    while True:
        active = [i for i in range(len(w)) if i not in capped and w[i] > 0]
        remaining = total - sum(available[i] for i in capped)
        ws = sum(w[i] for i in active)
        targets = [Fraction(available[i]) if i in capped else
                   (remaining * w[i] / ws if i in active and ws > 0 else Fraction(0)) for i in range(len(w))]
        newly = {i for i in active if targets[i] >= available[i]}
        if not newly:
            return targets, capped
        capped |= newly


@dataclass
class StratifiedSample:
    selected: dict[Difficulty, list[str]]
    quotas: dict[Difficulty, int]
    counts: dict[Difficulty, int]
    short_strata: list[Difficulty] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [tid for d in LABELS for tid in self.selected[d]]

    def labels(self) -> dict[str, Difficulty]:
        return {tid: d for d in LABELS for tid in self.selected[d]}


def allocate(sample_size: int, ratio: Sequence[float], available: Sequence[int]) -> tuple[list[int], list[int], set[int]]:
    """Return (requested quotas, final counts, short strata indices)."""
    quotas = largest_remainder(sample_size, ratio)
    usable = sum(a for a, r in zip(available, ratio) if r > 0)
    if usable < sample_size:
        raise PoolTooSmall(f"pool of {usable} labelled trajectories (positive-weight strata) < sample size {sample_size}")
    targets, capped = waterfill_targets(sample_size, ratio, available)
    free = [i for i in range(len(ratio)) if i not in capped]
    counts = [available[i] if i in capped else 0 for i in range(len(ratio))]
    rest = largest_remainder(sample_size - sum(counts), [targets[i] for i in free]) if free else []
    for i, c in zip(free, rest):
        counts[i] = c
    short = {i for i in range(len(ratio)) if quotas[i] > available[i]}
    return quotas, counts, short


def stratum_rng(seed: int, label: Difficulty) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), LABELS.index(label)])


def stratified_sample(voted: Iterable[DifficultyVote] | Mapping[str, Difficulty | str | None],
                      ratio: Sequence[float] = (4, 3, 3), sample_size: int = 0, seed: int = 0) -> StratifiedSample:
    """Seeded sampling without replacement within each difficulty label."""
    if isinstance(voted, Mapping):
        pairs = [(tid, None if d is None else Difficulty(d)) for tid, d in voted.items()]
    else:
        pairs = [(v.trajectory_id, v.label) for v in voted]
    pool: dict[Difficulty, list[str]] = {d: [] for d in LABELS}
    for tid, d in pairs:
        if d is not None:
            pool[d].append(tid)
    for d in LABELS:
        pool[d].sort()
    available = [len(pool[d]) for d in LABELS]
    quotas, counts, short = allocate(sample_size, ratio, available)
    selected = {}
    for d, c in zip(LABELS, counts):
        idx = stratum_rng(seed, d).choice(len(pool[d]), size=c, replace=False) if c else []
        selected[d] = sorted(pool[d][int(i)] for i in idx)
    short_labels = [LABELS[i] for i in sorted(short)]
    for d in short_labels:
        warnings.warn(ShortStratum(
            f"{d.value}: quota {quotas[LABELS.index(d)]} exceeds {available[LABELS.index(d)]} available; "
            "deficit redistributed"
        ), stacklevel=2)
    return StratifiedSample(selected, dict(zip(LABELS, quotas)), dict(zip(LABELS, counts)), short_labels)


class DifficultyCurator(BaseEstimator, TransformerMixin):
    """Estimator wrapper around the three curation stages.

    ``fit`` takes per-agent trajectory SRs (``{agent: {trajectory_id: sr}}``)
    covering both ensembles; ``transform`` maps a list of trajectories to the
    sampled subset with difficulty labels filled in.
    """

    def __init__(self, small_ensemble=(), large_ensemble=(), tau=0.9, ratio=(4, 3, 3),
                 sample_size=0, seed=0):
        self.small_ensemble = small_ensemble
        self.large_ensemble = large_ensemble
        self.tau = tau
        self.ratio = ratio
        self.sample_size = sample_size
        self.seed = seed

    def _config(self) -> CuratorConfig:
        return CuratorConfig(self.small_ensemble, self.large_ensemble, self.tau, self.ratio,
                             self.sample_size, self.seed)

    def fit(self, X: Results, y=None, trajectory_ids: Iterable[str] | None = None):
        cfg = self._config()
        if trajectory_ids is None:
            ids: set[str] = set()
            for a in cfg.small_ensemble:
                ids.update(X.get(a, {}))
            trajectory_ids = sorted(ids)
        trajectory_ids = list(trajectory_ids)
        self.survivors_ = value_filter(trajectory_ids, X, cfg.tau, cfg.small_ensemble)
        self.votes_ = vote_and_label(self.survivors_, X, cfg.tau, cfg.large_ensemble)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ShortStratum)
            self.sample_ = stratified_sample(self.votes_, cfg.ratio, cfg.sample_size, cfg.seed)
        self.warnings_ = [str(w.message) for w in caught if issubclass(w.category, ShortStratum)]
        self.n_input_ = len(trajectory_ids)
        return self

    def transform(self, X: Sequence[Trajectory]) -> list[Trajectory]:
        check_is_fitted(self, "sample_")
        labels = self.sample_.labels()
        by_id = {t.trajectory_id: t for t in X}
        missing = [tid for tid in labels if tid not in by_id]
        if missing:
            raise KeyError(f"sampled trajectories absent from input: {missing[:5]}")
        return [with_difficulty(by_id[tid], labels[tid]) for tid in self.sample_.ids]

    def provenance(self) -> dict[str, Any]:
        check_is_fitted(self, "sample_")
        return {
            "tau": self.tau,
            "ratio": list(self.ratio),
            "seed": self.seed,
            "sample_size": self.sample_size,
            "n_input": self.n_input_,
            "n_survivors": len(self.survivors_),
            "quotas": {d.value: q for d, q in self.sample_.quotas.items()},
            "counts": {d.value: c for d, c in self.sample_.counts.items()},
            "short_strata": [d.value for d in self.sample_.short_strata],
            "warnings": list(self.warnings_),
            "votes": [v.to_dict() for v in self.votes_],
        }


def trajectory_sr(step_successes: Mapping[tuple[str, str], Sequence[bool]]) -> dict[str, dict[str, float]]:
    """``{(agent, trajectory_id): [success per step]}`` -> per-agent trajectory SR."""
    out: dict[str, dict[str, float]] = defaultdict(dict)
    for (agent, tid), flags in step_successes.items():
        out[agent][tid] = sum(bool(f) for f in flags) / len(flags) if flags else 0.0
    return dict(out)
