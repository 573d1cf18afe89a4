"""Estimator-style wrapper so perturbations compose with sklearn pipelines."""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..trajectory import Trajectory, build_history
from .spec import GAUSS_LEVELS, TEXTUAL_KINDS, PerturbationKind, PerturbedContext, derive_seed
from .textual import perturb_textual
from .visual import load_screenshot, normal_context, perturb_gauss, perturb_mask, perturb_zoom


class ScreenshotPerturber(BaseEstimator, TransformerMixin):
    """Apply one perturbation kind to a batch of ``(trajectory, step_idx)`` pairs.

    Stateless: ``fit`` only validates parameters and records the corpus used
    for ``IrrelevantKnowledge`` donors. Per-item seeds come from
    :func:`derive_seed`, so output does not depend on batch composition.
    """

    def __init__(self, kind="Mask", seed=0, mask_fraction=0.5, crop_fraction=0.6, noise_mode="additive",
                 sigma_base=51.0):
        self.kind = kind
        self.seed = seed
        self.mask_fraction = mask_fraction
        self.crop_fraction = crop_fraction
        self.noise_mode = noise_mode
        self.sigma_base = sigma_base

    def fit(self, X: Sequence[tuple[Trajectory, int]], y=None):
        self.kind_ = PerturbationKind(self.kind)
        if self.kind_ is PerturbationKind.NORMAL:
            raise ValueError("Normal is the baseline, not a perturbation")
        if not 0.0 < self.mask_fraction <= 1.0 or not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("mask_fraction and crop_fraction must be in (0, 1]")
        self.corpus_ = list({t.trajectory_id: t for t, _ in X}.values())
        return self

    def _one(self, traj: Trajectory, idx: int) -> PerturbedContext:
        s = derive_seed(self.seed, traj.trajectory_id, idx, self.kind_)
        if self.kind_ in TEXTUAL_KINDS:
            return perturb_textual((traj, idx), self.kind_, s, corpus=self.corpus_)
        step = traj.steps[idx]
        base = normal_context(step, load_screenshot(step), trajectory_id=traj.trajectory_id,
                              instruction=traj.instruction, history=build_history(traj, idx))
        if self.kind_ is PerturbationKind.MASK:
            return perturb_mask(base, s, self.mask_fraction)
        if self.kind_ is PerturbationKind.ZOOM_IN:
            return perturb_zoom(base, s, self.crop_fraction)
        return perturb_gauss(base, s, GAUSS_LEVELS[self.kind_], self.noise_mode, sigma_base=self.sigma_base)

    def transform(self, X: Sequence[tuple[Trajectory, int]]) -> list[PerturbedContext]:
        check_is_fitted(self, "kind_")
        return [self._one(t, i) for t, i in X]
