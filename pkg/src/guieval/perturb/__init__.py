"""Seeded visual and textual perturbations of a step's context."""

from .corpus import RCorpus, SkipRecord, build_r_corpus, iter_r_corpus, read_manifest, write_corpus
from .estimators import ScreenshotPerturber
from .spec import (
    ALL_KINDS,
    DEFAULT_PARAMS,
    GAUSS_LEVELS,
    TEXTUAL_KINDS,
    VISUAL_KINDS,
    InjectedText,
    PerturbationKind,
    PerturbationSpec,
    PerturbedContext,
    derive_seed,
)
from .textual import ChatGenerator, TemplateGenerator, perturb_textual
from .visual import gauss_image, normal_context, perturb_gauss, perturb_mask, perturb_zoom, zoom_remap

__all__ = [
    "ALL_KINDS", "DEFAULT_PARAMS", "GAUSS_LEVELS", "TEXTUAL_KINDS", "VISUAL_KINDS",
    "ChatGenerator", "InjectedText", "PerturbationKind", "PerturbationSpec", "PerturbedContext",
    "RCorpus", "ScreenshotPerturber", "SkipRecord", "TemplateGenerator",
    "build_r_corpus", "derive_seed", "gauss_image", "iter_r_corpus", "normal_context", "perturb_gauss",
    "perturb_mask", "perturb_textual", "perturb_zoom", "read_manifest", "write_corpus", "zoom_remap",
]
