"""Seeded screenshot perturbations: mask, zoom-in crop, Gaussian noise.

Each operator is a pure function of (source, seed, params). Visual operators
never touch instruction, history or injected text.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Union

import numpy as np
from PIL import Image

from ..errors import GoldTooLarge, MissingGoldBox, NoMaskCandidates
from ..trajectory import Box, History, LayoutElement, Step, boxes_overlap
from .spec import GAUSS_LEVELS, InjectedText, PerturbationKind, PerturbationSpec, PerturbedContext

Source = Union[Step, PerturbedContext]


def load_screenshot(step: Step) -> np.ndarray:
    with Image.open(step.screenshot_path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if arr.shape[:2] != (step.screen_height, step.screen_width):
        raise ValueError(
            f"{step.screenshot_path}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"step declares {step.screen_width}x{step.screen_height}"
        )
    return arr


def save_png(arr: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path, format="PNG", optimize=False)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    arr.flags.writeable = False
    return arr


def normal_context(step: Step, image: np.ndarray | None = None, *, trajectory_id: str = "",
                   instruction: str = "", history: History = History(),
                   seed: int = 0) -> PerturbedContext:
    """The unperturbed baseline for one step."""
    img = load_screenshot(step) if image is None else image
    return PerturbedContext(
        trajectory_id=trajectory_id,
        step_idx=step.step_idx,
        instruction=instruction,
        screenshot=_frozen(img),
        remapped_gold=step,
        history=history,
        applied=PerturbationSpec(PerturbationKind.NORMAL, seed),
    )


def _source(src: Source, image: np.ndarray | None) -> PerturbedContext:
    if isinstance(src, PerturbedContext):
        if src.kind is not PerturbationKind.NORMAL:
            raise ValueError("perturbations apply to the Normal baseline only")
        return src
    return normal_context(src, image)


def _derived(src: PerturbedContext, screenshot: np.ndarray, gold: Step, spec: PerturbationSpec,
             injected: InjectedText | None = None) -> PerturbedContext:
    return PerturbedContext(
        trajectory_id=src.trajectory_id,
        step_idx=src.step_idx,
        instruction=src.instruction,
        screenshot=_frozen(screenshot),
        remapped_gold=gold,
        history=src.history,
        applied=spec,
        injected_text=injected,
    )


def mask_candidates(step: Step) -> list[int]:
    """Indices of layout elements whose boxes do not overlap the gold box."""
    if step.gold_bbox is None:
        raise MissingGoldBox(f"step {step.step_idx}: mask needs a gold_bbox")
    return [i for i, el in enumerate(step.layout) if not boxes_overlap(el.bbox, step.gold_bbox)]


def _ceil_count(fraction: float, n: int) -> int:
    # round() guards against 0.3 * 10 == 3.0000000000000004
    return min(n, math.ceil(round(fraction * n, 9)))


def perturb_mask(step: Source, seed: int, mask_fraction: float = 0.5, *,
                 image: np.ndarray | None = None) -> PerturbedContext:
    """Black out a seeded subset of layout elements that avoid the gold box."""
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError(f"mask_fraction must be in [0, 1], got {mask_fraction}")
    src = _source(step, image)
    gold = src.remapped_gold
    candidates = mask_candidates(gold)
    if not candidates:
        raise NoMaskCandidates(
            f"step {gold.step_idx}: none of {len(gold.layout)} layout elements avoid the gold box"
        )
    k = _ceil_count(mask_fraction, len(candidates))
    rng = np.random.default_rng(seed)
    chosen = sorted(int(candidates[i]) for i in rng.choice(len(candidates), size=k, replace=False))
    out = np.array(src.screenshot, copy=True)
    for i in chosen:
        x1, y1, x2, y2 = gold.layout[i].bbox
        out[y1:y2, x1:x2] = 0
    spec = PerturbationSpec(PerturbationKind.MASK, seed,
                            {"mask_fraction": mask_fraction, "masked_elements": chosen})
    return _derived(src, out, gold, spec)


def _shift_box(box: Box, dx: int, dy: int) -> Box:
    return (box[0] - dx, box[1] - dy, box[2] - dx, box[3] - dy)


def zoom_remap(step: Step, window: Box) -> Step:
    """Translate a step's annotations into the frame of crop ``window``."""
    x0, y0, x1, y1 = window
    cw, ch = x1 - x0, y1 - y0
    g = step.gold_action
    if g.point is not None:
        g = replace(g, x=g.x - x0, y=g.y - y0)
    layout = []
    for el in step.layout:
        bx1, by1 = max(el.bbox[0], x0), max(el.bbox[1], y0)
        bx2, by2 = min(el.bbox[2], x1), min(el.bbox[3], y1)
        if bx1 < bx2 and by1 < by2:
            layout.append(LayoutElement((bx1 - x0, by1 - y0, bx2 - x0, by2 - y0), el.label))
    return replace(
        step,
        screen_width=cw,
        screen_height=ch,
        gold_action=g,
        gold_bbox=None if step.gold_bbox is None else _shift_box(step.gold_bbox, x0, y0),
        layout=tuple(layout),
    )


def zoom_window(step: Step, seed: int, crop_fraction: float) -> Box:
    """Seeded crop window of ``crop_fraction`` per axis that fully contains the gold box."""
    if not 0.0 < crop_fraction <= 1.0:
        raise ValueError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    if step.gold_bbox is None:
        raise MissingGoldBox(f"step {step.step_idx}: zoom needs a gold_bbox")
    W, H = step.screen_width, step.screen_height
    cw = max(1, min(W, int(round(crop_fraction * W))))
    ch = max(1, min(H, int(round(crop_fraction * H))))
    gx1, gy1, gx2, gy2 = step.gold_bbox
    lo_x, hi_x = max(0, gx2 - cw), min(gx1, W - cw)
    lo_y, hi_y = max(0, gy2 - ch), min(gy1, H - ch)
    pt = step.gold_action.point
    if pt is not None:  # the gold point must land strictly inside the crop
        lo_x, lo_y = max(lo_x, pt[0] - cw + 1), max(lo_y, pt[1] - ch + 1)
    if lo_x > hi_x or lo_y > hi_y:
        raise GoldTooLarge(
            f"step {step.step_idx}: gold box {list(step.gold_bbox)} does not fit a {cw}x{ch} crop"
        )
    rng = np.random.default_rng(seed)
    x0 = int(rng.integers(lo_x, hi_x + 1))
    y0 = int(rng.integers(lo_y, hi_y + 1))
    return (x0, y0, x0 + cw, y0 + ch)


def perturb_zoom(step: Source, seed: int, crop_fraction: float = 0.6, *,
                 image: np.ndarray | None = None) -> PerturbedContext:
    """Crop to a seeded window containing the gold box; no rescaling."""
    src = _source(step, image)
    window = zoom_window(src.remapped_gold, seed, crop_fraction)
    x0, y0, x1, y1 = window
    out = np.array(src.screenshot[y0:y1, x0:x1], copy=True)
    spec = PerturbationSpec(PerturbationKind.ZOOM_IN, seed,
                            {"crop_fraction": crop_fraction, "crop_window": list(window)})
    return _derived(src, out, zoom_remap(src.remapped_gold, window), spec)


def gauss_image(image: np.ndarray, seed: int, p: float, mode: str = "additive",
                sigma_base: float = 51.0) -> np.ndarray:
    """Per-pixel, per-channel Gaussian noise.

    ``additive``: ``clip(v + N(0, (p*sigma_base)^2))``.
    ``blend``: ``(1-p)*v + p*u`` with ``u ~ clip(N(127.5, 51^2))``.
    The same standard-normal draw is scaled for every ``p``, so the deviation
    from the source grows monotonically with ``p`` for a fixed seed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise intensity must be in [0, 1], got {p}")
    z = np.random.default_rng(seed).standard_normal(image.shape)
    v = image.astype(np.float64)
    if mode == "additive":
        out = v + p * sigma_base * z
    elif mode == "blend":
        u = np.clip(127.5 + 51.0 * z, 0.0, 255.0)
        out = (1.0 - p) * v + p * u
    else:
        raise ValueError(f"unknown noise mode {mode!r}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def perturb_gauss(step: Source, seed: int, p: float = 0.3, mode: str = "additive", *,
                  sigma_base: float = 51.0, image: np.ndarray | None = None) -> PerturbedContext:
    src = _source(step, image)
    out = gauss_image(src.screenshot, seed, p, mode, sigma_base)
    kind = next((k for k, lvl in GAUSS_LEVELS.items() if abs(lvl - p) < 1e-12), None)
    params = {"p": p, "noise_mode": mode, "sigma_base": sigma_base}
    if kind is None:
        # off-grid intensities (e.g. p = 0) are diagnostics filed under the nearest level
        kind = min(GAUSS_LEVELS, key=lambda k: abs(GAUSS_LEVELS[k] - p))
        params["diagnostic"] = True
    return _derived(src, out, src.remapped_gold, PerturbationSpec(kind, seed, params))
