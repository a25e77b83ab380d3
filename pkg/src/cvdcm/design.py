"""Pivoted stated-choice designs with regime-dependent travel-time levels.

Levels are deltas from the respondent's current housing cost and commute.  A
task survives the full factorial only if every attribute differs between the
two alternatives and one alternative is cheaper while the other is faster.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset import Alternative, ChoiceTask
from .errors import ValidationError
from .seeding import stream

HHC_LEVELS = (-225, -150, -75, 0, 75, 150, 225)
TTI_LEVELS_BY_BAND = {
    (10, 20): (-5, 0, 5, 10, 15),
    (20, 30): (-10, -5, 0, 5, 10, 15),
    (30, math.inf): (-15, -10, -5, 0, 5, 10, 15),
}
TASKS_PER_RESPONDENT = 15


@dataclass(frozen=True)
class Regime:
    tt_band: tuple
    hhc_levels: tuple
    tti_levels: tuple


@dataclass(frozen=True, order=True)
class TaskTemplate:
    hhc_a: int
    tti_a: int
    hhc_b: int
    tti_b: int

    def is_valid(self) -> bool:
        if self.hhc_a == self.hhc_b or self.tti_a == self.tti_b:
            return False
        # lower cost and lower time are both preferred
        return (self.hhc_a < self.hhc_b) != (self.tti_a < self.tti_b)


def levels_for(current_tt: float) -> Regime:
    """Attribute levels for a respondent with the given current commute (minutes).

    A commute of exactly 10 minutes is placed in the lowest band.
    """
    if current_tt is None or not math.isfinite(current_tt) or current_tt < 0:
        raise ValidationError(f"current travel time must be a non-negative number, got {current_tt}")
    if current_tt < 10:
        raise ValidationError(f"respondents with a current travel time below 10 minutes are ineligible (got {current_tt})")
    for (lo, hi), tti in TTI_LEVELS_BY_BAND.items():
        if current_tt <= hi:
            return Regime((lo, hi), HHC_LEVELS, tti)
    raise AssertionError("unreachable")


def enumerate_templates(regime: Regime) -> list:
    alts = list(itertools.product(regime.hhc_levels, regime.tti_levels))
    out = []
    for (ha, ta), (hb, tb) in itertools.product(alts, alts):
        t = TaskTemplate(ha, ta, hb, tb)
        if t.is_valid():
            out.append(t)
    return out


class ImagePool:
    """Image ids grouped so eligible images per respondent municipality are looked up once."""

    def __init__(self, images):
        records = list(images.values()) if isinstance(images, dict) else list(images)
        self.ids = np.array([im.image_id for im in records], dtype=object)
        self.months = np.array([int(im.month) for im in records])
        self.municipality = np.array([im.municipality for im in records], dtype=object)
        self._cache = {}

    def eligible(self, municipality) -> np.ndarray:
        if municipality not in self._cache:
            if municipality is None:
                idx = np.arange(len(self.ids))
            else:
                idx = np.flatnonzero(self.municipality != municipality)
            self._cache[municipality] = idx
        return self._cache[municipality]


def assign_images(
    template: TaskTemplate,
    image_manifest,
    respondent_municipality,
    rng: np.random.Generator,
    respondent_id: str = "r0",
    task_id: str = "t0",
) -> ChoiceTask:
    pool = image_manifest if isinstance(image_manifest, ImagePool) else ImagePool(image_manifest)
    idx = pool.eligible(respondent_municipality)
    if idx.size < 2:
        raise ValidationError(
            f"need at least 2 images outside municipality {respondent_municipality!r}, found {idx.size}"
        )
    a, b = rng.choice(idx, size=2, replace=False)
    alts = (
        Alternative(template.hhc_a, template.tti_a, str(pool.ids[a]), int(pool.months[a])),
        Alternative(template.hhc_b, template.tti_b, str(pool.ids[b]), int(pool.months[b])),
    )
    return ChoiceTask(respondent_id, task_id, alts)


def build_respondent_design(
    current_tt: float,
    manifest,
    municipality,
    seed: int,
    n_tasks: int = TASKS_PER_RESPONDENT,
    respondent_id: str = "r0",
    templates: Optional[Sequence[TaskTemplate]] = None,
) -> list:
    if n_tasks < 1:
        raise ValidationError("n_tasks must be at least 1")
    if templates is None:
        templates = enumerate_templates(levels_for(current_tt))
    pool = manifest if isinstance(manifest, ImagePool) else ImagePool(manifest)
    rng = stream(seed, "design", respondent_id)
    picks = rng.integers(0, len(templates), size=n_tasks)
    return [
        assign_images(templates[k], pool, municipality, rng, respondent_id, f"{respondent_id}-{i:02d}")
        for i, k in enumerate(picks)
    ]


def build_design(respondents: Sequence[dict], manifest, seed: int, n_tasks: int = TASKS_PER_RESPONDENT) -> list:
    """Designs for many respondents.

    ``respondents`` holds dicts with ``respondent_id``, ``current_tt`` and
    ``municipality``.  Each respondent gets an independent seeded stream.
    """
    pool = ImagePool(manifest)
    cache = {}
    tasks = []
    for r in respondents:
        regime = levels_for(r["current_tt"])
        if regime.tt_band not in cache:
            cache[regime.tt_band] = enumerate_templates(regime)
        tasks.extend(
            build_respondent_design(
                r["current_tt"], pool, r.get("municipality"), seed, n_tasks, r["respondent_id"], cache[regime.tt_band]
            )
        )
    return tasks
