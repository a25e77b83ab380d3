"""Synthetic streetscapes with exact ground truth, and choices simulated from a known logit model.

A scene is a raster filled in reading order with sky, built, green, water and
road pixels, so the classes form horizontal bands whose heights follow the
requested fractions.  Small distractor rectangles are painted inside the road
band only; the recorded fractions are counted from the final label raster.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .choice import DEFAULT_SCALING, Scaling, log_probs
from .dataset import ChoiceTask, Dataset
from .design import build_design
from .errors import ValidationError
from .images import Image
from .seeding import stream

CLASSES = ("sky", "built", "green", "water", "road", "clutter")
FEATURES = ("green", "built", "sky", "water")
SKY, BUILT, GREEN, WATER, ROAD, CLUTTER = range(6)

PALETTE = np.array(
    [
        [135, 190, 235],  # sky
        [150, 120, 110],  # built
        [40, 150, 50],  # green
        [30, 70, 170],  # water
        [70, 70, 75],  # road
        [230, 200, 40],  # clutter
    ],
    dtype=float,
)
WINTER_GREEN = np.array([115, 105, 80], dtype=float)
WINTER_MONTHS = (12, 1, 2)
JITTER_SD = 12.0
DEFAULT_PATCH = 8

# default true month constants (December fixed at 0)
REFERENCE_MONTHS = (0.46, 0.02, 0.10, 0.25, 0.28, 0.17, 0.21, 0.24, 0.19, 0.46, -0.11, 0.0)
DEFAULT_ALPHA = {"green": 2.5, "built": -2.0, "sky": 0.5, "water": 1.0}


@dataclass
class SceneParams:
    green_frac: float = 0.0
    built_frac: float = 0.0
    sky_frac: float = 0.0
    water_frac: float = 0.0
    clutter: int = 0
    month: int = 12
    density_proxy: Optional[float] = None

    def __post_init__(self):
        fr = self.fractions()
        if any(f < 0 or f > 1 for f in fr) or sum(fr) > 1 + 1e-12:
            raise ValidationError(f"scene fractions must lie in [0, 1] and sum to at most 1, got {fr}")
        if not 1 <= self.month <= 12:
            raise ValidationError("month must be in 1..12")
        if self.clutter < 0:
            raise ValidationError("clutter must be non-negative")

    def fractions(self) -> tuple:
        return (self.sky_frac, self.built_frac, self.green_frac, self.water_frac)


@dataclass
class TrueModel:
    beta_hhc: float = -0.86
    beta_tti: float = -0.21
    beta_month: np.ndarray = field(default_factory=lambda: np.array(REFERENCE_MONTHS))
    alpha: dict = field(default_factory=lambda: dict(DEFAULT_ALPHA))
    scaling: Scaling = DEFAULT_SCALING

    def __post_init__(self):
        self.beta_month = np.asarray(self.beta_month, dtype=float).reshape(12)
        if self.beta_month[11] != 0:
            raise ValidationError("the December month constant of the true model must be 0")
        unknown = set(self.alpha) - set(CLASSES)
        if unknown:
            raise ValidationError(f"unknown scene features in alpha: {sorted(unknown)}")

    @property
    def vtt(self) -> float:
        return 60 * self.scaling.cost_divisor / self.scaling.time_divisor * self.beta_tti / self.beta_hhc

    def to_dict(self) -> dict:
        return {
            "beta_hhc": self.beta_hhc,
            "beta_tti": self.beta_tti,
            "beta_month": [float(v) for v in self.beta_month],
            "alpha": dict(self.alpha),
            "scaling": self.scaling.to_dict(),
        }


def _class_counts(fractions: Sequence[float], total: int) -> np.ndarray:
    """Pixel counts for sky, built, green, water and road by largest remainder."""
    fr = np.append(np.asarray(fractions, dtype=float), max(0.0, 1.0 - sum(fractions)))
    raw = fr * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.lexsort((np.arange(fr.size), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def gen_image(
    scene: SceneParams,
    resolution: int = 32,
    seed: int = 0,
    image_id: str = "img",
    seasonal_tint: bool = False,
    municipality: Optional[str] = None,
    patch_size: int = DEFAULT_PATCH,
) -> Image:
    if resolution % patch_size:
        warnings.warn(f"resolution {resolution} is not divisible by the patch size {patch_size}", stacklevel=2)
    rng = stream(seed, "scene", image_id)
    h = w = resolution
    counts = _class_counts(scene.fractions(), h * w)
    labels = np.repeat(np.arange(5), counts).reshape(h, w)

    road_rows = np.flatnonzero((labels == ROAD).all(axis=1))
    if scene.clutter and road_rows.size:
        top = road_rows[0]
        for _ in range(scene.clutter):
            rh = int(rng.integers(1, max(2, resolution // 12) + 1))
            rw = int(rng.integers(2, max(3, resolution // 8) + 1))
            if h - top < rh:
                continue
            y = int(rng.integers(top, h - rh + 1))
            x = int(rng.integers(0, w - rw + 1))
            labels[y : y + rh, x : x + rw] = CLUTTER

    palette = PALETTE.copy()
    palette += rng.normal(0, 8.0, size=palette.shape)
    if seasonal_tint and scene.month in WINTER_MONTHS:
        palette[GREEN] = 0.3 * palette[GREEN] + 0.7 * WINTER_GREEN
    px = palette[labels] + rng.normal(0, JITTER_SD, size=(h, w, 3))
    pixels = np.clip(np.rint(px), 0, 255).astype(np.uint8)

    realized = np.bincount(labels.reshape(-1), minlength=6) / (h * w)
    truth = {name: float(realized[i]) for i, name in enumerate(CLASSES)}
    if scene.density_proxy is None:
        density = truth["built"] + float(rng.normal(0, 0.05))
    else:
        density = float(scene.density_proxy)
    return Image(
        image_id=image_id,
        pixels=pixels,
        month=scene.month,
        municipality=municipality,
        density=density,
        ground_truth=truth,
    )


def sample_scene(rng: np.random.Generator, month: Optional[int] = None) -> SceneParams:
    sky = rng.uniform(0.1, 0.35)
    road = rng.uniform(0.1, 0.25)
    middle = 1.0 - sky - road
    b, g, wtr = rng.dirichlet([1.0, 1.0, 0.5]) * middle
    return SceneParams(
        green_frac=g,
        built_frac=b,
        sky_frac=sky,
        water_frac=wtr,
        clutter=int(rng.poisson(2)),
        month=int(rng.integers(1, 13)) if month is None else month,
    )


def generate_images(
    n_images: int,
    resolution: int = 32,
    seed: int = 0,
    n_municipalities: int = 20,
    seasonal_tint: bool = False,
) -> dict:
    rng = stream(seed, "scene-params")
    images = {}
    for k in range(n_images):
        image_id = f"img{k:05d}"
        scene = sample_scene(rng)
        images[image_id] = gen_image(
            scene,
            resolution,
            seed,
            image_id,
            seasonal_tint=seasonal_tint,
            municipality=f"m{int(rng.integers(n_municipalities)):02d}",
        )
    return images


def true_image_utility(ground_truth: dict, alpha: dict) -> float:
    return float(sum(a * ground_truth.get(k, 0.0) for k, a in alpha.items()))


def true_utilities(tasks: Sequence[ChoiceTask], model: TrueModel, images: dict) -> np.ndarray:
    """(N, 2) systematic utilities of the data-generating model."""
    v = np.zeros((len(tasks), 2))
    image_u = {}
    for n, t in enumerate(tasks):
        for j, a in enumerate(t.alternatives):
            if a.image_id not in image_u:
                im = images.get(a.image_id)
                if im is None or im.ground_truth is None:
                    raise ValidationError(f"task {t.task_id}: image {a.image_id!r} has no ground truth")
                image_u[a.image_id] = true_image_utility(im.ground_truth, model.alpha)
            v[n, j] = (
                model.beta_hhc * a.hhc / model.scaling.cost_divisor
                + model.beta_tti * a.tti / model.scaling.time_divisor
                + model.beta_month[a.month - 1]
                + image_u[a.image_id]
            )
    return v


def simulate_choices(designs: Sequence[ChoiceTask], true_model: TrueModel, images: dict, seed: int = 0) -> Dataset:
    v = true_utilities(designs, true_model, images)
    p_first = np.exp(log_probs(v)[:, 0])
    draws = stream(seed, "choices").random(len(designs))
    chosen = np.where(draws < p_first, 0, 1)
    return Dataset([t.with_choice(c) for t, c in zip(designs, chosen)])


@dataclass
class SyntheticStudy:
    images: dict
    dataset: Dataset
    true_model: TrueModel
    respondents: list


def make_study(
    n_tasks: int,
    n_images: int,
    true_model: Optional[TrueModel] = None,
    resolution: int = 32,
    seed: int = 0,
    tasks_per_respondent: int = 15,
    n_municipalities: int = 20,
    seasonal_tint: bool = False,
    tt_range: tuple = (10.0, 60.0),
    render: bool = True,
) -> SyntheticStudy:
    """Images, respondents with a random current commute, a pivoted design and simulated choices.

    With ``render=False`` only scene metadata and ground truth are produced,
    which is enough for estimation experiments that never look at pixels.
    """
    true_model = true_model or TrueModel()
    if render:
        images = generate_images(n_images, resolution, seed, n_municipalities, seasonal_tint)
    else:
        images = scene_records(n_images, seed, n_municipalities)
    n_resp = math.ceil(n_tasks / tasks_per_respondent)
    rng = stream(seed, "respondents")
    respondents = [
        {
            "respondent_id": f"r{i:05d}",
            "current_tt": float(rng.uniform(*tt_range)),
            "municipality": f"m{int(rng.integers(n_municipalities)):02d}",
        }
        for i in range(n_resp)
    ]
    design = build_design(respondents, images, seed, tasks_per_respondent)[:n_tasks]
    dataset = simulate_choices(design, true_model, images, seed)
    return SyntheticStudy(images=images, dataset=dataset, true_model=true_model, respondents=respondents)


def scene_records(n_images: int, seed: int = 0, n_municipalities: int = 20) -> dict:
    """Metadata-only images with nominal scene fractions as ground truth."""
    rng = stream(seed, "scene-params")
    noise = stream(seed, "density").normal(0, 0.05, n_images)
    out = {}
    for k in range(n_images):
        s = sample_scene(rng)
        muni = f"m{int(rng.integers(n_municipalities)):02d}"
        truth = {"sky": s.sky_frac, "built": s.built_frac, "green": s.green_frac, "water": s.water_frac}
        truth["road"] = 1.0 - sum(truth.values())
        truth["clutter"] = 0.0
        out[f"img{k:05d}"] = Image(
            f"img{k:05d}",
            month=s.month,
            municipality=muni,
            density=s.built_frac + float(noise[k]),
            ground_truth=truth,
        )
    return out
