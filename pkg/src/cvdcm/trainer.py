"""Joint training of taste parameters and extractor weights (the CV-DCM).

Utility of alternative j in task n::

    V_nj = beta_hhc * hhc_nj + beta_tti * tti_nj + beta_month[month_nj] + beta_k . phi(S_nj | w)

Both images of a task pass through the same extractor weights.  The loss is
the mean negative log-probability of the chosen alternatives plus
``gamma * sum(w ** 2)`` over the extractor weights only.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import vision
from .choice import (
    DEFAULT_SCALING,
    ModelParams,
    NewtonOptions,
    dataset_arrays,
    estimate_mnl,
    fit_metrics,
    log_probs,
    result_from_params,
)
from .dataset import Dataset
from .errors import DataLeakageError, NonFiniteError, ValidationError
from .images import resize
from .seeding import stream
from .split import check_disjoint, split
from .vision import ExtractorConfig

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class TrainerConfig:
    batch_size: int = 20
    learning_rate: float = 1e-3
    momentum: float = 0.0
    l2_gamma: float = 0.1
    epochs: int = 50
    seed: int = 0
    augment_hflip: bool = True
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.l2_gamma < 0:
            raise ValidationError("l2_gamma must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if not 0 <= self.validation_fraction < 0.5:
            raise ValidationError("validation_fraction must lie in [0, 0.5)")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    initial_val_ll: Optional[float] = None
    test_ll: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls(**d)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings."""
        d = self.to_dict()
        d["epochs"] = [{k: v for k, v in e.items() if k != "epoch_time"} for e in d["epochs"]]
        return d


class ImageBank:
    """uint8 pixels of every image a dataset references, resized to the extractor resolution."""

    def __init__(self, images: dict, resolution: int, ids=None):
        ids = sorted(images) if ids is None else list(ids)
        self.index = {}
        stack = []
        for i in ids:
            im = images.get(i)
            if im is None or im.pixels is None:
                raise ValidationError(f"image {i!r} cannot be resolved to pixel data")
            px = im.pixels if im.pixels.dtype == np.uint8 else np.clip(np.rint(im.pixels * 255), 0, 255).astype(np.uint8)
            if px.shape[:2] != (resolution, resolution):
                px = resize(px, resolution)
            self.index[i] = len(stack)
            stack.append(px)
        self.pixels = np.stack(stack) if stack else np.zeros((0, resolution, resolution, 3), np.uint8)

    @classmethod
    def for_datasets(cls, images: dict, resolution: int, *datasets) -> "ImageBank":
        ids = sorted(set().union(*(d.image_ids() for d in datasets)))
        missing = [i for i in ids if i not in images]
        if missing:
            raise ValidationError(f"{len(missing)} image id(s) not found, e.g. {missing[0]!r}")
        return cls(images, resolution, ids)

    def lookup(self, dataset: Dataset) -> np.ndarray:
        try:
            return np.array([[self.index[i] for i in t.image_ids] for t in dataset.tasks], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"image {exc.args[0]!r} cannot be resolved") from None

    def floats(self, idx) -> np.ndarray:
        return self.pixels[idx].astype(np.float64) / 255.0


@dataclass
class TaskArrays:
    x: np.ndarray  # (N, 2, 13) scaled numeric design
    chosen: np.ndarray  # (N,)
    img: np.ndarray  # (N, 2) rows of the image bank

    @property
    def n_obs(self) -> int:
        return self.x.shape[0]

    @classmethod
    def build(cls, dataset: Dataset, bank: ImageBank, scaling=DEFAULT_SCALING) -> "TaskArrays":
        dataset.require_answered()
        arr = dataset_arrays(dataset, scaling)
        return cls(arr.x, arr.chosen, bank.lookup(dataset))

    def take(self, idx) -> "TaskArrays":
        return TaskArrays(self.x[idx], self.chosen[idx], self.img[idx])


def _batch_pixels(bank: ImageBank, img_idx: np.ndarray, flips: Optional[np.ndarray]) -> np.ndarray:
    px = bank.floats(img_idx.reshape(-1))
    if flips is not None:
        f = flips.reshape(-1)
        px[f] = px[f][:, :, ::-1, :]
    return px


def _batch_forward(batch: TaskArrays, params: ModelParams, weights, ext: ExtractorConfig, bank, flips):
    px = _batch_pixels(bank, batch.img, flips)
    z, cache = vision.forward_with_cache(ext, weights, px)
    z = z.reshape(batch.n_obs, 2, -1)
    v = batch.x @ params.numeric_vector() + z @ params.beta_k
    return v, z, cache


def loss(batch: TaskArrays, params: ModelParams, weights, gamma: float, ext: ExtractorConfig, bank, flips=None) -> float:
    v, _, _ = _batch_forward(batch, params, weights, ext, bank, flips)
    lp = log_probs(v)
    data = -lp[np.arange(batch.n_obs), batch.chosen].mean()
    return float(data + gamma * vision.sum_squares(weights))


def joint_gradient(batch: TaskArrays, params: ModelParams, weights, gamma: float, ext: ExtractorConfig, bank, flips=None):
    """Loss value and gradients ``(loss, d_params, d_weights)``; ``d_params`` is shaped like ModelParams."""
    b = batch.n_obs
    v, z, cache = _batch_forward(batch, params, weights, ext, bank, flips)
    lp = log_probs(v)
    rows = np.arange(b)
    value = float(-lp[rows, batch.chosen].mean() + gamma * vision.sum_squares(weights))
    if not math.isfinite(value):
        raise NonFiniteError("non-finite loss")
    resid = np.exp(lp)
    resid[rows, batch.chosen] -= 1.0
    resid /= b
    g_num = np.einsum("nj,njm->m", resid, batch.x)
    g_k = np.einsum("nj,njk->k", resid, z)
    dz = (resid[:, :, None] * params.beta_k[None, None, :]).reshape(2 * b, -1)
    g_w = vision.backward(ext, weights, None, dz, cache=cache)
    for k in g_w:
        g_w[k] += 2.0 * gamma * weights[k]
    d_params = ModelParams(scaling=params.scaling).with_numeric_vector(g_num)
    d_params.beta_k = g_k
    return value, d_params, g_w


def image_utilities(params: ModelParams, weights, images, ext: ExtractorConfig) -> dict:
    """Image utility ``beta_k . phi(S)`` per image id (month constants excluded).

    ``images`` is an ImageBank or a ``{image_id: Image}`` mapping.
    """
    bank = images if isinstance(images, ImageBank) else ImageBank(images, ext.resolution)
    ids = sorted(bank.index, key=bank.index.get)
    out = np.zeros(len(ids))
    if params.beta_k.size:
        for start in range(0, len(ids), EVAL_CHUNK):
            rows = np.arange(start, min(start + EVAL_CHUNK, len(ids)))
            out[rows] = vision.forward(ext, weights, bank.floats(rows)) @ params.beta_k
    return dict(zip(ids, out))


def _utility_offsets(arrs: TaskArrays, params, weights, ext, bank) -> np.ndarray:
    """(N, 2) image utilities, computing each distinct image once."""
    uniq, inv = np.unique(arrs.img.reshape(-1), return_inverse=True)
    u = np.zeros(uniq.size)
    if params.beta_k.size:
        for start in range(0, uniq.size, EVAL_CHUNK):
            rows = uniq[start : start + EVAL_CHUNK]
            u[start : start + rows.size] = vision.forward(ext, weights, bank.floats(rows)) @ params.beta_k
    return u[inv].reshape(arrs.n_obs, 2)


def _loglik(arrs: TaskArrays, params, weights, ext, bank) -> float:
    v = arrs.x @ params.numeric_vector() + _utility_offsets(arrs, params, weights, ext, bank)
    return float(log_probs(v)[np.arange(arrs.n_obs), arrs.chosen].sum())


def evaluate(dataset: Dataset, params: ModelParams, weights, ext: ExtractorConfig, images) -> dict:
    """Log-likelihood, rho-square and cross-entropy without augmentation."""
    bank = images if isinstance(images, ImageBank) else ImageBank.for_datasets(images, ext.resolution, dataset)
    arrs = TaskArrays.build(dataset, bank, params.scaling)
    ll = _loglik(arrs, params, weights, ext, bank)
    return {"loglik": ll, **fit_metrics(ll, dataset.n_obs, 2)}


def dataset_image_utilities(dataset: Dataset, params, weights, ext, images) -> np.ndarray:
    bank = images if isinstance(images, ImageBank) else ImageBank.for_datasets(images, ext.resolution, dataset)
    return _utility_offsets(TaskArrays.build(dataset, bank, params.scaling), params, weights, ext, bank)


@dataclass
class TrainResult:
    params: ModelParams
    weights: dict
    log: TrainLog
    extractor_config: ExtractorConfig
    trainer_config: TrainerConfig
    warm_start: object = None  # Model 2 EstimationResult on the fitting portion, if estimated


def _validation_split(train_set: Dataset, fraction: float, seed: int):
    if fraction == 0:
        return train_set, None
    s = split(train_set, 1.0 - fraction, seed)
    return s.train, s.test


def train(
    train_set: Dataset,
    test_set: Optional[Dataset],
    images: dict,
    extractor_config: ExtractorConfig,
    trainer_config: TrainerConfig,
    initial_weights: Optional[dict] = None,
    initial_params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable] = None,
) -> TrainResult:
    ext, cfg = extractor_config, trainer_config
    if test_set is not None:
        overlap = check_disjoint(train_set, test_set)
        if overlap:
            raise DataLeakageError(f"data leakage: {len(overlap)} image(s) appear in both train and test, e.g. {sorted(overlap)[0]!r}")
    train_set.require_answered()
    fit_set, val_set = _validation_split(train_set, cfg.validation_fraction, cfg.seed)
    datasets = [d for d in (fit_set, val_set, test_set) if d is not None]
    bank = ImageBank.for_datasets(images, ext.resolution, *datasets)
    fit = TaskArrays.build(fit_set, bank)
    val = TaskArrays.build(val_set, bank) if val_set is not None else None

    # taste parameters start at the Model 2 optimum unless given explicitly
    warm = None
    if initial_params is None:
        warm = estimate_mnl(fit_set, model=2, options=NewtonOptions())
        initial_params = warm.params
    params = initial_params.copy()
    params.beta_k = np.zeros(ext.feature_dim)
    weights = {k: v.copy() for k, v in (initial_weights or vision.init_weights(ext, cfg.seed)).items()}
    vision.check_weights(ext, weights)

    shuffle_rng = stream(cfg.seed, "shuffle")
    flip_rng = stream(cfg.seed, "flip")
    vel_p = np.zeros(13 + ext.feature_dim)
    vel_w = vision.zeros_like(weights)

    def score(p, w):
        return _loglik(val, p, w, ext, bank) if val is not None else -math.inf

    best = (score(params, weights), params.copy(), {k: v.copy() for k, v in weights.items()})
    tlog = TrainLog(initial_val_ll=None if val is None else best[0])

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(fit.n_obs)
        losses = []
        for bi, start in enumerate(range(0, fit.n_obs, cfg.batch_size)):
            batch = fit.take(order[start : start + cfg.batch_size])
            flips = flip_rng.random((batch.n_obs, 2)) < 0.5 if cfg.augment_hflip else None
            try:
                value, g_p, g_w = joint_gradient(batch, params, weights, cfg.l2_gamma, ext, bank, flips)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} at epoch {epoch}, batch {bi}") from exc
            losses.append(value)
            grad_p = np.concatenate([g_p.numeric_vector(), g_p.beta_k])
            vel_p = cfg.momentum * vel_p - cfg.learning_rate * grad_p
            theta = np.concatenate([params.numeric_vector(), params.beta_k]) + vel_p
            params = params.with_numeric_vector(theta[:13])
            params.beta_k = theta[13:]
            for k in weights:
                vel_w[k] = cfg.momentum * vel_w[k] - cfg.learning_rate * g_w[k]
                weights[k] = weights[k] + vel_w[k]

        train_ll = _loglik(fit, params, weights, ext, bank)
        val_ll = score(params, weights)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_LL": train_ll,
            "val_LL": None if val is None else val_ll,
            "epoch_time": time.perf_counter() - t0,
        }
        tlog.epochs.append(entry)
        log.info("epoch %d loss %.4f train LL %.2f val LL %s", epoch, entry["train_loss"], train_ll, entry["val_LL"])
        if on_epoch is not None:
            on_epoch(entry)
        if val is None or val_ll > best[0]:
            best = (val_ll, params.copy(), {k: v.copy() for k, v in weights.items()})
            tlog.best_epoch = epoch

    params, weights = best[1], vision.snap_float32(best[2])
    if test_set is not None:
        tlog.test_ll = evaluate(test_set, params, weights, ext, bank)["loglik"]
    return TrainResult(params, weights, tlog, ext, cfg, warm)


def model3_result(train_set: Dataset, params: ModelParams, weights, ext: ExtractorConfig, images):
    """Table-style result for a trained CV-DCM; standard errors hold image utilities fixed."""
    offsets = dataset_image_utilities(train_set, params, weights, ext, images)
    n_params = 13 + ext.feature_dim + vision.num_params(weights)
    return result_from_params(train_set, params, offsets, model="Model 3", n_params=n_params)


# ---------------------------------------------------------------------------
# checkpoints


WEIGHTS_FILE = "weights.bin"
PARAMS_FILE = "params.json"
LOG_FILE = "trainlog.json"
CONFIG_FILE = "config.json"


def save_checkpoint(directory, result: TrainResult) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vision.save_weights(result.weights, d / WEIGHTS_FILE, result.extractor_config)
    (d / PARAMS_FILE).write_text(json.dumps(result.params.to_dict(), indent=2) + "\n")
    (d / LOG_FILE).write_text(json.dumps(result.log.to_dict(), indent=2) + "\n")
    cfg = {"extractor": result.extractor_config.to_dict(), "trainer": result.trainer_config.to_dict()}
    (d / CONFIG_FILE).write_text(json.dumps(cfg, indent=2) + "\n")
    return d


def load_checkpoint(directory) -> tuple:
    """Returns ``(params, weights, extractor_config, trainlog)``."""
    d = Path(directory)
    ext, weights = vision.read_weight_file(d / WEIGHTS_FILE)
    params = ModelParams.from_dict(json.loads((d / PARAMS_FILE).read_text()))
    if params.beta_k.size != ext.feature_dim:
        raise ValidationError(f"checkpoint has {params.beta_k.size} feature weights but extractor K = {ext.feature_dim}")
    tlog = TrainLog.from_dict(json.loads((d / LOG_FILE).read_text())) if (d / LOG_FILE).exists() else None
    return params, weights, ext, tlog
