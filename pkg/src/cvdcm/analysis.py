"""Derived quantities from fitted models: utility decomposition, image rankings,
willingness to pay, density-quantile summaries and model comparison tables."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import trainer
from .choice import DEFAULT_SCALING, EstimationResult, ModelParams, dataset_arrays, fit_metrics
from .dataset import Dataset
from .errors import ValidationError


@dataclass(frozen=True)
class UtilityDecomposition:
    task_id: str
    dv_total: float
    dv_numeric: float
    dv_image: float


def decompose(params: ModelParams, weights, ext, dataset: Dataset, images) -> list:
    """Right-minus-left utility differences split into numeric and image parts.

    ``dv_total`` is formed as ``dv_numeric + dv_image`` so the identity is exact.
    """
    arr = dataset_arrays(dataset, params.scaling)
    v_num = arr.x @ params.numeric_vector()
    v_img = trainer.dataset_image_utilities(dataset, params, weights, ext, images)
    dn = v_num[:, 1] - v_num[:, 0]
    di = v_img[:, 1] - v_img[:, 0]
    return [
        UtilityDecomposition(t.task_id, float(a + b), float(a), float(b))
        for t, a, b in zip(dataset.tasks, dn, di)
    ]


def rank_images(utilities: dict, k: int) -> tuple:
    """``(top, bottom)`` lists of ``(image_id, utility)``; ties are broken by image id."""
    if not 0 <= k <= len(utilities):
        raise ValidationError(f"k must lie in [0, {len(utilities)}], got {k}")
    order = sorted(utilities.items(), key=lambda kv: (-kv[1], kv[0]))
    bottom = sorted(utilities.items(), key=lambda kv: (kv[1], kv[0]))[:k]
    return order[:k], bottom


def wtp_extremes(delta_u: float, beta_hhc: float, cost_divisor: float = DEFAULT_SCALING.cost_divisor) -> float:
    """Monthly housing cost equivalent of a utility gap, in euros."""
    if beta_hhc == 0:
        raise ValidationError("beta_hhc must be non-zero to convert utility into money")
    return delta_u / abs(beta_hhc) * cost_divisor


@dataclass(frozen=True)
class DensitySummary:
    group: int
    count: int
    density_min: float
    density_max: float
    min: float
    q1: float
    median: float
    q3: float
    max: float


def density_quantiles(utilities: dict, densities: dict, q: int = 6) -> list:
    """Box statistics of image utility in ``q`` near-equal density groups.

    Images are ordered by density (then id); the lowest-density groups absorb
    the remainder when the count does not divide evenly.
    """
    if q < 2:
        raise ValidationError("q must be at least 2")
    missing = [i for i in utilities if densities.get(i) is None]
    if missing:
        raise ValidationError(f"{len(missing)} image(s) lack a density value, e.g. {missing[0]!r}")
    if len(utilities) < q:
        raise ValidationError(f"need at least {q} images for {q} groups, got {len(utilities)}")
    ids = sorted(utilities, key=lambda i: (densities[i], i))
    out = []
    for g, chunk in enumerate(np.array_split(np.array(ids, dtype=object), q)):
        u = np.array([utilities[i] for i in chunk])
        d = np.array([densities[i] for i in chunk])
        q1, med, q3 = np.percentile(u, [25, 50, 75])
        out.append(DensitySummary(g + 1, len(chunk), float(d.min()), float(d.max()), float(u.min()), float(q1), float(med), float(q3), float(u.max())))
    return out


def dataset_key(dataset: Dataset) -> str:
    """Content fingerprint used to check that models were fitted on the same data."""
    h = hashlib.sha256()
    for t in dataset.tasks:
        h.update(json.dumps(t.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


@dataclass
class ModelColumn:
    name: str
    train: Optional[EstimationResult] = None
    test: Optional[dict] = None  # {"loglik", "n_obs"} plus optional rho2 / cross_entropy
    train_key: Optional[str] = None
    test_key: Optional[str] = None


def holdout_metrics(loglik: float, n_obs: int) -> dict:
    return {"loglik": loglik, "n_obs": n_obs, **fit_metrics(loglik, n_obs)}


def _fmt_fit(ll, rho2, ce) -> str:
    return f"{ll:,.0f} / {rho2:.3f} / {ce:.3f}"


def _fmt_est(est, se, p) -> str:
    return f"{est:.2f} ({se:.2f}) [{p:.2f}]"


@dataclass
class ComparisonReport:
    names: list
    labels: list
    cells: list  # cells[row][column], rendered strings
    values: list  # one dict of raw numbers per column

    def to_text(self) -> str:
        head = [""] + self.names
        rows = [head] + [[lab] + row for lab, row in zip(self.labels, self.cells)]
        widths = [max(len(r[c]) for r in rows) for c in range(len(head))]
        lines = ["  ".join(cell.ljust(widths[c]) if c == 0 else cell.rjust(widths[c]) for c, cell in enumerate(r)) for r in rows]
        return "\n".join(line.rstrip() for line in lines) + "\n"

    def to_markdown(self) -> str:
        out = ["| | " + " | ".join(self.names) + " |", "|---" * (len(self.names) + 1) + "|"]
        out += ["| " + lab + " | " + " | ".join(row) + " |" for lab, row in zip(self.labels, self.cells)]
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {
            "models": self.names,
            "rows": [{"label": lab, "cells": dict(zip(self.names, row))} for lab, row in zip(self.labels, self.cells)],
            "values": dict(zip(self.names, self.values)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


PARAM_ROWS = ("beta_hhc", "beta_tti") + tuple(f"beta_{m}" for m in ("jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov"))
FIT_ROW_TRAIN = "Train LL / rho2 / CE"
FIT_ROW_TEST = "Test LL / rho2 / CE"


def compare_models(columns: Sequence[ModelColumn]) -> ComparisonReport:
    """Side-by-side estimation results; every column must share the same train and test data."""
    if not columns:
        raise ValidationError("no models to compare")
    for attr in ("train_key", "test_key"):
        keys = {getattr(c, attr) for c in columns if getattr(c, attr) is not None}
        if len(keys) > 1:
            raise ValidationError(f"models were evaluated on different datasets ({attr.split('_')[0]} sets differ)")
    for part in ("train", "test"):
        ns = {(c.train.n_obs if part == "train" else c.test["n_obs"]) for c in columns if getattr(c, part) is not None}
        if len(ns) > 1:
            raise ValidationError(f"models were evaluated on different {part} sets (N = {sorted(ns)})")

    labels = ["Parameters", "Train N", FIT_ROW_TRAIN, "Test N", FIT_ROW_TEST, *PARAM_ROWS, "VTT (EUR/h)"]
    cells = [[] for _ in labels]
    values = []
    for c in columns:
        raw, col = {}, {}
        r = c.train
        if r is not None:
            raw.update(n_params=r.n_params, train_n=r.n_obs, train_loglik=r.loglik, train_rho2=r.rho2, train_ce=r.cross_entropy)
            col["Parameters"] = str(r.n_params)
            col["Train N"] = f"{r.n_obs:,}"
            col[FIT_ROW_TRAIN] = _fmt_fit(r.loglik, r.rho2, r.cross_entropy)
            for name in PARAM_ROWS:
                if name in r.names:
                    i = r.names.index(name)
                    raw[name] = {"estimate": float(r.estimates[i]), "std_error": float(r.std_errors[i]), "p_value": float(r.p_values[i])}
                    col[name] = _fmt_est(r.estimates[i], r.std_errors[i], r.p_values[i])
            raw["vtt"], raw["vtt_se"] = r.vtt, r.vtt_se
            col["VTT (EUR/h)"] = f"{r.vtt:.1f} ({r.vtt_se:.1f})"
        if c.test is not None:
            t = {**fit_metrics(c.test["loglik"], c.test["n_obs"]), **c.test}
            raw.update(test_n=t["n_obs"], test_loglik=t["loglik"], test_rho2=t["rho2"], test_ce=t["cross_entropy"])
            col["Test N"] = f"{t['n_obs']:,}"
            col[FIT_ROW_TEST] = _fmt_fit(t["loglik"], t["rho2"], t["cross_entropy"])
        for i, lab in enumerate(labels):
            cells[i].append(col.get(lab, "-"))
        values.append(raw)
    return ComparisonReport([c.name for c in columns], labels, cells, values)


# ---------------------------------------------------------------------------
# CSV outputs


def write_image_csv(utilities: dict, images: dict, path) -> None:
    truth_keys = sorted({k for i in utilities for k in (images[i].ground_truth or {})}) if images else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "utility", "month", "municipality", "density", *truth_keys])
        for i in sorted(utilities):
            im = images.get(i) if images else None
            gt = (im.ground_truth if im is not None else None) or {}
            w.writerow([i, repr(float(utilities[i])), im.month if im else "", im.municipality if im else "",
                        "" if im is None or im.density is None else repr(im.density), *(gt.get(k, "") for k in truth_keys)])


def write_density_csv(summaries: Sequence[DensitySummary], path) -> None:
    fields = list(asdict(summaries[0])) if summaries else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for s in summaries:
            w.writerow(asdict(s))


def write_decomposition_csv(rows: Sequence[UtilityDecomposition], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "dv_total", "dv_numeric", "dv_image"])
        for r in rows:
            w.writerow([r.task_id, repr(r.dv_total), repr(r.dv_numeric), repr(r.dv_image)])


def histogram_csv(values: Sequence[float], path, bins: int = 40) -> None:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["left", "right", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(a)), repr(float(b)), int(c)])


def write_report(report: ComparisonReport, directory, stem: str = "comparison") -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"text": d / f"{stem}.txt", "markdown": d / f"{stem}.md", "json": d / f"{stem}.json"}
    paths["text"].write_text(report.to_text())
    paths["markdown"].write_text(report.to_markdown())
    paths["json"].write_text(report.to_json() + "\n")
    return paths
