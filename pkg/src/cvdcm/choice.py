"""Linear-additive multinomial logit over scaled housing cost, travel time and month.

Parameters live on the scaled attribute scale: a one-unit change in the scaled
cost is 225 euros per month, in the scaled time 15 minutes.  Model 1 frees the
two taste parameters; Model 2 adds eleven month constants with December fixed
at zero.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize, stats

from .dataset import DECEMBER, Alternative, Dataset
from .errors import (
    NonFiniteError,
    SeparationError,
    SingularHessianError,
    ValidationError,
)

MONTH_NAMES = ("jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec")
TASTE_NAMES = ("beta_hhc", "beta_tti")
MONTH_PARAM_NAMES = tuple(f"beta_{m}" for m in MONTH_NAMES[:-1])

SEPARATION_LIMIT = 50.0


@dataclass(frozen=True)
class Scaling:
    cost_divisor: float = 225.0
    time_divisor: float = 15.0

    def __post_init__(self):
        if not (self.cost_divisor > 0 and self.time_divisor > 0):
            raise ValidationError("attribute divisors must be positive")

    def to_dict(self) -> dict:
        return {"cost_divisor": self.cost_divisor, "time_divisor": self.time_divisor}


DEFAULT_SCALING = Scaling()


def _month_vector(values=None) -> np.ndarray:
    out = np.zeros(12)
    if values is not None:
        out[:] = np.asarray(values, dtype=float)
    return out


@dataclass
class ModelParams:
    beta_hhc: float = 0.0
    beta_tti: float = 0.0
    beta_month: np.ndarray = field(default_factory=_month_vector)
    beta_k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scaling: Scaling = DEFAULT_SCALING

    def __post_init__(self):
        self.beta_hhc = float(self.beta_hhc)
        self.beta_tti = float(self.beta_tti)
        self.beta_month = np.array(self.beta_month, dtype=float).reshape(12)
        self.beta_k = np.array(self.beta_k, dtype=float).reshape(-1)
        if self.beta_month[DECEMBER - 1] != 0.0:
            raise ValidationError("the December month constant is fixed at 0")

    @property
    def n_features(self) -> int:
        return self.beta_k.size

    def numeric_vector(self) -> np.ndarray:
        """Taste parameters followed by the eleven free month constants."""
        return np.concatenate([[self.beta_hhc, self.beta_tti], self.beta_month[:11]])

    def with_numeric_vector(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        months = np.zeros(12)
        months[: vec.size - 2] = vec[2:]
        return replace(self, beta_hhc=vec[0], beta_tti=vec[1], beta_month=months)

    def copy(self) -> "ModelParams":
        return replace(self, beta_month=self.beta_month.copy(), beta_k=self.beta_k.copy())

    def to_dict(self) -> dict:
        return {
            "beta_hhc": self.beta_hhc,
            "beta_tti": self.beta_tti,
            "beta_month": {m: float(v) for m, v in zip(MONTH_NAMES, self.beta_month)},
            "beta_k": [float(v) for v in self.beta_k],
            "scaling": self.scaling.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        months = d.get("beta_month", {})
        if isinstance(months, dict):
            months = [months.get(m, 0.0) for m in MONTH_NAMES]
        return cls(
            beta_hhc=d["beta_hhc"],
            beta_tti=d["beta_tti"],
            beta_month=months,
            beta_k=d.get("beta_k", []),
            scaling=Scaling(**d.get("scaling", {})),
        )


def param_names(model: int) -> tuple:
    if model == 1:
        return TASTE_NAMES
    if model == 2:
        return TASTE_NAMES + MONTH_PARAM_NAMES
    raise ValidationError(f"model must be 1 or 2, got {model!r}")


# ---------------------------------------------------------------------------
# utilities and probabilities


def scale_attributes(alt: Alternative, scaling: Scaling = DEFAULT_SCALING) -> tuple:
    h = alt.hhc / scaling.cost_divisor
    t = alt.tti / scaling.time_divisor
    if abs(h) > 1 or abs(t) > 1:
        warnings.warn(f"attribute levels ({alt.hhc}, {alt.tti}) fall outside the scaling range", stacklevel=2)
    return h, t


def _check_finite_params(params: ModelParams):
    if not (
        math.isfinite(params.beta_hhc)
        and math.isfinite(params.beta_tti)
        and np.all(np.isfinite(params.beta_month))
        and np.all(np.isfinite(params.beta_k))
    ):
        raise NonFiniteError("model parameters contain non-finite values")


def utility_numeric(params: ModelParams, alt: Alternative) -> float:
    _check_finite_params(params)
    h, t = scale_attributes(alt, params.scaling)
    return params.beta_hhc * h + params.beta_tti * t + params.beta_month[alt.month - 1]


def logit_probs(v) -> np.ndarray:
    """Softmax over the last axis, shifted by the row maximum."""
    v = np.asarray(v, dtype=float)
    if np.isnan(v).any():
        raise NonFiniteError("utilities contain NaN")
    if not np.isfinite(v).all():
        raise NonFiniteError("utilities must be finite")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_probs(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# array form of a dataset


@dataclass
class ChoiceArrays:
    """Dense design: ``x`` is (N, J, 13) with columns hhc, tti, jan..nov."""

    x: np.ndarray
    chosen: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.x.shape[0]

    def columns(self, model: int) -> np.ndarray:
        return self.x[:, :, : len(param_names(model))]


def dataset_arrays(dataset: Dataset, scaling: Scaling = DEFAULT_SCALING) -> ChoiceArrays:
    n = dataset.n_obs
    if n == 0:
        raise ValidationError("dataset is empty")
    x = np.zeros((n, 2, 13))
    chosen = np.full(n, -1, dtype=np.int64)
    hhc = np.array([[a.hhc for a in t.alternatives] for t in dataset.tasks], dtype=float)
    tti = np.array([[a.tti for a in t.alternatives] for t in dataset.tasks], dtype=float)
    month = np.array([[a.month for a in t.alternatives] for t in dataset.tasks], dtype=np.int64)
    x[:, :, 0] = hhc / scaling.cost_divisor
    x[:, :, 1] = tti / scaling.time_divisor
    if np.abs(x[:, :, :2]).max() > 1:
        warnings.warn("attribute levels fall outside the scaling range", stacklevel=2)
    rows, alts = np.nonzero(month != DECEMBER)
    x[rows, alts, 1 + month[rows, alts]] = 1.0
    for i, t in enumerate(dataset.tasks):
        if t.chosen is not None:
            chosen[i] = t.chosen
    return ChoiceArrays(x=x, chosen=chosen)


def _image_offsets(image_utils, n: int) -> np.ndarray:
    if image_utils is None:
        return np.zeros((n, 2))
    off = np.asarray(image_utils, dtype=float)
    if off.size != 2 * n:
        raise ValidationError(f"expected {2 * n} image utilities (one per alternative), got {off.size}")
    return off.reshape(n, 2)


def _require_chosen(arr: ChoiceArrays):
    if (arr.chosen < 0).any():
        raise ValidationError("dataset contains unanswered tasks")


def _ll_grad_hess(xm: np.ndarray, chosen: np.ndarray, beta: np.ndarray, offsets: np.ndarray, order: int = 2):
    v = xm @ beta + offsets
    lp = log_probs(v)
    idx = np.arange(xm.shape[0])
    ll = float(lp[idx, chosen].sum())
    if order == 0:
        return ll, None, None
    p = np.exp(lp)
    y = np.zeros_like(p)
    y[idx, chosen] = 1.0
    grad = np.einsum("nj,njm->m", y - p, xm)
    if order == 1:
        return ll, grad, None
    xbar = np.einsum("nj,njm->nm", p, xm)
    dev = xm - xbar[:, None, :]
    hess = -np.einsum("nj,njm,njl->ml", p, dev, dev)
    return ll, grad, hess


def log_likelihood(dataset: Dataset, params: ModelParams, image_utils=None, arrays: Optional[ChoiceArrays] = None) -> float:
    _check_finite_params(params)
    arr = arrays if arrays is not None else dataset_arrays(dataset, params.scaling)
    _require_chosen(arr)
    off = _image_offsets(image_utils, arr.n_obs)
    ll, _, _ = _ll_grad_hess(arr.x, arr.chosen, params.numeric_vector(), off, order=0)
    return ll


def grad_loglik(dataset: Dataset, params: ModelParams, model: int = 2, image_utils=None, arrays=None) -> np.ndarray:
    """Score of the log-likelihood over the free parameters of ``model``."""
    _check_finite_params(params)
    arr = arrays if arrays is not None else dataset_arrays(dataset, params.scaling)
    _require_chosen(arr)
    p = len(param_names(model))
    off = _image_offsets(image_utils, arr.n_obs)
    # fixed parameters still shift the utilities
    off = off + arr.x[:, :, p:] @ params.numeric_vector()[p:]
    _, g, _ = _ll_grad_hess(arr.columns(model), arr.chosen, params.numeric_vector()[:p], off, order=1)
    return g


def hessian_loglik(dataset: Dataset, params: ModelParams, model: int = 2, image_utils=None, arrays=None) -> np.ndarray:
    _check_finite_params(params)
    arr = arrays if arrays is not None else dataset_arrays(dataset, params.scaling)
    _require_chosen(arr)
    p = len(param_names(model))
    off = _image_offsets(image_utils, arr.n_obs)
    off = off + arr.x[:, :, p:] @ params.numeric_vector()[p:]
    _, _, h = _ll_grad_hess(arr.columns(model), arr.chosen, params.numeric_vector()[:p], off)
    return h


# ---------------------------------------------------------------------------
# metrics


def fit_metrics(loglik: float, n: int, j: int = 2) -> dict:
    if n <= 0:
        raise ValidationError("number of observations must be positive")
    if j < 2:
        raise ValidationError("need at least two alternatives per task")
    if loglik > 0:
        raise ValidationError(f"log-likelihood cannot be positive, got {loglik}")
    ll0 = n * math.log(1.0 / j)
    return {"rho2": 1.0 - loglik / ll0, "cross_entropy": -loglik / n}


def vtt(beta_tti: float, beta_hhc: float, scaling: Scaling = DEFAULT_SCALING) -> float:
    """Value of travel time in euros per hour per month."""
    if beta_hhc == 0:
        raise ValidationError("VTT undefined for beta_hhc = 0")
    return 60.0 * (scaling.cost_divisor / scaling.time_divisor) * beta_tti / beta_hhc


def vtt_se(beta_tti: float, beta_hhc: float, cov, scaling: Scaling = DEFAULT_SCALING) -> float:
    """Delta-method standard error; ``cov`` is the 2x2 covariance of (beta_hhc, beta_tti)."""
    if beta_hhc == 0:
        raise ValidationError("VTT undefined for beta_hhc = 0")
    c = 60.0 * scaling.cost_divisor / scaling.time_divisor
    grad = np.array([-c * beta_tti / beta_hhc**2, c / beta_hhc])
    var = float(grad @ np.asarray(cov, dtype=float)[:2, :2] @ grad)
    return math.sqrt(max(var, 0.0))


def ratio_se(beta_tti: float, beta_hhc: float, cov) -> float:
    """Delta-method standard error of beta_tti / beta_hhc."""
    return vtt_se(beta_tti, beta_hhc, cov, Scaling(1.0, 60.0))


def p_values(estimates, std_errors) -> np.ndarray:
    z = np.abs(np.asarray(estimates, dtype=float) / np.asarray(std_errors, dtype=float))
    return 2.0 * stats.norm.sf(z)


# ---------------------------------------------------------------------------
# estimation


@dataclass
class NewtonOptions:
    tol: float = 1e-6
    max_iter: int = 200
    separation_limit: float = SEPARATION_LIMIT


@dataclass
class EstimationResult:
    params: ModelParams
    loglik: float
    rho2: float
    cross_entropy: float
    names: tuple
    estimates: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    covariance: np.ndarray
    vtt: float
    vtt_se: float
    converged: bool
    iterations: int
    n_obs: int
    model: str = "Model 1"
    n_params: Optional[int] = None

    def __post_init__(self):
        if self.n_params is None:
            self.n_params = len(self.names)

    def se(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def estimate(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "loglik": self.loglik,
            "rho2": self.rho2,
            "cross_entropy": self.cross_entropy,
            "estimates": {n: float(v) for n, v in zip(self.names, self.estimates)},
            "std_errors": {n: float(v) for n, v in zip(self.names, self.std_errors)},
            "p_values": {n: float(v) for n, v in zip(self.names, self.p_values)},
            "vtt": self.vtt,
            "vtt_se": self.vtt_se,
            "converged": self.converged,
            "iterations": self.iterations,
            "params": self.params.to_dict(),
        }


def _is_separated(xm: np.ndarray, chosen: np.ndarray) -> bool:
    """True when some direction raises every chosen-minus-other utility gap (none lowered)."""
    idx = np.arange(xm.shape[0])
    d = xm[idx, chosen] - xm[idx, 1 - chosen]
    res = optimize.linprog(
        -d.sum(axis=0),
        A_ub=-d,
        b_ub=np.zeros(d.shape[0]),
        bounds=[(-1, 1)] * d.shape[1],
        method="highs",
    )
    return res.status == 0 and -res.fun > 1e-9


def _collinear(neg_hess: np.ndarray, names: Sequence[str], rel: float = 1e-10) -> list:
    w, v = np.linalg.eigh(neg_hess)
    scale = max(abs(w).max(), 1e-300)
    null = v[:, w <= rel * scale]
    if null.size == 0:
        return []
    weight = np.abs(null).max(axis=1)
    return [n for n, wt in zip(names, weight) if wt > 1e-3]


def covariance_from_hessian(hess: np.ndarray, names: Sequence[str]) -> np.ndarray:
    neg = -np.asarray(hess, dtype=float)
    bad = _collinear(neg, names)
    if bad:
        raise SingularHessianError(f"singular Hessian; collinear parameters: {', '.join(bad)}", bad)
    try:
        chol = np.linalg.cholesky(neg)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError("negative Hessian is not positive definite", list(names)) from exc
    inv = np.linalg.inv(chol)
    return inv.T @ inv


def estimate_mnl(
    dataset: Dataset,
    model: int = 1,
    options: Optional[NewtonOptions] = None,
    image_utils=None,
    scaling: Scaling = DEFAULT_SCALING,
    start: Optional[ModelParams] = None,
) -> EstimationResult:
    """Maximum likelihood by Newton-Raphson with step halving."""
    options = options or NewtonOptions()
    names = param_names(model)
    arr = dataset_arrays(dataset, scaling)
    _require_chosen(arr)
    xm = arr.columns(model)
    off = _image_offsets(image_utils, arr.n_obs)
    beta = np.zeros(len(names)) if start is None else start.numeric_vector()[: len(names)].copy()

    converged = False
    it = 0
    ll, g, h = _ll_grad_hess(xm, arr.chosen, beta, off)
    while True:
        if np.max(np.abs(g)) < options.tol:
            converged = True
            break
        if it >= options.max_iter:
            break
        try:
            step = linalg.cho_solve(linalg.cho_factor(-h), g)
        except linalg.LinAlgError:
            if _is_separated(xm, arr.chosen):
                raise SeparationError("no finite MLE: the data are separated") from None
            bad = _collinear(-h, names) or list(names)
            raise SingularHessianError(f"singular Hessian; collinear parameters: {', '.join(bad)}", bad) from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c, _, _ = _ll_grad_hess(xm, arr.chosen, cand, off, order=0)
            if ll_c >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta = cand
        it += 1
        if np.max(np.abs(beta)) > options.separation_limit:
            raise SeparationError(
                f"no finite MLE: |beta| exceeded {options.separation_limit:g} after {it} iterations"
            )
        ll, g, h = _ll_grad_hess(xm, arr.chosen, beta, off)

    saturated = np.max(np.abs(beta)) > 5.0 or ll / arr.n_obs > -1e-3
    if saturated and _is_separated(xm, arr.chosen):
        raise SeparationError("no finite MLE: the data are separated (fitted probabilities saturate)")
    try:
        cov = covariance_from_hessian(h, names)
    except SingularHessianError:
        if _is_separated(xm, arr.chosen):
            raise SeparationError("no finite MLE: the data are separated") from None
        raise
    se = np.sqrt(np.diag(cov))
    params = ModelParams(scaling=scaling).with_numeric_vector(beta)
    metrics = fit_metrics(ll, arr.n_obs, 2)
    return EstimationResult(
        params=params,
        loglik=ll,
        rho2=metrics["rho2"],
        cross_entropy=metrics["cross_entropy"],
        names=names,
        estimates=beta.copy(),
        std_errors=se,
        p_values=p_values(beta, se),
        covariance=cov,
        vtt=vtt(beta[1], beta[0], scaling) if beta[0] != 0 else float("nan"),
        vtt_se=vtt_se(beta[1], beta[0], cov, scaling) if beta[0] != 0 else float("nan"),
        converged=converged,
        iterations=it,
        n_obs=arr.n_obs,
        model=f"Model {model}",
    )


def conditional_std_errors(dataset: Dataset, params: ModelParams, image_utils=None) -> dict:
    """Standard errors of the numeric parameters with image utilities held fixed.

    Returns ``{"names", "std_errors", "covariance"}`` over beta_hhc, beta_tti and
    the eleven free month constants.
    """
    names = param_names(2)
    h = hessian_loglik(dataset, params, model=2, image_utils=image_utils)
    cov = covariance_from_hessian(h, names)
    return {"names": names, "std_errors": np.sqrt(np.diag(cov)), "covariance": cov}


def result_from_params(
    dataset: Dataset,
    params: ModelParams,
    image_utils=None,
    model: str = "Model 3",
    n_params=None,
    converged: bool = True,
    iterations: int = 0,
) -> EstimationResult:
    """Assemble an EstimationResult for externally fitted parameters (e.g. a trained CV-DCM)."""
    ll = log_likelihood(dataset, params, image_utils)
    cond = conditional_std_errors(dataset, params, image_utils)
    est = params.numeric_vector()
    se = cond["std_errors"]
    m = fit_metrics(ll, dataset.n_obs)
    return EstimationResult(
        params=params,
        loglik=ll,
        rho2=m["rho2"],
        cross_entropy=m["cross_entropy"],
        names=cond["names"],
        estimates=est,
        std_errors=se,
        p_values=p_values(est, se),
        covariance=cond["covariance"],
        vtt=vtt(params.beta_tti, params.beta_hhc, params.scaling),
        vtt_se=vtt_se(params.beta_tti, params.beta_hhc, cond["covariance"], params.scaling),
        converged=converged,
        iterations=iterations,
        n_obs=dataset.n_obs,
        model=model,
        n_params=n_params,
    )
