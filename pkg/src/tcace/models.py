"""Nuisance models: logistic selection/assignment fits and linear regressions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InputError,
    InsufficientStratum,
    NotConverged,
    RankDeficient,
    Separation,
    SingularHessian,
)

PROB_EPS = 1e-12
SEPARATION_BOUND = 30.0
COND_LIMIT = 1e12


def sigmoid(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log_likelihood(x, labels, beta):
    eta = x @ beta
    return float(np.sum(labels * eta - np.logaddexp(0.0, eta)))


@dataclass(frozen=True)
class LogisticFit:
    beta: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    score_norm: float = 0.0
    history: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticFit":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            log_likelihood=float(d.get("log_likelihood", float("nan"))),
        )


def _converged(x, beta, it, ll, score_norm, history) -> LogisticFit:
    # a vanishing score with probabilities pinned to 0/1 means the MLE is at infinity
    p = sigmoid(x @ beta)
    if np.any(p < PROB_EPS) or np.any(p > 1.0 - PROB_EPS):
        raise Separation("Separation: fitted probabilities pinned to 0/1; labels are (quasi-)separable")
    return LogisticFit(beta, True, it, ll, score_norm, tuple(history))


def fit_logistic(x_matrix, labels, max_iter: int = 100, tol: float = 1e-10) -> LogisticFit:
    """Maximum-likelihood logistic regression by damped Newton-Raphson.

    Converged means the score ``X^T (labels - sigma(X beta))`` has Euclidean
    norm at most ``tol``.  Each Newton step is halved until the log-likelihood
    does not decrease.  A vanishing score reached with training probabilities
    pinned beyond the 1e-12 clamp is reported as Separation.
    """
    x = np.asarray(x_matrix, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"design has shape {x.shape}, labels {labels.shape}")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise Separation("Separation: labels are all identical; the MLE does not exist")
    beta = np.zeros(x.shape[1])
    ll = _log_likelihood(x, labels, beta)
    history = [ll]
    score_norm = np.inf
    for it in range(1, max_iter + 1):
        mu = sigmoid(x @ beta)
        score = x.T @ (labels - mu)
        score_norm = float(np.linalg.norm(score))
        if score_norm <= tol:
            return _converged(x, beta, it - 1, ll, score_norm, history)
        w = mu * (1.0 - mu)
        hess = x.T @ (w[:, None] * x)
        try:
            chol = np.linalg.cholesky(hess)
        except np.linalg.LinAlgError:
            if np.any(np.abs(beta) > SEPARATION_BOUND / 2):
                raise Separation("Separation: Hessian collapsed as probabilities pinned to 0/1") from None
            raise SingularHessian("SingularHessian: X^T W X is not positive definite") from None
        diag = np.diag(chol) ** 2
        if diag.min() <= diag.max() / COND_LIMIT:
            if np.any(np.abs(beta) > SEPARATION_BOUND / 2):
                raise Separation("Separation: Hessian collapsed as probabilities pinned to 0/1")
            raise SingularHessian("SingularHessian: X^T W X is numerically singular")
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, score))
        # near the optimum the likelihood gain falls below rounding error; a
        # step is then accepted if it is flat to rounding and shrinks the score
        flat = 64 * np.finfo(float).eps * max(1.0, abs(ll))
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_new = _log_likelihood(x, labels, cand)
            if ll_new >= ll:
                break
            if ll_new >= ll - flat and np.linalg.norm(x.T @ (labels - sigmoid(x @ cand))) < score_norm:
                break
            t *= 0.5
        else:
            # no ascent possible at machine precision: already at the optimum
            cand, ll_new = beta, ll
        if np.array_equal(cand, beta):
            mu = sigmoid(x @ beta)
            score_norm = float(np.linalg.norm(x.T @ (labels - mu)))
            converged = score_norm <= tol
            if not converged:
                raise NotConverged(
                    f"NotConverged: stalled with score norm {score_norm:.3e} > tol {tol:.1e}"
                )
            return _converged(x, beta, it, ll, score_norm, history)
        beta, ll = cand, ll_new
        history.append(ll)
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise Separation(
                f"Separation: |beta| exceeded {SEPARATION_BOUND:g}; labels are (quasi-)separable"
            )
    mu = sigmoid(x @ beta)
    score_norm = float(np.linalg.norm(x.T @ (labels - mu)))
    if score_norm <= tol:
        return _converged(x, beta, max_iter, ll, score_norm, history)
    raise NotConverged(f"NotConverged: score norm {score_norm:.3e} after {max_iter} iterations")


def predict_prob(fit: LogisticFit, x) -> float:
    """sigma(beta^T x) for one covariate vector, clamped to [1e-12, 1 - 1e-12]."""
    x = np.asarray(x, dtype=float)
    if x.shape != fit.beta.shape:
        raise DimensionMismatch(f"DimensionMismatch: beta has length {fit.beta.size}, x has {x.size}")
    return float(np.clip(sigmoid(np.atleast_1d(x @ fit.beta))[0], PROB_EPS, 1.0 - PROB_EPS))


def predict_probs(fit: LogisticFit, x_matrix) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise clamped probabilities and a mask of rows that hit the clamp."""
    x = np.asarray(x_matrix, dtype=float)
    if x.shape[1] != fit.beta.size:
        raise DimensionMismatch(
            f"DimensionMismatch: beta has length {fit.beta.size}, design has {x.shape[1]} columns"
        )
    raw = sigmoid(x @ fit.beta)
    clipped = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    return clipped, clipped != raw


@dataclass(frozen=True)
class TreatmentModel:
    """P(Z=1 | S=1, X): either a known constant or a fitted logistic model."""

    prob: float | None = None
    fit: LogisticFit | None = None

    def __post_init__(self):
        if (self.prob is None) == (self.fit is None):
            raise InputError("TreatmentModel needs exactly one of prob or fit")
        if self.prob is not None and not 0.0 < self.prob < 1.0:
            raise InputError(f"known treatment probability must lie in (0, 1), got {self.prob}")

    @classmethod
    def known(cls, prob: float) -> "TreatmentModel":
        return cls(prob=float(prob))

    @classmethod
    def fitted(cls, fit: LogisticFit) -> "TreatmentModel":
        return cls(fit=fit)

    @property
    def is_known(self) -> bool:
        return self.prob is not None

    def prob_treated(self, x_matrix) -> np.ndarray:
        x = np.asarray(x_matrix, dtype=float)
        if self.prob is not None:
            return np.full(x.shape[0], self.prob)
        return predict_probs(self.fit, x)[0]

    def to_dict(self) -> dict:
        if self.prob is not None:
            return {"kind": "KnownConstant", "prob": self.prob}
        return {"kind": "FittedLogistic", **self.fit.to_dict()}


def fit_treatment_model(dataset) -> TreatmentModel:
    """Logistic model for Z on the study rows (observational studies)."""
    study = dataset.study
    return TreatmentModel.fitted(fit_logistic(dataset.x[study], dataset.z[study]))


def fit_selection_model(dataset) -> LogisticFit:
    return fit_logistic(dataset.x, dataset.s)


def solve_weighted_least_squares(x_matrix, response, weights) -> np.ndarray:
    """Minimiser of sum_i w_i (response_i - coef^T x_i)^2 via Cholesky normal equations."""
    x = np.asarray(x_matrix, dtype=float)
    r = np.asarray(response, dtype=float)
    w = np.asarray(weights, dtype=float)
    if x.ndim != 2 or x.shape[0] != r.shape[0] or w.shape != r.shape:
        raise DimensionMismatch(f"design {x.shape}, response {r.shape}, weights {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("weights must be finite and nonnegative")
    if np.count_nonzero(w > 0) < x.shape[1]:
        raise RankDeficient(
            f"RankDeficient: {np.count_nonzero(w > 0)} positive-weight rows for {x.shape[1]} coefficients"
        )
    xtw = x.T * w
    gram = xtw @ x
    rhs = xtw @ r
    scale = np.sqrt(np.diag(gram))
    if np.any(scale == 0):
        raise RankDeficient("RankDeficient: a design column is zero on all weighted rows")
    scaled = gram / np.outer(scale, scale)
    try:
        chol = np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError:
        raise RankDeficient("RankDeficient: weighted Gram matrix is not positive definite") from None
    diag = np.diag(chol)
    if (diag.max() / diag.min()) ** 2 > COND_LIMIT:
        raise RankDeficient("RankDeficient: weighted Gram matrix is ill-conditioned")
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs / scale))
    return sol / scale


@dataclass(frozen=True)
class OutcomeModels:
    mu_y1: np.ndarray
    mu_y0: np.ndarray
    mu_d1: np.ndarray
    mu_d0: np.ndarray

    @classmethod
    def zeros(cls, p: int) -> "OutcomeModels":
        z = np.zeros(p)
        return cls(z, z, z, z)

    def predict(self, x_matrix) -> dict[str, np.ndarray]:
        x = np.asarray(x_matrix, dtype=float)
        return {
            "y1": x @ self.mu_y1,
            "y0": x @ self.mu_y0,
            "d1": x @ self.mu_d1,
            "d0": x @ self.mu_d0,
        }

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("mu_y1", "mu_y0", "mu_d1", "mu_d0")}


def fit_outcome_models(dataset, x_matrix=None) -> OutcomeModels:
    """Unweighted OLS of Y and D on X within each study arm."""
    x = dataset.x if x_matrix is None else np.asarray(x_matrix, dtype=float)
    fits = {}
    for arm in (1, 0):
        rows = dataset.study & (dataset.z == arm)
        if np.count_nonzero(rows) < x.shape[1]:
            raise InsufficientStratum(
                f"InsufficientStratum: arm z={arm} has {np.count_nonzero(rows)} rows for {x.shape[1]} coefficients"
            )
        ones = np.ones(np.count_nonzero(rows))
        fits[f"mu_y{arm}"] = solve_weighted_least_squares(x[rows], dataset.y[rows], ones)
        fits[f"mu_d{arm}"] = solve_weighted_least_squares(x[rows], dataset.d[rows], ones)
    return OutcomeModels(**fits)
