"""Sandwich (M-estimation) variances, stratified bootstrap and Wald intervals."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from .errors import (
    DegenerateDenominator,
    DegenerateResample,
    EmptyArm,
    EstimationError,
    InputError,
    SingularBread,
)
from .estimators import (
    ThetaVector,
    WeightSet,
    WLSFit,
    compute_weights,
    theta_contributions,
)
from .models import LogisticFit, TreatmentModel, predict_probs

COND_LIMIT = 1e12
DEFAULT_BOOTSTRAP = 500
MAX_REDRAWS = 1000


@dataclass
class SandwichParts:
    bread: np.ndarray
    meat: np.ndarray
    grad_g: np.ndarray
    sigma: np.ndarray


@dataclass
class VarianceResult:
    se: float
    variance: float
    mode: str
    dof_note: str = ""
    parts: SandwichParts | None = field(default=None, repr=False)


def grad_g(theta) -> np.ndarray:
    """Gradient of (t1/t3 - t2/t4) / (t5/t3 - t6/t4) with respect to the six moments."""
    t = np.asarray(getattr(theta, "theta", theta), dtype=float)
    if t[2] == 0 or t[3] == 0:
        raise DegenerateDenominator("DegenerateDenominator: a normaliser moment is zero")
    d1 = t[0] / t[2] - t[1] / t[3]
    d2 = t[4] / t[2] - t[5] / t[3]
    if d2 == 0:
        raise DegenerateDenominator("DegenerateDenominator: first-stage contrast is zero")
    return np.array(
        [
            1.0 / t[2] / d2,
            -1.0 / t[3] / d2,
            (-d2 * t[0] / t[2] ** 2 + d1 * t[4] / t[2] ** 2) / d2**2,
            (d2 * t[1] / t[3] ** 2 - d1 * t[5] / t[3] ** 2) / d2**2,
            -d1 / t[2] / d2**2,
            d1 / t[3] / d2**2,
        ]
    )


def grad_itt(theta) -> np.ndarray:
    """Gradient of the numerator contrast t1/t3 - t2/t4."""
    t = np.asarray(getattr(theta, "theta", theta), dtype=float)
    if t[2] == 0 or t[3] == 0:
        raise DegenerateDenominator("DegenerateDenominator: a normaliser moment is zero")
    return np.array([1 / t[2], -1 / t[3], -t[0] / t[2] ** 2, t[1] / t[3] ** 2, 0.0, 0.0])


def _solve_sandwich(bread: np.ndarray, meat: np.ndarray) -> np.ndarray:
    try:
        cond = np.linalg.cond(bread)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularBread(f"SingularBread: bread condition number {cond:.3g} exceeds {COND_LIMIT:g}")
    inv = np.linalg.inv(bread)
    sigma = inv @ meat @ inv.T
    return 0.5 * (sigma + sigma.T)


def _result(parts: SandwichParts, total: int, mode: str, note: str) -> VarianceResult:
    var = float(parts.grad_g @ parts.sigma @ parts.grad_g) / total
    var = max(var, 0.0)
    return VarianceResult(float(np.sqrt(var)), var, mode, note, parts)


def sandwich_known(dataset, weights: WeightSet, theta: ThetaVector, grad=None) -> VarianceResult:
    """Variance treating the weights as fixed: the bread is -I, so the sandwich is the score covariance."""
    contrib = theta_contributions(dataset, weights)
    psi = contrib - theta.theta
    total = dataset.total
    meat = psi.T @ psi / total
    bread = -np.eye(6)
    g = grad_g(theta) if grad is None else np.asarray(grad, dtype=float)
    parts = SandwichParts(bread, meat, g, _solve_sandwich(bread, meat))
    return _result(parts, total, "KnownWeights", "weights treated as known")


def logistic_parts(dataset, selection: LogisticFit, treatment: TreatmentModel, theta: ThetaVector,
                   grad=None, zero_beta_block: bool = False) -> SandwichParts:
    """Stacked (moments, selection score) bread and meat.

    The moment summands are proportional to the selection odds, whose
    derivative in beta is ``-odds * x``; hence d(summand)/d(beta) = -summand * x.
    """
    if not treatment.is_known:
        raise InputError("sandwich_logistic needs a known treatment probability; use bootstrap_se")
    total = dataset.total
    x = dataset.x
    weights = compute_weights(dataset, selection, treatment)
    contrib = theta_contributions(dataset, weights)
    psi = contrib - theta.theta
    sig, _ = predict_probs(selection, x)
    score = x * (dataset.s - sig)[:, None]
    phi = np.hstack([psi, score])
    p = x.shape[1]
    bread = np.zeros((6 + p, 6 + p))
    bread[:6, :6] = -np.eye(6)
    if not zero_beta_block:
        bread[:6, 6:] = -(contrib.T @ x) / total
    bread[6:, 6:] = (x.T * (sig * (sig - 1.0))) @ x / total
    meat = phi.T @ phi / total
    g = grad_g(theta) if grad is None else np.asarray(grad, dtype=float)
    g_ext = np.concatenate([g, np.zeros(p)])
    return SandwichParts(bread, meat, g_ext, _solve_sandwich(bread, meat))


def sandwich_logistic(dataset, selection: LogisticFit, treatment: TreatmentModel, theta: ThetaVector,
                      grad=None, zero_beta_block: bool = False) -> VarianceResult:
    parts = logistic_parts(dataset, selection, treatment, theta, grad, zero_beta_block)
    return _result(parts, dataset.total, "LogisticWeights", "selection-model uncertainty propagated")


def wls_parts(dataset, weights: WeightSet, selection: LogisticFit | None, fit: WLSFit, adjust=None) -> SandwichParts:
    """Stacked WLS normal equations (tau_y, tau_d, gamma_y, gamma_d) plus the selection score."""
    study = dataset.study
    total = dataset.total
    a = dataset.adjustment_matrix() if adjust is None else np.asarray(adjust, dtype=float)
    if a.shape[0] == dataset.total:
        a = a[study]
    q = a.shape[1]
    z = dataset.z[study]
    w = weights.own_arm(z)
    ry = dataset.y[study] - fit.tau_y * z - a @ fit.gamma_y
    rd = dataset.d[study] - fit.tau_d * z - a @ fit.gamma_d
    k = 2 + 2 * q
    scores = np.zeros((total, k))
    scores[study] = np.column_stack([w * ry * z, w * rd * z, (w * ry)[:, None] * a, (w * rd)[:, None] * a])
    # Jacobian of the WLS block in its own parameters
    za = np.column_stack([z, a])
    gram = (za.T * w) @ za / total
    jac = np.zeros((k, k))
    iy = [0] + list(range(2, 2 + q))
    idd = [1] + list(range(2 + q, 2 + 2 * q))
    jac[np.ix_(iy, iy)] = -gram
    jac[np.ix_(idd, idd)] = -gram
    if selection is None:
        bread, meat = jac, scores.T @ scores / total
        g = np.zeros(k)
    else:
        x = dataset.x
        p = x.shape[1]
        sig, _ = predict_probs(selection, x)
        lscore = x * (dataset.s - sig)[:, None]
        phi = np.hstack([scores, lscore])
        bread = np.zeros((k + p, k + p))
        bread[:k, :k] = jac
        bread[:k, k:] = -(scores.T @ x) / total
        bread[k:, k:] = (x.T * (sig * (sig - 1.0))) @ x / total
        meat = phi.T @ phi / total
        g = np.zeros(k + p)
    if fit.tau_d == 0:
        raise DegenerateDenominator("DegenerateDenominator: WLS first stage is zero")
    g[0] = 1.0 / fit.tau_d
    g[1] = -fit.tau_y / fit.tau_d**2
    return SandwichParts(bread, meat, g, _solve_sandwich(bread, meat))


def sandwich_wls(dataset, weights: WeightSet, selection: LogisticFit | None, wls_fit: WLSFit,
                 adjust=None, itt: bool = False) -> VarianceResult:
    parts = wls_parts(dataset, weights, selection, wls_fit, adjust)
    if itt:
        parts.grad_g = np.zeros_like(parts.grad_g)
        parts.grad_g[0] = 1.0
    note = "selection-model uncertainty propagated" if selection is not None else "weights treated as known"
    return _result(parts, dataset.total, "WLS", note)


def thread_count(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("TCACE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by (seed, *key); independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))


def stratified_indices(dataset, rng: np.random.Generator) -> np.ndarray:
    study = np.flatnonzero(dataset.study)
    target = np.flatnonzero(dataset.target)
    return np.concatenate([rng.choice(study, study.size), rng.choice(target, target.size)])


@dataclass
class BootstrapResult:
    se: np.ndarray
    replicates: np.ndarray
    redraws: int
    b: int
    seed: int

    def variance_result(self, k: int = 0) -> VarianceResult:
        se = float(np.atleast_1d(self.se)[k])
        return VarianceResult(se, se * se, "Bootstrap", f"SD of {self.b} stratified replicates, {self.redraws} redrawn")

    def percentile(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        a = (1.0 - level) / 2.0
        return np.quantile(self.replicates, a, axis=0), np.quantile(self.replicates, 1.0 - a, axis=0)


def bootstrap_replicates(dataset, estimator: Callable, b: int, seed: int, threads: int | None = None,
                         key: tuple = ()):
    """Run ``estimator`` on ``b`` S-stratified resamples; returns (values, redraw count).

    Replicate ``r`` draws from the stream keyed (seed, *key, r, attempt), so the
    output does not depend on the number of worker threads.  Replicates that
    lose an arm or whose nuisance refit fails are redrawn.
    """
    if b < 2:
        raise InputError("bootstrap needs b >= 2")

    def one(r: int):
        for attempt in range(MAX_REDRAWS):
            rng = stream(seed, *key, r, attempt)
            try:
                ds = dataset.take(stratified_indices(dataset, rng))
                return np.asarray(estimator(ds), dtype=float), attempt
            except (EmptyArm, EstimationError):
                continue
        raise DegenerateResample(f"DegenerateResample: replicate {r} failed {MAX_REDRAWS} redraws")

    n_threads = thread_count(threads)
    if n_threads == 1:
        out = [one(r) for r in range(b)]
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            out = list(pool.map(one, range(b)))
    values = np.array([v for v, _ in out])
    redraws = sum(a for _, a in out)
    return values, redraws


def bootstrap_se(dataset, estimator: Callable, b: int = DEFAULT_BOOTSTRAP, seed: int = 0,
                 threads: int | None = None, key: tuple = ()) -> BootstrapResult:
    values, redraws = bootstrap_replicates(dataset, estimator, b, seed, threads, key)
    se = np.std(values, axis=0, ddof=1)
    return BootstrapResult(se, values, redraws, b, seed)


def normal_quantile(p: float) -> float:
    return NormalDist().inv_cdf(p)


def wald_ci(point: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if not 0.0 < level < 1.0:
        raise InputError(f"level must lie in (0, 1), got {level}")
    if se == 0:
        return (point, point)
    half = normal_quantile(1.0 - (1.0 - level) / 2.0) * se
    return (point - half, point + half)
