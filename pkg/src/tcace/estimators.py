"""Generalization weights and point estimators of the T-CACE / T-ITT."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyArm,
    MissingTargetAssignment,
    NoProxyData,
    NoTargetCompliance,
    OverlapViolation,
    WeakFirstStage,
)
from .models import LogisticFit, OutcomeModels, TreatmentModel, predict_probs, solve_weighted_least_squares

DIV_TOL = 1e-8
WEAK_FIRST_STAGE = 0.05
PROXY_THRESHOLD = 0.15


@dataclass(frozen=True)
class WeightSet:
    """Per-study-row weights ``w1 = odds / P(Z=1|X)`` and ``w0 = odds / P(Z=0|X)``.

    ``odds`` is the estimated P(S=0|X)/P(S=1|X); ``prob_treated`` the
    assignment probability used.  Both are kept for the variance code.
    """

    unit_index: np.ndarray
    w1: np.ndarray
    w0: np.ndarray
    odds: np.ndarray | None = None
    prob_treated: np.ndarray | None = None
    clamped: int = 0

    @property
    def overlap_violation(self) -> bool:
        return self.clamped > 0

    def scaled(self, c: float) -> "WeightSet":
        return replace(self, w1=self.w1 * c, w0=self.w0 * c, odds=None if self.odds is None else self.odds * c)

    def own_arm(self, z: np.ndarray) -> np.ndarray:
        """Each study unit's weight for the arm it was assigned to."""
        return np.where(z == 1, self.w1, self.w0)

    @classmethod
    def from_arrays(cls, dataset, w1, w0) -> "WeightSet":
        idx = np.flatnonzero(dataset.study)
        w1 = np.asarray(w1, dtype=float)
        w0 = np.asarray(w0, dtype=float)
        if w1.shape != idx.shape or w0.shape != idx.shape:
            raise DimensionMismatch("weights must have one entry per study row")
        if np.any(~np.isfinite(w1)) or np.any(~np.isfinite(w0)) or np.any(w1 <= 0) or np.any(w0 <= 0):
            raise ValueError("weights must be finite and positive")
        return cls(idx, w1, w0)


def compute_weights(dataset, selection: LogisticFit, treatment: TreatmentModel) -> WeightSet:
    study = dataset.study
    xs = dataset.x[study]
    p_s, clamped_s = predict_probs(selection, xs)
    odds = (1.0 - p_s) / p_s
    pz = treatment.prob_treated(xs)
    clamped = int(np.count_nonzero(clamped_s))
    if treatment.fit is not None:
        clamped += int(np.count_nonzero(predict_probs(treatment.fit, xs)[1]))
    if clamped:
        warnings.warn(
            f"OverlapViolation: {clamped} study rows used a clamped probability",
            OverlapViolation,
            stacklevel=2,
        )
    return WeightSet(
        unit_index=np.flatnonzero(study),
        w1=odds / pz,
        w0=odds / (1.0 - pz),
        odds=odds,
        prob_treated=pz,
        clamped=clamped,
    )


@dataclass(frozen=True)
class ThetaVector:
    """Six weighted moments, each divided by the full row count n + N.

    Order: treated Y-sum, control Y-sum, treated normaliser, control
    normaliser, treated D-sum, control D-sum.
    """

    theta: np.ndarray
    total: int

    @property
    def tau_y(self) -> float:
        t = self.theta
        return float(t[0] / t[2] - t[1] / t[3])

    @property
    def tau_d(self) -> float:
        t = self.theta
        return float(t[4] / t[2] - t[5] / t[3])


def theta_contributions(dataset, weights: WeightSet, y=None, d=None) -> np.ndarray:
    """Per-unit summands of the six moments, shape (n + N, 6); target rows are zero.

    ``y`` and ``d`` optionally replace the study outcomes (one value per study row).
    """
    study = dataset.study
    if weights.w1.shape[0] != dataset.n:
        raise DimensionMismatch("weights are not aligned with the study rows")
    z = dataset.z[study]
    y = dataset.y[study] if y is None else y
    d = dataset.d[study] if d is None else d
    a1 = weights.w1 * z
    a0 = weights.w0 * (1.0 - z)
    out = np.zeros((dataset.total, 6))
    out[study] = np.column_stack([a1 * y, a0 * y, a1, a0, a1 * d, a0 * d])
    return out


def weighted_components(dataset, weights: WeightSet, y=None, d=None) -> ThetaVector:
    contrib = theta_contributions(dataset, weights, y, d)
    theta = contrib.sum(axis=0) / dataset.total
    if theta[2] <= 0 or theta[3] <= 0:
        raise EmptyArm()
    return ThetaVector(theta, dataset.total)


@dataclass
class CausalEstimate:
    estimand: str
    method: str
    point: float
    first_stage: float
    se: float | None = None
    ci: tuple[float, float] | None = None
    level: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def with_inference(self, se: float, ci: tuple[float, float], level: float, mode: str) -> "CausalEstimate":
        diag = {**self.diagnostics, "se_mode": mode}
        return replace(self, se=float(se), ci=(float(ci[0]), float(ci[1])), level=float(level), diagnostics=diag)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci": None if self.ci is None else [self.ci[0], self.ci[1]],
            "level": self.level,
            "first_stage": self.first_stage,
            "diagnostics": self.diagnostics,
        }


def _ratio(num: float, den: float, method: str, diagnostics: dict, div_tol: float) -> CausalEstimate:
    if abs(den) <= div_tol:
        raise WeakFirstStage(f"WeakFirstStage: first-stage estimate {den:.3g} is numerically zero")
    diag = {**diagnostics, "itt": num, "weak_instrument": bool(den < WEAK_FIRST_STAGE)}
    return CausalEstimate("T_CACE", method, num / den, den, diagnostics=diag)


def _weights_diag(weights: WeightSet) -> dict:
    return {"overlap_violation": weights.overlap_violation, "clamped_rows": weights.clamped}


def weighted_tcace(dataset, weights: WeightSet, div_tol: float = DIV_TOL) -> CausalEstimate:
    th = weighted_components(dataset, weights)
    return _ratio(th.tau_y, th.tau_d, "Weighted", _weights_diag(weights), div_tol)


def weighted_itt(dataset, weights: WeightSet) -> CausalEstimate:
    th = weighted_components(dataset, weights)
    return CausalEstimate("T_ITT", "Weighted", th.tau_y, th.tau_d, diagnostics=_weights_diag(weights))


@dataclass(frozen=True)
class WLSFit:
    tau_y: float
    gamma_y: np.ndarray
    tau_d: float
    gamma_d: np.ndarray


def wls_fit(dataset, weights: WeightSet, adjust=None) -> WLSFit:
    """Weighted regressions of Y and D on (Z, adjustment covariates) over study rows.

    Each row is weighted by its own-arm weight.  ``adjust`` defaults to the
    dataset's adjustment matrix (intercept included); no extra intercept is added.
    """
    study = dataset.study
    a = dataset.adjustment_matrix() if adjust is None else np.asarray(adjust, dtype=float)
    if a.shape[0] == dataset.total:
        a = a[study]
    z = dataset.z[study]
    design = np.column_stack([z, a])
    w = weights.own_arm(z)
    # the solution is invariant to the weight scale; normalising makes it exactly so
    w = w / w.max()
    cy = solve_weighted_least_squares(design, dataset.y[study], w)
    cd = solve_weighted_least_squares(design, dataset.d[study], w)
    return WLSFit(float(cy[0]), cy[1:], float(cd[0]), cd[1:])


def wls_tcace(dataset, weights: WeightSet, adjust=None, div_tol: float = DIV_TOL) -> CausalEstimate:
    fit = wls_fit(dataset, weights, adjust)
    return _ratio(fit.tau_y, fit.tau_d, "WLS", _weights_diag(weights), div_tol)


def wls_itt(dataset, weights: WeightSet, adjust=None) -> CausalEstimate:
    fit = wls_fit(dataset, weights, adjust)
    return CausalEstimate("T_ITT", "WLS", fit.tau_y, fit.tau_d, diagnostics=_weights_diag(weights))


def mr_components(dataset, weights: WeightSet, outcome_models: OutcomeModels) -> tuple[float, float]:
    """Augmented numerator and denominator: weighted residual contrast + target-average model contrast."""
    study = dataset.study
    z = dataset.z[study]
    pred_s = outcome_models.predict(dataset.x[study])
    pred_t = outcome_models.predict(dataset.x[dataset.target])
    res_y = dataset.y[study] - np.where(z == 1, pred_s["y1"], pred_s["y0"])
    res_d = dataset.d[study] - np.where(z == 1, pred_s["d1"], pred_s["d0"])
    th = weighted_components(dataset, weights, res_y, res_d)
    tau_y = th.tau_y + float(np.mean(pred_t["y1"] - pred_t["y0"]))
    tau_d = th.tau_d + float(np.mean(pred_t["d1"] - pred_t["d0"]))
    return float(tau_y), float(tau_d)


def mr_tcace(dataset, weights: WeightSet, outcome_models: OutcomeModels, div_tol: float = DIV_TOL) -> CausalEstimate:
    tau_y, tau_d = mr_components(dataset, weights, outcome_models)
    return _ratio(tau_y, tau_d, "MR", _weights_diag(weights), div_tol)


def _target_compliance_rows(dataset) -> np.ndarray:
    target = dataset.target
    if dataset.d_target is None:
        raise MissingTargetAssignment("MissingTargetAssignment: no target rows carry treatment received")
    rows = target & ~np.isnan(dataset.z) & ~np.isnan(dataset.d_target)
    if not rows.any():
        raise MissingTargetAssignment("MissingTargetAssignment: no target row has both z and d_target")
    return rows


def partial_compliance_tcace(dataset, weights: WeightSet) -> CausalEstimate:
    """Weighted T-ITT scaled by (target assigned count) / (target treated count).

    Valid only without always-takers, which the data cannot confirm.
    """
    th = weighted_components(dataset, weights)
    rows = _target_compliance_rows(dataset)
    z_count = float(dataset.z[rows].sum())
    d_count = float(dataset.d_target[rows].sum())
    if d_count <= 0:
        raise NoTargetCompliance("NoTargetCompliance: no target unit received treatment")
    diag = {
        **_weights_diag(weights),
        "itt": th.tau_y,
        "target_assigned": z_count,
        "target_treated": d_count,
        "target_rows_used": int(rows.sum()),
        "assumption": "no always-takers (not testable from data)",
    }
    return CausalEstimate("T_CACE", "PartialCompliance", th.tau_y * z_count / d_count, d_count / z_count, diagnostics=diag)


@dataclass
class DiagnosticReport:
    proxy_mean: float
    first_stage: float
    difference: float
    threshold: float
    large_discrepancy: bool
    proxy_rows: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def proxy_compliance_diagnostic(dataset, weights: WeightSet, threshold: float = PROXY_THRESHOLD) -> DiagnosticReport:
    """Compare the target proxy-compliance rate with the estimated first stage (advisory only)."""
    if dataset.c_proxy is None:
        raise NoProxyData("NoProxyData: dataset has no c_proxy column")
    rows = dataset.target & ~np.isnan(dataset.c_proxy)
    if not rows.any():
        raise NoProxyData("NoProxyData: no target row carries c_proxy")
    proxy_mean = float(dataset.c_proxy[rows].mean())
    tau_d = weighted_components(dataset, weights).tau_d
    diff = proxy_mean - tau_d
    return DiagnosticReport(proxy_mean, tau_d, diff, threshold, bool(abs(diff) > threshold), int(rows.sum()))
