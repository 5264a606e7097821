"""Partial identification of the T-CACE under a marginal sensitivity model.

Each unit's weight may be perturbed by a factor r in [1/gamma, gamma].  The
arm-wise weighted means are linear-fractional in r, so their extrema sit at
vertices where r takes only the two extreme values, split at a threshold of
the sorted outcome.  :func:`arm_extremum` scans those n + 1 splits directly;
it solves the same problem as the Charnes-Cooper linear program

    max/min  sum_i u_i w_i v_i
    s.t.     sum_i u_i w_i = 1,   t / gamma <= u_i <= t * gamma,   t > 0,

with u = t r.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyArm, EstimationError, FirstStageSignViolation, InputError, NotFound
from .estimators import DIV_TOL, WeightSet, compute_weights
from .inference import stratified_indices, stream
from .models import TreatmentModel, fit_logistic, fit_selection_model, fit_treatment_model, predict_probs

GAMMA_MAX = 20.0
BISECT_TOL = 1e-4
DEFAULT_GRID = tuple(round(1.0 + 0.05 * k, 10) for k in range(21))


def arm_extremum(values, base_weights, gamma: float, direction: str = "max") -> float:
    """Extremum of sum(r w v) / sum(r w) over r in [1/gamma, gamma]^n."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(base_weights, dtype=float)
    if v.size == 0:
        raise EmptyArm("EmptyArm: no units in this arm")
    if v.shape != w.shape:
        raise InputError("values and weights must have the same length")
    if gamma < 1:
        raise InputError(f"gamma must be >= 1, got {gamma}")
    direction = direction.lower()
    if direction not in ("max", "min"):
        raise InputError("direction must be 'max' or 'min'")
    if gamma == 1:
        # the box is a single point; both directions must agree exactly
        return float(np.sum(w * v) / np.sum(w))
    order = np.argsort(v, kind="stable")
    v = v[order]
    w = w[order]
    wv = w * v
    zero = np.zeros(1)
    # prefix sums over the k smallest values, suffix sums over the rest (k = 0..n)
    pre_w = np.concatenate([zero, np.cumsum(w)])
    pre_wv = np.concatenate([zero, np.cumsum(wv)])
    suf_w = np.concatenate([np.cumsum(w[::-1])[::-1], zero])
    suf_wv = np.concatenate([np.cumsum(wv[::-1])[::-1], zero])
    lo, hi = 1.0 / gamma, float(gamma)
    if direction == "max":
        obj = (lo * pre_wv + hi * suf_wv) / (lo * pre_w + hi * suf_w)
        return float(obj.max())
    obj = (hi * pre_wv + lo * suf_wv) / (hi * pre_w + lo * suf_w)
    return float(obj.min())


def _arms(dataset, weights: WeightSet):
    study = dataset.study
    z = dataset.z[study]
    t, c = z == 1, z == 0
    return (
        (dataset.y[study][t], dataset.d[study][t], weights.w1[t]),
        (dataset.y[study][c], dataset.d[study][c], weights.w0[c]),
    )


def sensitivity_quadruple(dataset, weights: WeightSet, gamma: float) -> tuple[float, float, float, float]:
    """(min tau_Y, max tau_Y, min tau_D, max tau_D); each arm is optimised separately."""
    (yt, dt, wt), (yc, dc, wc) = _arms(dataset, weights)
    if yt.size == 0 or yc.size == 0:
        raise EmptyArm()
    min_y = arm_extremum(yt, wt, gamma, "min") - arm_extremum(yc, wc, gamma, "max")
    max_y = arm_extremum(yt, wt, gamma, "max") - arm_extremum(yc, wc, gamma, "min")
    min_d = arm_extremum(dt, wt, gamma, "min") - arm_extremum(dc, wc, gamma, "max")
    max_d = arm_extremum(dt, wt, gamma, "max") - arm_extremum(dc, wc, gamma, "min")
    return (min_y, max_y, min_d, max_d)


def sensitivity_interval(quad, div_tol: float = DIV_TOL) -> tuple[float, float]:
    """Conservative bounds on tau_Y / tau_D over the box of the quadruple.

    Requires a strictly positive first stage.  The lower end is
    min_Y / max_D when min_Y >= 0 and min_Y / min_D otherwise (symmetric for
    the upper end), i.e. the exact extremes of y / d over the box.
    """
    min_y, max_y, min_d, max_d = quad
    if min_d <= div_tol:
        raise FirstStageSignViolation(
            f"FirstStageSignViolation: minimum first stage {min_d:.3g} is not positive; bound undefined"
        )
    lo = min_y / max_d if min_y >= 0 else min_y / min_d
    hi = max_y / min_d if max_y >= 0 else max_y / max_d
    return (lo, hi)


def _contains_zero(interval) -> bool:
    return interval[0] <= 0.0 <= interval[1]


@dataclass
class SensitivityQuery:
    gamma: float = 1.0
    grid: tuple[float, ...] | None = None
    bootstrap_b: int | None = None
    seed: int = 0
    level: float = 0.95
    gamma_max: float = GAMMA_MAX
    tol: float = BISECT_TOL

    def __post_init__(self):
        if self.gamma < 1:
            raise InputError(f"gamma must be >= 1, got {self.gamma}")
        if self.grid is not None:
            g = tuple(float(v) for v in self.grid)
            if any(v < 1 for v in g) or any(b <= a for a, b in zip(g, g[1:])):
                raise InputError("gamma grid must be strictly increasing and >= 1")
            self.grid = g


class _BootstrapSensitivity:
    """Per-replicate (dataset, weights) pairs reused across gamma values."""

    def __init__(self, dataset, b: int, seed: int, treatment_prob: float | None, level: float):
        self.level = level
        self.reps = []
        self.redraws = 0
        for r in range(b):
            for attempt in range(1000):
                rng = stream(seed, r, attempt)
                try:
                    ds = dataset.take(stratified_indices(dataset, rng))
                    sel = fit_selection_model(ds)
                    tr = TreatmentModel.known(treatment_prob) if treatment_prob is not None else fit_treatment_model(ds)
                    self.reps.append((ds, compute_weights(ds, sel, tr)))
                    self.redraws += attempt
                    break
                except (EmptyArm, EstimationError):
                    continue

    def interval(self, gamma: float) -> tuple[float, float]:
        los, his = [], []
        for ds, w in self.reps:
            try:
                lo, hi = sensitivity_interval(sensitivity_quadruple(ds, w, gamma))
            except FirstStageSignViolation:
                lo, hi = -math.inf, math.inf
            los.append(lo)
            his.append(hi)
        a = (1.0 - self.level) / 2.0
        los, his = np.asarray(los), np.asarray(his)
        if np.all(np.isfinite(los)) and np.all(np.isfinite(his)):
            return (float(np.quantile(los, a)), float(np.quantile(his, 1.0 - a)))
        # interpolating between infinite endpoints is undefined; fall back to order statistics
        return (float(np.quantile(los, a, method="lower")), float(np.quantile(his, 1.0 - a, method="higher")))


def _point_interval_or_unbounded(dataset, weights, gamma):
    try:
        return sensitivity_interval(sensitivity_quadruple(dataset, weights, gamma))
    except FirstStageSignViolation:
        return (-math.inf, math.inf)


def gamma_star(dataset, weights: WeightSet, query: SensitivityQuery | None = None,
               treatment_prob: float | None = 0.5, _boot: _BootstrapSensitivity | None = None) -> float:
    """Smallest gamma whose interval contains zero, by bisection on [1, gamma_max].

    An undefined bound (first stage can reach zero) counts as containing zero.
    With ``query.bootstrap_b`` the percentile-bootstrap interval is used.
    """
    query = query or SensitivityQuery()
    if query.bootstrap_b:
        boot = _boot or _BootstrapSensitivity(dataset, query.bootstrap_b, query.seed, treatment_prob, query.level)
        contains = lambda g: _contains_zero(boot.interval(g))  # noqa: E731
    else:
        contains = lambda g: _contains_zero(_point_interval_or_unbounded(dataset, weights, g))  # noqa: E731
    if contains(1.0):
        return 1.0
    if not contains(query.gamma_max):
        raise NotFound(f"NotFound: interval excludes zero for every gamma <= {query.gamma_max:g}")
    lo, hi = 1.0, float(query.gamma_max)
    while hi - lo > query.tol:
        mid = 0.5 * (lo + hi)
        if contains(mid):
            hi = mid
        else:
            lo = mid
    return hi


def benchmark_gamma_omission(dataset, selection_full, covariate_index: int) -> float:
    """Gamma implied by dropping one covariate from the selection model.

    Compares each study unit's odds weight with and without the covariate and
    returns max(max ratio, 1 / min ratio).  Constant assignment probabilities
    cancel in the ratio.
    """
    reduced_ds = dataset.drop_covariate(covariate_index)
    reduced = fit_logistic(reduced_ds.x, reduced_ds.s)
    study = dataset.study
    p_full, _ = predict_probs(selection_full, dataset.x[study])
    p_red, _ = predict_probs(reduced, reduced_ds.x[study])
    ratio = ((1 - p_full) / p_full) / ((1 - p_red) / p_red)
    return float(max(ratio.max(), 1.0 / ratio.min()))


def benchmark_all(dataset, covariates=None, selection_full=None) -> list[dict]:
    """Gamma-hat for each named covariate (default: all), sorted ascending."""
    selection_full = selection_full or fit_selection_model(dataset)
    names = list(dataset.covariate_names if covariates is None else covariates)
    offset = dataset.p - len(dataset.covariate_names)
    rows = []
    for name in names:
        if name not in dataset.covariate_names:
            raise InputError(f"unknown covariate {name!r}")
        idx = offset + dataset.covariate_names.index(name)
        try:
            rows.append({"omitted_covariate": name, "gamma_hat": benchmark_gamma_omission(dataset, selection_full, idx)})
        except EstimationError as exc:
            rows.append({"omitted_covariate": name, "gamma_hat": None, "error": str(exc)})
    rows.sort(key=lambda r: (r["gamma_hat"] is None, r["gamma_hat"] or 0.0))
    return rows


@dataclass
class SensitivityReport:
    per_gamma: list[dict]
    gamma_star: float | None = None
    gamma_star_mode: str = "point"
    gamma_star_note: str = ""
    benchmarks: list[dict] = field(default_factory=list)
    point_estimate: float | None = None

    def to_dict(self) -> dict:
        return {
            "point_estimate": self.point_estimate,
            "per_gamma": self.per_gamma,
            "gamma_star": self.gamma_star,
            "gamma_star_mode": self.gamma_star_mode,
            "gamma_star_note": self.gamma_star_note,
            "benchmarks": self.benchmarks,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[list]:
        rows = [["gamma", "lo", "hi", "boot_lo", "boot_hi"]]
        for e in self.per_gamma:
            lo, hi = e["interval"] if e["interval"] else ("", "")
            blo, bhi = e["bootstrap_ci"] if e.get("bootstrap_ci") else ("", "")
            rows.append([e["gamma"], lo, hi, blo, bhi])
        return rows


def sensitivity_report(dataset, weights: WeightSet, query: SensitivityQuery, treatment_prob: float | None = 0.5,
                       benchmarks: bool = False) -> SensitivityReport:
    grid = query.grid if query.grid is not None else (query.gamma,)
    boot = None
    if query.bootstrap_b:
        boot = _BootstrapSensitivity(dataset, query.bootstrap_b, query.seed, treatment_prob, query.level)
    per = []
    for g in grid:
        quad = sensitivity_quadruple(dataset, weights, g)
        entry = {"gamma": g, "quad": list(quad), "interval": None}
        try:
            entry["interval"] = list(sensitivity_interval(quad))
        except FirstStageSignViolation as exc:
            entry["error"] = str(exc)
        if boot is not None:
            entry["bootstrap_ci"] = list(boot.interval(g))
        per.append(entry)
    q1 = sensitivity_quadruple(dataset, weights, 1.0)
    point = q1[0] / q1[2] if q1[2] != 0 else None
    report = SensitivityReport(per, point_estimate=point, gamma_star_mode="bootstrap" if boot else "point")
    try:
        report.gamma_star = gamma_star(dataset, weights, query, treatment_prob, boot)
    except NotFound as exc:
        report.gamma_star_note = str(exc)
    if benchmarks:
        report.benchmarks = benchmark_all(dataset)
    return report
