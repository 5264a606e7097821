"""Fit nuisance models, compute the requested estimators, attach standard errors.

Sandwich variances are used whenever the assignment probability is known;
otherwise (and always for MR and partial compliance) a stratified bootstrap
that refits every nuisance model is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import (
    CausalEstimate,
    compute_weights,
    mr_tcace,
    partial_compliance_tcace,
    weighted_components,
    weighted_itt,
    weighted_tcace,
    wls_fit,
    wls_tcace,
)
from .errors import InputError
from .inference import (
    bootstrap_se,
    grad_itt,
    sandwich_logistic,
    sandwich_wls,
    wald_ci,
)
from .models import (
    TreatmentModel,
    fit_outcome_models,
    fit_selection_model,
    fit_treatment_model,
)

METHODS = ("weighted", "wls", "mr", "itt", "pc")
SANDWICH_CAPABLE = {"weighted", "wls", "itt"}


@dataclass
class Nuisance:
    selection: object
    treatment: TreatmentModel
    weights: object


def fit_nuisance(dataset, treatment_prob: float | None = None) -> Nuisance:
    selection = fit_selection_model(dataset)
    treatment = TreatmentModel.known(treatment_prob) if treatment_prob is not None else fit_treatment_model(dataset)
    return Nuisance(selection, treatment, compute_weights(dataset, selection, treatment))


def point_estimates(dataset, methods, treatment_prob: float | None = None) -> dict[str, CausalEstimate]:
    nz = fit_nuisance(dataset, treatment_prob)
    return _points(dataset, methods, nz)


def _points(dataset, methods, nz: Nuisance) -> dict[str, CausalEstimate]:
    out = {}
    for m in methods:
        if m == "weighted":
            out[m] = weighted_tcace(dataset, nz.weights)
        elif m == "wls":
            out[m] = wls_tcace(dataset, nz.weights)
        elif m == "mr":
            out[m] = mr_tcace(dataset, nz.weights, fit_outcome_models(dataset))
        elif m == "itt":
            out[m] = weighted_itt(dataset, nz.weights)
        elif m == "pc":
            out[m] = partial_compliance_tcace(dataset, nz.weights)
        else:
            raise InputError(f"unknown estimator {m!r}; choose from {', '.join(METHODS)}")
    return out


def bootstrap_estimator(methods, treatment_prob: float | None):
    """Handle returning the point estimates of ``methods`` after refitting every nuisance model."""

    def run(ds):
        pts = point_estimates(ds, methods, treatment_prob)
        return np.array([pts[m].point for m in methods])

    return run


def analyze(dataset, methods=("weighted", "wls", "mr", "itt"), treatment_prob: float | None = None,
            level: float = 0.95, bootstrap_b: int | None = 500, seed: int = 0,
            threads: int | None = None, key: tuple = ()) -> list[CausalEstimate]:
    """Point estimates with standard errors and Wald intervals.

    ``bootstrap_b`` of None or 0 leaves bootstrap-only estimators without SEs.
    """
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise InputError(f"unknown estimator {m!r}; choose from {', '.join(METHODS)}")
    nz = fit_nuisance(dataset, treatment_prob)
    pts = _points(dataset, methods, nz)
    known = nz.treatment.is_known
    theta = weighted_components(dataset, nz.weights)
    for m in methods:
        if not (known and m in SANDWICH_CAPABLE):
            continue
        if m == "weighted":
            vr = sandwich_logistic(dataset, nz.selection, nz.treatment, theta)
        elif m == "itt":
            vr = sandwich_logistic(dataset, nz.selection, nz.treatment, theta, grad=grad_itt(theta))
        else:
            vr = sandwich_wls(dataset, nz.weights, nz.selection, wls_fit(dataset, nz.weights))
        pts[m] = pts[m].with_inference(vr.se, wald_ci(pts[m].point, vr.se, level), level, vr.mode)
    boot = [m for m in methods if not (known and m in SANDWICH_CAPABLE)]
    if boot and bootstrap_b:
        res = bootstrap_se(dataset, bootstrap_estimator(boot, treatment_prob), bootstrap_b, seed, threads, key)
        for k, m in enumerate(boot):
            se = float(res.se[k])
            est = pts[m].with_inference(se, wald_ci(pts[m].point, se, level), level, "Bootstrap")
            est.diagnostics.update({"bootstrap_b": bootstrap_b, "bootstrap_seed": seed, "bootstrap_redraws": res.redraws})
            pts[m] = est
    return [pts[m] for m in methods]
