"""Generalizing complier average causal effects from a study sample to a target population."""

__version__ = "0.1.0"

from .data import Dataset, load_dataset, validate, write_dataset
from .errors import EstimationError, InputError, OverlapViolation, TCACEError
from .estimators import (
    CausalEstimate,
    WeightSet,
    compute_weights,
    mr_tcace,
    partial_compliance_tcace,
    proxy_compliance_diagnostic,
    weighted_components,
    weighted_itt,
    weighted_tcace,
    wls_tcace,
)
from .models import LogisticFit, TreatmentModel, fit_logistic, fit_outcome_models
from .pipeline import analyze
from .sensitivity import (
    SensitivityQuery,
    arm_extremum,
    benchmark_gamma_omission,
    gamma_star,
    sensitivity_interval,
    sensitivity_quadruple,
)
from .simulation import ScenarioSpec, gen_trial, oracle_tcace, run_sensitivity_study, run_study
