"""Synthetic data-generating processes, oracle truths and Monte Carlo studies.

Every random draw comes from a stream keyed by (seed, trial, purpose,
attempt), so a study's output depends only on its spec and never on the
order in which trials are executed.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .data import Dataset
from .errors import (
    ConfigError,
    DegenerateTrial,
    EmptyArm,
    FirstStageSignViolation,
    InputError,
    NoTargetCompliers,
    OverlapViolation,
    StudyFailed,
    TCACEError,
)
from .estimators import compute_weights
from .inference import stream, thread_count
from .models import TreatmentModel, fit_logistic, fit_selection_model, sigmoid
from .pipeline import analyze
from .sensitivity import benchmark_gamma_omission, sensitivity_interval, sensitivity_quadruple

PURPOSE_COEF, PURPOSE_DATA, PURPOSE_BOOT, PURPOSE_MC = 0, 1, 2, 3
MAX_REDRAWS = 100
MAX_EXCLUDED_FRACTION = 0.05
COMPLIER, NEVER_TAKER, ALWAYS_TAKER = 0, 1, 2
TYPE_NAMES = ("Complier", "NeverTaker", "AlwaysTaker")
STUDY_ESTIMATORS = ("weighted", "wls", "mr", "itt")
SENSITIVITY_GRID = (1.06, 1.11, 1.16, 1.21, 1.26)
# constant of the target-membership logit in the confounded design, which
# the design description leaves unset; 1.55 puts the study share near 0.12
SENSITIVITY_INTERCEPT = 1.55


class ScenarioKind(str, Enum):
    STANDARD = "StandardRCT"
    OBSERVATIONAL = "Observational"
    EXCLUSION = "ExclusionViolation"
    PRINCIPAL = "PrincipalIgnorabilityViolation"
    SENSITIVITY = "SensitivityConfounded"

    @classmethod
    def parse(cls, name: str) -> "ScenarioKind":
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "standard": cls.STANDARD, "standardrct": cls.STANDARD, "rct": cls.STANDARD,
            "observational": cls.OBSERVATIONAL, "obs": cls.OBSERVATIONAL,
            "exclusion": cls.EXCLUSION, "exclusionviolation": cls.EXCLUSION,
            "principal": cls.PRINCIPAL, "principalignorabilityviolation": cls.PRINCIPAL,
            "sensitivity": cls.SENSITIVITY, "sensitivityconfounded": cls.SENSITIVITY,
        }
        if key not in aliases:
            raise ConfigError(f"unknown scenario {name!r}; choose from standard, observational, "
                              "exclusion, principal, sensitivity")
        return aliases[key]


@dataclass
class ScenarioSpec:
    """One simulation configuration.

    ``n_total`` is the combined size n + N.  ``r_prime`` scales the summed
    covariates inside the study-membership logit; ``selection_intercept`` is
    the constant of the target-membership logit in the confounded design.
    ``noise_sd`` defaults to sqrt(0.5), reading the outcome noise N(0, 0.5)
    as a variance.
    """

    kind: ScenarioKind = ScenarioKind.STANDARD
    n_total: int | None = None
    r_prime: float = 1.0
    dim_x: int | None = None
    trials: int = 200
    seed: int = 0
    bootstrap_b: int = 100
    noise_sd: float = math.sqrt(0.5)
    lam: float = 0.0
    kappa: float = 0.1
    dim_v: int = 1
    selection_intercept: float | None = None
    treatment_prob: float = 0.5
    estimators: tuple[str, ...] = STUDY_ESTIMATORS
    gamma_grid: tuple[float, ...] = SENSITIVITY_GRID
    level: float = 0.95

    def __post_init__(self):
        self.kind = ScenarioKind.parse(self.kind) if not isinstance(self.kind, ScenarioKind) else self.kind
        sens = self.kind is ScenarioKind.SENSITIVITY
        if self.n_total is None:
            self.n_total = 1500 if sens else 5000
        if self.dim_x is None:
            self.dim_x = 5 if sens else 10
        if self.selection_intercept is None:
            self.selection_intercept = SENSITIVITY_INTERCEPT if sens else 0.0
        for name in ("n_total", "dim_x", "trials", "dim_v"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive count")
            setattr(self, name, int(getattr(self, name)))
        if self.bootstrap_b < 0:
            raise ConfigError("bootstrap_b must be nonnegative")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")
        if not 0 < self.treatment_prob < 1:
            raise ConfigError("treatment_prob must lie in (0, 1)")
        if self.kind is ScenarioKind.OBSERVATIONAL and self.dim_x < 5:
            raise ConfigError("the observational assignment model uses the first 5 covariates")
        self.estimators = tuple(self.estimators)
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)

    @property
    def known_treatment_prob(self) -> float | None:
        return None if self.kind is ScenarioKind.OBSERVATIONAL else self.treatment_prob

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["estimators"] = list(self.estimators)
        d["gamma_grid"] = list(self.gamma_grid)
        return d


@dataclass
class SyntheticTrial:
    dataset: Dataset
    latent: dict
    truth: float | None
    redraws: int = 0

    def dataset_with_confounder(self) -> Dataset:
        """The same units with the hidden confounder appended as a final covariate."""
        u = self.latent.get("u")
        if u is None:
            raise InputError("trial has no confounder U")
        ds = self.dataset
        names = ds.covariate_names + ("u",)
        return Dataset.from_arrays(np.column_stack([ds.x, u]), ds.s, ds.z, ds.d, ds.y, covariate_names=names)


def _coefficients(spec: ScenarioSpec, rng: np.random.Generator) -> dict:
    width = spec.dim_x + 1 + (1 if spec.kind is ScenarioKind.SENSITIVITY else 0)
    coef = {"beta": rng.uniform(-1.0, 1.0, size=(2, width))}
    if spec.kind is ScenarioKind.PRINCIPAL:
        coef["beta_v"] = rng.uniform(-0.5, 1.0, size=(2, spec.dim_v))
    return coef


def _population(spec: ScenarioSpec, coef: dict, size: int, rng: np.random.Generator) -> dict:
    """Draw ``size`` units with covariates, membership, strata and potential outcomes."""
    kind = spec.kind
    x = rng.uniform(-0.3, 0.5, size=(size, spec.dim_x))
    sx = x.sum(axis=1)
    u = v = None
    if kind is ScenarioKind.SENSITIVITY:
        u = rng.uniform(-0.1, 0.5, size=size)
        p_target = sigmoid(spec.selection_intercept + sx + spec.kappa * u)
        s = (rng.random(size) >= p_target).astype(float)
        xstar = np.column_stack([np.ones(size), x, u])
    else:
        s = (rng.random(size) < sigmoid(spec.r_prime * sx)).astype(float)
        xstar = np.column_stack([np.ones(size), x])
    e_nt = np.exp(xstar @ coef["beta"][0])
    e_at = np.exp(xstar @ coef["beta"][1])
    if kind is ScenarioKind.PRINCIPAL:
        v = rng.standard_normal(size=(size, spec.dim_v))
        e_nt = e_nt + 1.5 * np.exp(v @ coef["beta_v"][0])
        e_at = e_at + 1.5 * np.exp(v @ coef["beta_v"][1])
    denom = 3.0 + e_nt + e_at
    p_c, p_nt = 3.0 / denom, e_nt / denom
    draw = rng.random(size)
    ctype = np.where(draw < p_c, COMPLIER, np.where(draw < p_c + p_nt, NEVER_TAKER, ALWAYS_TAKER))
    d1 = (ctype != NEVER_TAKER).astype(float)
    d0 = (ctype == ALWAYS_TAKER).astype(float)
    if kind is ScenarioKind.OBSERVATIONAL:
        pz = sigmoid(0.2 * x[:, :5].sum(axis=1))
    else:
        pz = np.full(size, spec.treatment_prob)
    z = (rng.random(size) < pz).astype(float)
    eps = rng.normal(0.0, spec.noise_sd, size=size) if spec.noise_sd > 0 else np.zeros(size)

    def outcome(dd):
        out = 2.0 * dd + sx + dd * sx + eps
        if kind is ScenarioKind.PRINCIPAL:
            sv = v.sum(axis=1)
            out = out + sv + 1.5 * dd * sv
        if kind is ScenarioKind.SENSITIVITY:
            out = out + u + 2.0 * dd * u
        return out

    lam = spec.lam if kind is ScenarioKind.EXCLUSION else 0.0
    y1 = outcome(d1) + lam
    y0 = outcome(d0)
    return {
        "x": x, "s": s, "z": z, "ctype": ctype, "d1": d1, "d0": d0, "y1": y1, "y0": y0,
        "u": u, "v": v, "p_complier": p_c, "p_never": p_nt, "p_always": e_at / denom,
    }


def _truth(pop: dict) -> float | None:
    rows = (pop["s"] == 0) & (pop["ctype"] == COMPLIER)
    if not rows.any():
        return None
    return float(np.mean(pop["y1"][rows] - pop["y0"][rows]))


def gen_trial(spec: ScenarioSpec, trial_index: int) -> SyntheticTrial:
    """Draw one trial; redraws (counted) when a study arm or the target is empty."""
    coef = _coefficients(spec, stream(spec.seed, trial_index, PURPOSE_COEF))
    for attempt in range(MAX_REDRAWS):
        pop = _population(spec, coef, spec.n_total, stream(spec.seed, trial_index, PURPOSE_DATA, attempt))
        study = pop["s"] == 1
        z = np.where(study, pop["z"], np.nan)
        d = np.where(study, np.where(pop["z"] == 1, pop["d1"], pop["d0"]), np.nan)
        y = np.where(study, np.where(pop["z"] == 1, pop["y1"], pop["y0"]), np.nan)
        try:
            ds = Dataset.from_arrays(pop["x"], pop["s"], z, d, y)
        except (EmptyArm, InputError):
            continue
        latent = {
            "compliance_type": pop["ctype"],
            "y1": pop["y1"], "y0": pop["y0"], "d1": pop["d1"], "d0": pop["d0"],
            "z_full": pop["z"], "u": pop["u"], "v": pop["v"],
            "coefficients": coef,
        }
        return SyntheticTrial(ds, latent, _truth(pop), attempt)
    raise DegenerateTrial(f"DegenerateTrial: trial {trial_index} degenerate after {MAX_REDRAWS} redraws")


def oracle_tcace(trial: SyntheticTrial) -> float:
    """Mean of y1 - y0 over the trial's target-population compliers."""
    lat = trial.latent
    rows = (trial.dataset.s == 0) & (lat["compliance_type"] == COMPLIER)
    if not rows.any():
        raise NoTargetCompliers("NoTargetCompliers: the target population has no compliers")
    return float(np.mean(lat["y1"][rows] - lat["y0"][rows]))


def population_tcace(spec: ScenarioSpec, trial_index: int, draws: int = 1_000_000, chunk: int = 200_000) -> float:
    """Monte Carlo T-CACE for the trial's coefficient draw, from fresh units."""
    coef = _coefficients(spec, stream(spec.seed, trial_index, PURPOSE_COEF))
    total, count = 0.0, 0
    for k in range(0, draws, chunk):
        pop = _population(spec, coef, min(chunk, draws - k), stream(spec.seed, trial_index, PURPOSE_MC, k))
        rows = (pop["s"] == 0) & (pop["ctype"] == COMPLIER)
        total += float(np.sum(pop["y1"][rows] - pop["y0"][rows]))
        count += int(rows.sum())
    if count == 0:
        raise NoTargetCompliers("NoTargetCompliers: no target compliers in the Monte Carlo draw")
    return total / count


@dataclass
class StudyRow:
    estimator: str
    big_n: int
    ratio: float
    mean_bias: float
    sd: float
    coverage_pct: float


@dataclass
class StudyTable:
    rows: list[StudyRow]
    spec: ScenarioSpec
    trials_used: int
    excluded: int
    redraws: int
    biases: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    exclusion_reasons: list[str] = field(default_factory=list, repr=False)

    def row(self, estimator: str) -> StudyRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def metadata(self) -> dict:
        meta = {
            "spec": self.spec.to_dict(),
            "trials_used": self.trials_used,
            "excluded": self.excluded,
            "redraws": self.redraws,
            "noise": f"sd={self.spec.noise_sd:.6g} (variance {self.spec.noise_sd ** 2:.6g})",
        }
        if "mr" in self.spec.estimators and self.spec.bootstrap_b < 500:
            meta["note"] = f"desk run: bootstrap_b={self.spec.bootstrap_b} (< 500) for bootstrap-based SEs"
        return meta

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "big_n", "ratio", "mean_bias", "sd", "coverage_pct"])
        for r in self.rows:
            w.writerow([r.estimator, r.big_n, repr(r.ratio), repr(r.mean_bias), repr(r.sd), repr(r.coverage_pct)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], **self.metadata()}, indent=2)

    def to_text(self) -> str:
        return format_study_tables([self])


_LABELS = {"weighted": "Weighted", "wls": "WLS", "mr": "MR", "itt": "Weighted ITT", "pc": "Partial"}


def format_study_tables(tables: list[StudyTable]) -> str:
    """Aligned text: one line per configuration, bias (SD) and coverage per estimator."""
    if not tables:
        return ""
    ests = [r.estimator for r in tables[0].rows]
    head = ["N", "Ratio"]
    for e in ests:
        head += [f"{_LABELS.get(e, e)} Bias (SD)", "Cov %"]
    body = []
    for t in tables:
        line = [str(t.spec.n_total), f"{t.rows[0].ratio:.2f}"]
        for e in ests:
            r = t.row(e)
            line += [f"{r.mean_bias:.2f} ({r.sd:.2f})", f"{r.coverage_pct:.1f}"]
        body.append(line)
    widths = [max(len(row[k]) for row in [head] + body) for k in range(len(head))]
    fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))  # noqa: E731
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"


def _run_trial(spec: ScenarioSpec, t: int):
    trial = gen_trial(spec, t)
    truth = oracle_tcace(trial)
    ests = analyze(trial.dataset, spec.estimators, spec.known_treatment_prob, spec.level,
                   spec.bootstrap_b, spec.seed, threads=1, key=(t, PURPOSE_BOOT))
    out = {}
    for name, e in zip(spec.estimators, ests):
        covered = e.ci is not None and e.ci[0] <= truth <= e.ci[1]
        out[name] = (e.point - truth, covered)
    return out, trial.dataset.n / trial.dataset.total, trial.redraws


def _map_trials(fn, count: int, threads: int | None):
    def safe(t):
        try:
            return fn(t)
        except TCACEError as exc:
            return exc

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverlapViolation)
        n = thread_count(threads)
        if n == 1:
            return [safe(t) for t in range(count)]
        with ThreadPoolExecutor(n) as pool:
            return list(pool.map(safe, range(count)))


def _check_exclusions(spec, failures):
    if len(failures) > MAX_EXCLUDED_FRACTION * spec.trials:
        raise StudyFailed(
            f"StudyFailed: {len(failures)} of {spec.trials} trials excluded; first: {failures[0]}"
        )


def run_study(spec: ScenarioSpec, estimators=None, threads: int | None = None) -> StudyTable:
    """Bias, SD and CI coverage of each estimator over ``spec.trials`` trials."""
    if estimators is not None:
        spec = ScenarioSpec(**{**spec.__dict__, "estimators": tuple(estimators)})
    results = _map_trials(lambda t: _run_trial(spec, t), spec.trials, threads)
    failures = [str(r) for r in results if isinstance(r, Exception)]
    _check_exclusions(spec, failures)
    good = [r for r in results if not isinstance(r, Exception)]
    ratio = float(np.mean([g[1] for g in good]))
    rows, biases = [], {}
    for name in spec.estimators:
        b = np.array([g[0][name][0] for g in good])
        cov = np.array([g[0][name][1] for g in good])
        biases[name] = b
        sd = float(np.std(b, ddof=1)) if b.size > 1 else 0.0
        rows.append(StudyRow(name, spec.n_total, ratio, float(np.mean(b)), sd, 100.0 * float(np.mean(cov))))
    return StudyTable(rows, spec, len(good), len(failures), sum(g[2] for g in good), biases, failures)


@dataclass
class SensitivityStudy:
    spec: ScenarioSpec
    gammas: tuple[float, ...]
    coverage_pct: list[float]
    mean_lo: list[float]
    mean_hi: list[float]
    undefined: list[int]
    gamma_hats: np.ndarray
    truths: np.ndarray
    trials_used: int
    excluded: int

    @property
    def gamma_true(self) -> float:
        return math.exp(0.6 * self.spec.kappa)

    @property
    def mean_gamma_hat(self) -> float:
        return float(np.mean(self.gamma_hats))

    def coverage(self, gamma: float) -> float:
        for g, c in zip(self.gammas, self.coverage_pct):
            if abs(g - gamma) < 1e-12:
                return c
        raise KeyError(gamma)

    def rows(self) -> list[dict]:
        sd = float(np.std(self.gamma_hats, ddof=1)) if self.gamma_hats.size > 1 else 0.0
        return [
            {"kappa": self.spec.kappa, "gamma_true": self.gamma_true, "mean_gamma_hat": self.mean_gamma_hat,
             "sd_gamma_hat": sd, "gamma": g, "coverage_pct": c, "mean_lo": lo, "mean_hi": hi,
             "undefined_intervals": u}
            for g, c, lo, hi, u in zip(self.gammas, self.coverage_pct, self.mean_lo, self.mean_hi, self.undefined)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec.to_dict(), "rows": self.rows(), "trials_used": self.trials_used,
                           "excluded": self.excluded, "mean_truth": float(np.mean(self.truths))}, indent=2)

    def to_text(self) -> str:
        head = ["kappa", "Gamma", "Mean Gamma-hat (SD)", "gamma", "Coverage %"]
        body = []
        for r in self.rows():
            body.append([f"{r['kappa']:g}", f"{r['gamma_true']:.2f}",
                         f"{r['mean_gamma_hat']:.2f} ({r['sd_gamma_hat']:.2f})", f"{r['gamma']:.2f}",
                         f"{r['coverage_pct']:.1f}"])
        widths = [max(len(x[k]) for x in [head] + body) for k in range(len(head))]
        fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))  # noqa: E731
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"


def _sensitivity_trial(spec: ScenarioSpec, gammas, t: int):
    trial = gen_trial(spec, t)
    truth = oracle_tcace(trial)
    ds = trial.dataset
    sel = fit_selection_model(ds)
    weights = compute_weights(ds, sel, TreatmentModel.known(spec.treatment_prob))
    intervals = []
    for g in gammas:
        try:
            intervals.append(sensitivity_interval(sensitivity_quadruple(ds, weights, g)))
        except FirstStageSignViolation:
            intervals.append(None)
    ds_u = trial.dataset_with_confounder()
    full = fit_logistic(ds_u.x, ds_u.s)
    gamma_hat = benchmark_gamma_omission(ds_u, full, ds_u.p - 1)
    return truth, intervals, gamma_hat


def run_sensitivity_study(spec: ScenarioSpec, gamma_grid=None, threads: int | None = None) -> SensitivityStudy:
    """Coverage of the oracle truth by the sensitivity interval at each gamma, plus mean Gamma-hat.

    An undefined interval (first stage can reach zero) is unbounded and covers.
    """
    if spec.kind is not ScenarioKind.SENSITIVITY:
        raise ConfigError("run_sensitivity_study needs a SensitivityConfounded scenario")
    gammas = tuple(float(g) for g in (gamma_grid if gamma_grid is not None else spec.gamma_grid))
    results = _map_trials(lambda t: _sensitivity_trial(spec, gammas, t), spec.trials, threads)
    failures = [str(r) for r in results if isinstance(r, Exception)]
    _check_exclusions(spec, failures)
    good = [r for r in results if not isinstance(r, Exception)]
    cov, lo_m, hi_m, undef = [], [], [], []
    for k in range(len(gammas)):
        hits, los, his, u = 0, [], [], 0
        for truth, ivs, _ in good:
            iv = ivs[k]
            if iv is None:
                u += 1
                hits += 1
                continue
            hits += iv[0] <= truth <= iv[1]
            los.append(iv[0])
            his.append(iv[1])
        cov.append(100.0 * hits / len(good))
        lo_m.append(float(np.mean(los)) if los else float("nan"))
        hi_m.append(float(np.mean(his)) if his else float("nan"))
        undef.append(u)
    return SensitivityStudy(spec, gammas, cov, lo_m, hi_m, undef, np.array([g[2] for g in good]),
                            np.array([g[0] for g in good]), len(good), len(failures))


_INT_KEYS = {"n_total", "dim_x", "trials", "seed", "bootstrap_b", "dim_v"}
_FLOAT_KEYS = {"r_prime", "noise_sd", "lam", "kappa", "selection_intercept", "treatment_prob", "level"}
_KEY_ALIASES = {"big_n": "n_total", "lambda": "lam", "n": "n_total"}


def parse_grid(text: str) -> tuple[float, ...]:
    """'1:2:0.05' (inclusive range) or '1.06,1.11'."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            count = int(math.floor((b - a) / step + 1e-9)) + 1
            return tuple(round(a + k * step, 10) for k in range(count))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad gamma grid {text!r}; use start:stop:step or a comma list") from None


def spec_from_mapping(values: dict) -> ScenarioSpec:
    kwargs = {}
    for raw_key, raw in values.items():
        key = _KEY_ALIASES.get(raw_key.strip().lower(), raw_key.strip().lower())
        try:
            if key == "kind":
                kwargs[key] = ScenarioKind.parse(raw)
            elif key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            elif key == "estimators":
                kwargs[key] = tuple(e.strip().lower() for e in str(raw).split(",") if e.strip())
            elif key == "gamma_grid":
                kwargs[key] = parse_grid(str(raw))
            else:
                raise ConfigError(f"unknown scenario key {raw_key!r}")
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"bad value for {raw_key!r}: {raw!r}") from None
    return ScenarioSpec(**kwargs)


def read_config(path) -> list[ScenarioSpec]:
    """Scenario specs from a key = value file; every section named 'scenario*' is one spec."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    sections = [s for s in parser.sections() if s.lower().startswith("scenario")]
    if not sections:
        raise ConfigError(f"config {path} has no [scenario] section")
    return [spec_from_mapping(dict(parser[s])) for s in sections]
