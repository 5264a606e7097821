import itertools
import math

import numpy as np
import pytest
from oracles import charnes_cooper_lp, enumerate_extremum, grid_gamma_star

from tcace.data import Dataset
from tcace.errors import EmptyArm, FirstStageSignViolation, InputError, NotFound
from tcace.estimators import WeightSet, compute_weights, weighted_components, weighted_tcace
from tcace.models import TreatmentModel, fit_selection_model, sigmoid
from tcace.sensitivity import (
    DEFAULT_GRID,
    SensitivityQuery,
    arm_extremum,
    benchmark_all,
    benchmark_gamma_omission,
    gamma_star,
    sensitivity_interval,
    sensitivity_quadruple,
    sensitivity_report,
)
from tcace.simulation import ScenarioKind, ScenarioSpec, run_sensitivity_study


def strong_selection_dataset(rng, n=2000, strong=1.5, weak=(0.3, 0.2, 0.1)):
    """Selection driven mostly by the first covariate; outcomes depend on all."""
    coefs = np.r_[strong, weak]
    x = rng.normal(size=(n, coefs.size))
    s = (rng.random(n) < sigmoid(0.3 + x @ coefs)) * 1.0
    z = np.where(s == 1, (rng.random(n) < 0.5) * 1.0, np.nan)
    d = np.where(s == 1, np.where(z == 1, rng.random(n) < 0.7, 0.0), np.nan) * 1.0
    y = np.where(s == 1, 1.0 + 2.0 * d + x.sum(axis=1) + rng.normal(size=n), np.nan)
    return Dataset.from_arrays(x, s, z, d, y)


def weighted_setup(ds):
    w = compute_weights(ds, fit_selection_model(ds), TreatmentModel.known(0.5))
    return w, weighted_tcace(ds, w).point


def test_arm_extremum_examples():
    assert arm_extremum([1, 2, 3], [1, 1, 1], 1.0, "max") == 2.0
    assert arm_extremum([1, 2, 3], [1, 1, 1], 1.0, "min") == 2.0
    assert arm_extremum([1, 2, 3], [1, 1, 1], 2.0, "max") == pytest.approx(2.5, abs=1e-15)
    assert enumerate_extremum([1, 2, 3], [1, 1, 1], 2.0, "max") == pytest.approx(2.5, abs=1e-15)


def test_arm_extremum_errors():
    with pytest.raises(EmptyArm):
        arm_extremum([], [], 2.0)
    with pytest.raises(InputError):
        arm_extremum([1.0], [1.0], 0.5)
    with pytest.raises(InputError):
        arm_extremum([1.0], [1.0, 2.0], 2.0)


def test_arm_extremum_ties_invariant():
    v = [1.0, 2.0, 2.0, 2.0, 5.0]
    w = [0.5, 1.0, 3.0, 2.0, 1.0]
    perm = [3, 0, 4, 2, 1]
    for d in ("max", "min"):
        a = arm_extremum(v, w, 3.0, d)
        b = arm_extremum([v[i] for i in perm], [w[i] for i in perm], 3.0, d)
        assert a == pytest.approx(b, abs=1e-14)


@pytest.mark.parametrize("gamma", [1.1, 2.0, 5.0])
def test_arm_extremum_matches_enumeration(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    for _ in range(60):
        n = int(rng.integers(1, 13))
        v = rng.normal(size=n) * rng.choice([1.0, 10.0])
        w = rng.uniform(0.05, 5.0, size=n)
        for d in ("max", "min"):
            assert abs(arm_extremum(v, w, gamma, d) - enumerate_extremum(v, w, gamma, d)) <= 1e-12


def test_arm_extremum_matches_linear_program():
    rng = np.random.default_rng(4)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        v, w = rng.normal(size=n), rng.uniform(0.1, 3.0, size=n)
        g = float(rng.uniform(1.0, 4.0))
        for d in ("max", "min"):
            assert arm_extremum(v, w, g, d) == pytest.approx(charnes_cooper_lp(v, w, g, d), abs=1e-7)


def six_units():
    x = np.array([[0.1], [0.4], [-0.3], [0.8], [-0.6], [0.2], [0.0], [0.5]])
    s = np.r_[np.ones(6), np.zeros(2)]
    z = np.array([1, 1, 1, 0, 0, 0, np.nan, np.nan])
    d = np.array([1, 0, 1, 0, 1, 0, np.nan, np.nan])
    y = np.array([3.0, 1.0, 2.5, 0.2, 1.4, -0.5, np.nan, np.nan])
    ds = Dataset.from_arrays(x, s, z, d, y)
    return ds, WeightSet.from_arrays(ds, np.array([1.0, 2.0, 0.5, 1, 1, 1]), np.array([1, 1, 1, 0.7, 1.5, 2.5]))


def test_quadruple_matches_joint_enumeration():
    ds, w = six_units()
    g = 2.0
    t, c = ds.z[:6] == 1, ds.z[:6] == 0
    ty, tdv, cy, cdv = [], [], [], []
    for r in itertools.product((1 / g, g), repeat=6):
        r = np.array(r)
        wt, wc = r[:3] * w.w1[t], r[3:] * w.w0[c]
        ty.append(wt @ ds.y[:6][t] / wt.sum() - wc @ ds.y[:6][c] / wc.sum())
        tdv.append(wt @ ds.d[:6][t] / wt.sum() - wc @ ds.d[:6][c] / wc.sum())
    quad = sensitivity_quadruple(ds, w, g)
    np.testing.assert_allclose(quad, [min(ty), max(ty), min(tdv), max(tdv)], atol=1e-12)


def test_quadruple_collapses_and_widens(standard_trial):
    ds = standard_trial.dataset
    w, _ = weighted_setup(ds)
    th = weighted_components(ds, w)
    q1 = sensitivity_quadruple(ds, w, 1.0)
    np.testing.assert_allclose(q1, [th.tau_y, th.tau_y, th.tau_d, th.tau_d], atol=1e-12)
    prev = q1
    for g in DEFAULT_GRID[1:]:
        q = sensitivity_quadruple(ds, w, g)
        assert q[0] <= prev[0] and q[1] >= prev[1] and q[2] <= prev[2] and q[3] >= prev[3]
        assert q[0] <= q[1] and q[2] <= q[3]
        prev = q


def test_interval_examples():
    assert sensitivity_interval((1.0, 2.0, 0.5, 1.0)) == (1.0, 4.0)
    assert sensitivity_interval((0.6, 0.6, 0.3, 0.3)) == (2.0, 2.0)
    with pytest.raises(FirstStageSignViolation):
        sensitivity_interval((1.0, 2.0, 0.0, 1.0))


def test_interval_handles_negative_numerators():
    # every ratio y/d over the box lies inside the returned interval
    quad = (-1.0, 2.0, 0.5, 1.0)
    lo, hi = sensitivity_interval(quad)
    ys, ds = np.linspace(quad[0], quad[1], 31), np.linspace(quad[2], quad[3], 31)
    ratios = ys[:, None] / ds[None, :]
    assert lo == pytest.approx(ratios.min()) and hi == pytest.approx(ratios.max())


def test_interval_collapse_and_nesting(standard_trial):
    ds = standard_trial.dataset
    w, point = weighted_setup(ds)
    lo, hi = sensitivity_interval(sensitivity_quadruple(ds, w, 1.0))
    assert abs(lo - point) <= 1e-12 and abs(hi - point) <= 1e-12
    prev = (lo, hi)
    for g in np.linspace(1.0, 1.5, 51)[1:]:
        cur = sensitivity_interval(sensitivity_quadruple(ds, w, g))
        assert cur[0] <= prev[0] and cur[1] >= prev[1]
        prev = cur


def test_gamma_star_is_one_when_effect_is_zero():
    ds, _ = six_units()
    w = WeightSet.from_arrays(ds, np.ones(6), np.ones(6))
    y = ds.y.copy()
    y[3:6] = y[:3].mean() + np.array([0.3, -0.2, -0.1])
    flat = Dataset.from_arrays(ds.x[:, 1:], ds.s, ds.z, ds.d, y)
    assert abs(weighted_tcace(flat, w).point) < 1e-12
    assert gamma_star(flat, w) == 1.0


def test_gamma_star_matches_grid_scan(standard_trial):
    ds = standard_trial.dataset
    w, point = weighted_setup(ds)
    assert point > 0
    gs = gamma_star(ds, w)

    def contains(g):
        try:
            lo, hi = sensitivity_interval(sensitivity_quadruple(ds, w, g))
        except FirstStageSignViolation:
            return True
        return lo <= 0 <= hi

    assert gs > 1
    assert abs(gs - grid_gamma_star(contains)) <= 2e-3


def test_gamma_star_not_found(standard_trial):
    ds = standard_trial.dataset
    w, _ = weighted_setup(ds)
    with pytest.raises(NotFound):
        gamma_star(ds, w, SensitivityQuery(gamma_max=1.01))


def test_gamma_star_bootstrap_mode_is_wider(standard_trial):
    ds = standard_trial.dataset
    w, _ = weighted_setup(ds)
    q = SensitivityQuery(bootstrap_b=30, seed=2)
    boot = gamma_star(ds, w, q)
    assert 1.0 <= boot <= gamma_star(ds, w) + 1e-4
    assert gamma_star(ds, w, q) == boot


def test_query_validation():
    with pytest.raises(InputError):
        SensitivityQuery(gamma=0.9)
    with pytest.raises(InputError):
        SensitivityQuery(grid=(1.0, 1.2, 1.1))
    assert SensitivityQuery(grid=[1, 2]).grid == (1.0, 2.0)


def test_benchmark_zero_coefficient_covariate(rng):
    ds = strong_selection_dataset(rng, n=800)
    full = fit_selection_model(ds)
    # replace the last covariate by the part of a new draw orthogonal to the reduced-fit score
    reduced = ds.drop_covariate(ds.p - 1)
    red_fit = fit_selection_model(reduced)
    resid = ds.s - sigmoid(reduced.x @ red_fit.beta)
    noise = rng.normal(size=ds.total)
    basis = np.column_stack([reduced.x * 1.0, resid])
    noise -= basis @ np.linalg.lstsq(basis, noise, rcond=None)[0]
    x = ds.x.copy()
    x[:, -1] = noise
    ds2 = Dataset.from_arrays(x[:, 1:], ds.s, ds.z, ds.d, ds.y)
    full = fit_selection_model(ds2)
    assert abs(full.beta[-1]) < 1e-8
    assert benchmark_gamma_omission(ds2, full, ds2.p - 1) == pytest.approx(1.0, abs=1e-6)
    assert benchmark_all(ds2)[0]["omitted_covariate"] == ds2.covariate_names[-1]


def test_benchmark_strong_covariate_largest(rng):
    ds = strong_selection_dataset(rng)
    rows = benchmark_all(ds)
    assert rows[-1]["omitted_covariate"] == ds.covariate_names[0]
    assert [r["gamma_hat"] for r in rows] == sorted(r["gamma_hat"] for r in rows)
    assert all(r["gamma_hat"] >= 1.0 for r in rows)


def test_benchmark_subset_and_unknown(rng):
    ds = strong_selection_dataset(rng, n=600)
    names = ds.covariate_names[1:3]
    assert {r["omitted_covariate"] for r in benchmark_all(ds, names)} == set(names)
    with pytest.raises(InputError):
        benchmark_all(ds, ["nope"])


@pytest.mark.slow
def test_benchmark_kappa_point_seven():
    spec = ScenarioSpec(kind=ScenarioKind.SENSITIVITY, kappa=0.7, trials=200, seed=0)
    assert abs(run_sensitivity_study(spec, [1.0]).mean_gamma_hat - 1.26) <= 0.05


def test_report_structure_and_csv(standard_trial):
    ds = standard_trial.dataset
    w, point = weighted_setup(ds)
    rep = sensitivity_report(ds, w, SensitivityQuery(grid=(1.0, 1.1, 1.2)), benchmarks=True)
    assert rep.point_estimate == pytest.approx(point, abs=1e-12)
    assert [e["gamma"] for e in rep.per_gamma] == [1.0, 1.1, 1.2]
    assert rep.gamma_star_mode == "point" and rep.gamma_star > 1
    assert len(rep.benchmarks) == len(ds.covariate_names)
    rows = rep.csv_rows()
    assert rows[0] == ["gamma", "lo", "hi", "boot_lo", "boot_hi"] and len(rows) == 4
    assert rows[1][3] == ""
    assert '"per_gamma"' in rep.to_json()


def test_report_bootstrap_columns(standard_trial):
    ds = standard_trial.dataset
    w, _ = weighted_setup(ds)
    rep = sensitivity_report(ds, w, SensitivityQuery(grid=(1.0, 1.2), bootstrap_b=20, seed=9))
    assert rep.gamma_star_mode == "bootstrap"
    for e in rep.per_gamma:
        blo, bhi = e["bootstrap_ci"]
        assert blo <= e["interval"][0] + 1.0 and blo < bhi
    assert all(c != "" for c in rep.csv_rows()[1])


def test_report_records_undefined_bound():
    ds, w = six_units()
    d = ds.d.copy()
    d[:6] = [1, 0, 0, 1, 0, 0]
    weak = Dataset.from_arrays(ds.x[:, 1:], ds.s, ds.z, d, ds.y)
    rep = sensitivity_report(weak, w, SensitivityQuery(grid=(1.0, 3.0)))
    assert rep.per_gamma[1]["interval"] is None and "FirstStageSignViolation" in rep.per_gamma[1]["error"]
    assert math.isfinite(rep.per_gamma[0]["interval"][0])

