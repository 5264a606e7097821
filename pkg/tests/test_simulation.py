import math

import numpy as np
import pytest

from tcace.data import Dataset
from tcace.errors import ConfigError, NoTargetCompliers
from tcace.inference import stream
from tcace.simulation import (
    ALWAYS_TAKER,
    COMPLIER,
    NEVER_TAKER,
    PURPOSE_COEF,
    PURPOSE_DATA,
    ScenarioKind,
    ScenarioSpec,
    SyntheticTrial,
    _coefficients,
    _population,
    gen_trial,
    oracle_tcace,
    parse_grid,
    population_tcace,
    read_config,
    run_sensitivity_study,
    run_study,
    spec_from_mapping,
)


def test_zero_coefficients_give_fixed_shares():
    spec = ScenarioSpec(n_total=200)
    pop = _population(spec, {"beta": np.zeros((2, spec.dim_x + 1))}, 200, stream(1, 0))
    np.testing.assert_allclose(pop["p_complier"], 0.6, rtol=0, atol=1e-15)
    np.testing.assert_allclose(pop["p_never"], 0.2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(pop["p_always"], 0.2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", list(ScenarioKind))
def test_type_probabilities_and_no_defiers(kind):
    spec = ScenarioSpec(kind=kind, n_total=3000, seed=4)
    trial = gen_trial(spec, 0)
    lat = trial.latent
    ct, d1, d0 = lat["compliance_type"], lat["d1"], lat["d0"]
    assert not np.any((d1 == 0) & (d0 == 1))
    assert np.all(d1[ct == COMPLIER] == 1) and np.all(d0[ct == COMPLIER] == 0)
    assert np.all(d1[ct == NEVER_TAKER] == 0) and np.all(d0[ct == NEVER_TAKER] == 0)
    assert np.all(d1[ct == ALWAYS_TAKER] == 1) and np.all(d0[ct == ALWAYS_TAKER] == 1)
    coef = _coefficients(spec, stream(spec.seed, 0, PURPOSE_COEF))
    pop = _population(spec, coef, spec.n_total, stream(spec.seed, 0, PURPOSE_DATA, trial.redraws))
    total = pop["p_complier"] + pop["p_never"] + pop["p_always"]
    assert np.max(np.abs(total - 1.0)) <= 4 * np.finfo(float).eps


@pytest.mark.parametrize("kind", list(ScenarioKind))
def test_observed_data_follow_potential_outcomes(kind):
    spec = ScenarioSpec(kind=kind, n_total=2000, seed=5, lam=0.5)
    trial = gen_trial(spec, 1)
    ds, lat = trial.dataset, trial.latent
    st = ds.study
    z = ds.z[st]
    np.testing.assert_array_equal(ds.d[st], np.where(z == 1, lat["d1"][st], lat["d0"][st]))
    np.testing.assert_array_equal(ds.y[st], np.where(z == 1, lat["y1"][st], lat["y0"][st]))
    assert np.all(np.isnan(ds.y[~st]))


def test_standard_outcome_construction():
    spec = ScenarioSpec(n_total=1000, seed=2, noise_sd=0.0)
    trial = gen_trial(spec, 0)
    x = trial.dataset.x[:, 1:]
    sx = x.sum(axis=1)
    lat = trial.latent
    comp = lat["compliance_type"] == COMPLIER
    np.testing.assert_allclose(lat["y1"][comp], 2 + 2 * sx[comp], atol=1e-12)
    np.testing.assert_allclose(lat["y0"][comp], sx[comp], atol=1e-12)
    treated = trial.dataset.study & comp & (trial.dataset.z == 1)
    assert np.all(trial.dataset.d[treated] == 1)
    assert np.all((x >= -0.3) & (x <= 0.5))


def test_exclusion_shift_enters_treated_outcome():
    base = gen_trial(ScenarioSpec(kind=ScenarioKind.EXCLUSION, lam=0.0, n_total=800, seed=3), 0)
    shifted = gen_trial(ScenarioSpec(kind=ScenarioKind.EXCLUSION, lam=0.5, n_total=800, seed=3), 0)
    np.testing.assert_allclose(shifted.latent["y1"] - base.latent["y1"], 0.5, atol=1e-12)
    np.testing.assert_array_equal(shifted.latent["y0"], base.latent["y0"])
    assert shifted.truth == pytest.approx(base.truth + 0.5, abs=1e-12)


def test_study_share_near_071():
    shares = [gen_trial(ScenarioSpec(n_total=5000, seed=8), t).dataset.n / 5000 for t in range(20)]
    assert all(abs(s - 0.71) <= 0.03 for s in shares)


def test_observational_assignment_depends_on_covariates():
    spec = ScenarioSpec(kind=ScenarioKind.OBSERVATIONAL, n_total=20000, trials=1, seed=1)
    trial = gen_trial(spec, 0)
    x = trial.dataset.x[:, 1:]
    zf = trial.latent["z_full"]
    high = x[:, :5].sum(axis=1) > 0.5
    assert zf[high].mean() > zf[~high].mean()
    assert spec.known_treatment_prob is None
    with pytest.raises(ConfigError):
        ScenarioSpec(kind=ScenarioKind.OBSERVATIONAL, dim_x=3)


def test_truth_is_mean_over_target_compliers():
    trial = gen_trial(ScenarioSpec(n_total=3000, seed=6), 0)
    lat = trial.latent
    rows = (trial.dataset.s == 0) & (lat["compliance_type"] == COMPLIER)
    assert oracle_tcace(trial) == trial.truth == pytest.approx(np.mean(lat["y1"][rows] - lat["y0"][rows]))


def test_truth_all_compliers_flat_covariates():
    n = 6
    ds = Dataset.from_arrays(np.zeros((n, 1)), [1, 1, 1, 1, 0, 0], [1, 0, 1, 0, np.nan, np.nan],
                             [1, 0, 1, 0, np.nan, np.nan], [2, 0, 2, 0, np.nan, np.nan])
    lat = {"compliance_type": np.full(n, COMPLIER), "y1": np.full(n, 2.0), "y0": np.zeros(n)}
    assert oracle_tcace(SyntheticTrial(ds, lat, None)) == 2.0


def test_no_target_compliers():
    ds = Dataset.from_arrays(np.zeros((4, 1)), [1, 1, 0, 0], [1, 0, np.nan, np.nan],
                             [1, 0, np.nan, np.nan], [1, 0, np.nan, np.nan])
    lat = {"compliance_type": np.array([COMPLIER, COMPLIER, NEVER_TAKER, ALWAYS_TAKER]),
           "y1": np.ones(4), "y0": np.zeros(4)}
    with pytest.raises(NoTargetCompliers):
        oracle_tcace(SyntheticTrial(ds, lat, None))


def test_truth_agrees_with_large_monte_carlo():
    spec = ScenarioSpec(n_total=5000, seed=12)
    trial = gen_trial(spec, 0)
    lat = trial.latent
    rows = (trial.dataset.s == 0) & (lat["compliance_type"] == COMPLIER)
    diff = lat["y1"][rows] - lat["y0"][rows]
    se = diff.std(ddof=1) / math.sqrt(diff.size)
    assert abs(trial.truth - population_tcace(spec, 0)) <= 4 * se


def test_gen_trial_deterministic():
    spec = ScenarioSpec(n_total=500, seed=77)
    a, b = gen_trial(spec, 3), gen_trial(spec, 3)
    assert a.dataset.x.tobytes() == b.dataset.x.tobytes() and a.truth == b.truth
    assert gen_trial(spec, 4).dataset.x.tobytes() != a.dataset.x.tobytes()


def test_degenerate_draws_are_redrawn():
    spec = ScenarioSpec(n_total=12, dim_x=2, seed=0)
    counts = [gen_trial(spec, t).redraws for t in range(30)]
    assert max(counts) > 0
    assert all(gen_trial(spec, t).dataset.n >= 2 for t in range(30))


def test_study_table_is_thread_invariant():
    spec = ScenarioSpec(n_total=800, trials=6, seed=21, bootstrap_b=10)
    one = run_study(spec, threads=1)
    many = run_study(spec, threads=4)
    assert one.to_csv() == many.to_csv()
    assert one.to_json() == many.to_json()
    for name in spec.estimators:
        row = one.row(name)
        assert 0.0 <= row.coverage_pct <= 100.0
    text = one.to_text()
    assert "Weighted" in text and "WLS" in text


def test_sensitivity_coverage_monotone_in_gamma():
    spec = ScenarioSpec(kind=ScenarioKind.SENSITIVITY, trials=40, seed=3)
    study = run_sensitivity_study(spec, [1.0, 1.06, 1.11, 1.16, 1.26, 1.5])
    assert all(a <= b for a, b in zip(study.coverage_pct, study.coverage_pct[1:]))
    assert study.gamma_true == pytest.approx(math.exp(0.06))
    assert study.coverage(1.11) == study.coverage_pct[2]
    assert np.all(study.gamma_hats >= 1.0)


def test_sensitivity_study_requires_kind():
    with pytest.raises(ConfigError):
        run_sensitivity_study(ScenarioSpec(trials=1))


def test_parse_grid():
    grid = parse_grid("1:2:0.05")
    assert len(grid) == 21 and grid[0] == 1.0 and grid[-1] == 2.0 and grid[1] == 1.05
    assert parse_grid("1.06, 1.11") == (1.06, 1.11)
    for bad in ("1:2", "2:1:0.1", "1:2:0", "a,b"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_spec_from_mapping_and_errors():
    spec = spec_from_mapping({"kind": "exclusion", "lambda": "0.5", "big_n": "3000", "estimators": "weighted, wls"})
    assert spec.kind is ScenarioKind.EXCLUSION and spec.lam == 0.5 and spec.n_total == 3000
    assert spec.estimators == ("weighted", "wls")
    with pytest.raises(ConfigError):
        spec_from_mapping({"kind": "nonsense"})
    with pytest.raises(ConfigError):
        spec_from_mapping({"trials": "many"})
    with pytest.raises(ConfigError):
        spec_from_mapping({"colour": "red"})
    with pytest.raises(ConfigError):
        ScenarioSpec(trials=0)


def test_sensitivity_defaults():
    spec = ScenarioSpec(kind="sensitivity")
    assert spec.n_total == 1500 and spec.dim_x == 5 and spec.selection_intercept == 1.55


def test_read_config(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("[scenario a]\nkind = standard\ntrials = 3\n\n[scenario b]\nkind = sensitivity\nkappa = 0.7\n")
    specs = read_config(path)
    assert [s.kind for s in specs] == [ScenarioKind.STANDARD, ScenarioKind.SENSITIVITY]
    assert specs[1].kappa == 0.7
    (tmp_path / "empty.cfg").write_text("[other]\nx = 1\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "empty.cfg")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "missing.cfg")


def test_bundled_configs_parse():
    from importlib import resources

    files = sorted(p.name for p in resources.files("tcace.configs").iterdir() if p.name.endswith(".cfg"))
    assert len(files) == 4
    for name in files:
        with resources.as_file(resources.files("tcace.configs") / name) as path:
            (spec,) = read_config(path)
            assert spec.trials == 200
