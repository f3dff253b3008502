"""Risk estimators, the influence function, the grid, and its serialization."""

import json

import numpy as np
import pytest

from sitetransport import (
    TransportEffects,
    dataset_from_arrays,
    eif_evaluate,
    gcomp_risk,
    grid_from_json_dict,
    log_rr,
    onestep_risk,
    transport_grid,
    weighting_regression_risk,
    weighting_risk,
    write_grid_csv,
    write_grid_json,
)
from sitetransport.data import spec_for_dataset
from sitetransport.errors import IncompleteGrid, NonPositiveRisk
from sitetransport.estimators import METHODS, _RISK_FN
from sitetransport.nuisance import fit_nuisance_set
from sitetransport.simulation import (
    DGPConfig,
    default_estimand,
    dgp_sample,
    enumeration_dataset,
    oracle_log_rr,
    oracle_nuisances,
    oracle_risk,
)

CFG = DGPConfig()


@pytest.fixture(scope="module")
def population():
    ds, weights = enumeration_dataset(CFG)
    spec = default_estimand(CFG)
    nuis = oracle_nuisances(ds, CFG, record_weights=weights)
    return ds, weights, spec, nuis


def test_population_equivalence_of_all_methods(population):
    """At the population (enumeration weights) with true nuisances, the four
    estimating strategies agree with the exact risk."""
    ds, weights, spec, nuis = population
    for x in (0, 1):
        for k in (2, 3):
            for p in (4, 5):
                truth = oracle_risk(CFG, x, k, p)
                for method in METHODS:
                    est = _RISK_FN[method](
                        ds, spec, nuis, x, k, p, record_weights=weights
                    )
                    assert est.value == pytest.approx(truth, abs=1e-12), (
                        method,
                        x,
                        k,
                        p,
                    )


def test_eif_population_mean_zero(population):
    ds, weights, spec, nuis = population
    theta = oracle_risk(CFG, 1, 2, 3)
    eif = eif_evaluate(ds, spec, nuis, 1, 2, 3, theta)
    w = weights / weights.sum()
    assert abs(float(np.sum(w * eif))) < 1e-14


def test_onestep_matches_oracle_log_rr(population):
    ds, weights, spec, nuis = population
    exposed = onestep_risk(ds, spec, nuis, 1, 5, 2, record_weights=weights)
    unexposed = onestep_risk(ds, spec, nuis, 0, 5, 2, record_weights=weights)
    cell = log_rr(exposed, unexposed, record_weights=weights)
    assert cell.value == pytest.approx(oracle_log_rr(CFG, 5, 2), abs=1e-12)


def test_log_rr_input_validation(population):
    ds, weights, spec, nuis = population
    e1 = gcomp_risk(ds, spec, nuis, 1, 2, 3, record_weights=weights)
    e0 = gcomp_risk(ds, spec, nuis, 0, 2, 3, record_weights=weights)
    with pytest.raises(ValueError):
        log_rr(e0, e1)  # arms swapped
    other = gcomp_risk(ds, spec, nuis, 0, 2, 4, record_weights=weights)
    with pytest.raises(ValueError):
        log_rr(e1, other)  # different mediator site


def test_log_rr_nonpositive_risk():
    from sitetransport.estimators import RiskEstimate

    e1 = RiskEstimate(0.0, 1, 1, 2, 3, "gcomp")
    e0 = RiskEstimate(0.5, 0, 1, 2, 3, "gcomp")
    with pytest.raises(NonPositiveRisk):
        log_rr(e1, e0)
    clamped = log_rr(e1, e0, clamp=True)
    assert np.isfinite(clamped.value)


def test_record_weight_validation(population):
    ds, _, spec, nuis = population
    with pytest.raises(ValueError):
        gcomp_risk(ds, spec, nuis, 1, 2, 3, record_weights=np.ones(3))
    bad = np.ones(ds.n_records)
    bad[0] = -1.0
    with pytest.raises(ValueError):
        gcomp_risk(ds, spec, nuis, 1, 2, 3, record_weights=bad)


@pytest.fixture(scope="module")
def sampled_grid():
    ds = dgp_sample(4000, CFG, seed=12)
    spec = spec_for_dataset(ds)
    nuis = fit_nuisance_set(ds, spec)
    return ds, spec, nuis, transport_grid(ds, spec, nuis, method="onestep")


def test_grid_shape_and_completeness(sampled_grid):
    ds, spec, nuis, grid = sampled_grid
    assert grid.is_complete
    assert grid.outcome_sites == (2, 3, 4, 5)
    assert grid.mediator_sites == (2, 3, 4, 5)
    assert len(grid.cell_order()) == 16
    lam = grid.log_rr_matrix()
    assert lam.shape == (4, 4) and np.all(np.isfinite(lam))


def test_covariance_diagonal_equals_cell_se(sampled_grid):
    _, _, _, grid = sampled_grid
    order = grid.cell_order()
    for i, key in enumerate(order):
        assert grid.cells[key].se == pytest.approx(
            float(np.sqrt(grid.covariance[i, i])), abs=0.0
        )
    # symmetric PSD
    assert np.allclose(grid.covariance, grid.covariance.T)
    eigvals = np.linalg.eigvalsh(grid.covariance)
    assert eigvals.min() > -1e-15 * max(1.0, eigvals.max())


def test_onestep_se_matches_eif_variance(sampled_grid):
    ds, spec, nuis, grid = sampled_grid
    est = onestep_risk(ds, spec, nuis, 1, 2, 2)
    manual = float(np.sqrt(np.var(est.eif_values, ddof=1) / ds.n_records))
    assert est.se == pytest.approx(manual, rel=1e-12)


def test_grid_json_round_trip(tmp_path, sampled_grid):
    _, _, _, grid = sampled_grid
    path = tmp_path / "grid.json"
    write_grid_json(grid, path)
    with open(path) as fh:
        back = grid_from_json_dict(json.load(fh))
    assert back.outcome_sites == grid.outcome_sites
    assert back.mediator_sites == grid.mediator_sites
    assert np.array_equal(back.log_rr_matrix(), grid.log_rr_matrix())
    assert np.array_equal(back.se_matrix(), grid.se_matrix())
    assert np.array_equal(back.covariance, grid.covariance)
    assert back.site_counts[2] == grid.site_counts[2]


def test_grid_csv_has_all_cells(tmp_path, sampled_grid):
    _, _, _, grid = sampled_grid
    path = tmp_path / "grid.csv"
    write_grid_csv(grid, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 1 + 16
    assert lines[0].startswith("outcome_site,mediator_site,log_rr")


def test_grid_failure_paths(sampled_grid):
    ds, spec, nuis, _ = sampled_grid

    class ZeroRisk:
        """Nuisance stand-in driving every risk to zero."""

        def __getattr__(self, name):
            if name == "site_share":
                return lambda s: ds.site_counts[s] / ds.n_records
            if name in ("averaged_outcome", "outcome_mean"):
                return lambda *a, **k: np.zeros(ds.n_records)
            return lambda *a, **k: np.full(ds.n_records, 0.5)

    grid = transport_grid(ds, spec, ZeroRisk(), method="gcomp")
    assert not grid.is_complete
    assert len(grid.failures) == 16
    with pytest.raises(IncompleteGrid):
        grid.require_complete()
    assert np.isnan(grid.log_rr_matrix()).all()


def test_size_weights(sampled_grid):
    _, _, _, grid = sampled_grid
    wk, wp = grid.size_weights()
    assert wk.sum() == pytest.approx(1.0)
    counts = np.array([grid.site_counts[k] for k in grid.outcome_sites], float)
    assert np.allclose(wk, counts / counts.sum())


def test_methods_agree_in_probability(sampled_grid):
    """On a real sample the four strategies should land near one another and
    near the truth (loose sanity bound, not a statement of efficiency)."""
    ds, spec, nuis, _ = sampled_grid
    truth = oracle_log_rr(CFG, 4, 3)
    values = {}
    for method in METHODS:
        e1 = _RISK_FN[method](ds, spec, nuis, 1, 4, 3)
        e0 = _RISK_FN[method](ds, spec, nuis, 0, 4, 3)
        values[method] = log_rr(e1, e0).value
    for method, v in values.items():
        assert abs(v - truth) < 0.25, (method, v, truth)


def test_transport_effects_facade():
    ds = dgp_sample(1500, CFG, seed=21)
    est = TransportEffects(estimator="onestep", learner="interactions")
    est.fit(ds)
    lam = est.log_rr_matrix()
    assert lam.shape == (4, 4)
    params = est.get_params()
    assert params["estimator"] == "onestep"
    est2 = TransportEffects(**params)
    assert est2.get_params() == params


def test_transport_effects_requires_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        TransportEffects().log_rr_matrix()


def test_no_target_records():
    from sitetransport.errors import NoTargetRecords

    nan = np.nan
    ds = dataset_from_arrays(
        site=[1, 2, 2, 3, 3],
        covariates=np.array([[0, 0], [0, 1], [1, 0], [0, 0], [1, 1]], dtype=float),
        exposure=[nan, 1, 0, 1, 0],
        mediator=[nan, 1, 0, 0, 1],
        outcome=[nan, 1, 0, 1, 0],
        target=1,
    )
    spec = spec_for_dataset(ds)
    nuis = oracle_nuisances(ds, DGPConfig())
    weights = np.ones(5)
    weights[0] = 0.0  # target carries no mass
    with pytest.raises(NoTargetRecords):
        gcomp_risk(ds, spec, nuis, 1, 2, 3, record_weights=weights)
