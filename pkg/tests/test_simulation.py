"""Synthetic data generator, closed-form truths, and the oracle nuisances."""

import numpy as np
import pytest

from sitetransport.simulation import (
    SCENARIOS,
    DGPConfig,
    OracleNuisanceSet,
    covariate_cells,
    default_estimand,
    dgp_sample,
    enumeration_dataset,
    mc_counterfactual_risk,
    mediator_prob,
    oracle_log_rr,
    oracle_log_rr_matrix,
    oracle_nuisances,
    oracle_risk,
    outcome_prob,
    scenario_nuisances,
    site_marginal,
    site_probabilities,
    target_covariate_law,
)

CFG = DGPConfig()

# regression freezes of the exact oracle under the default configuration
RISK_1_2_3 = 0.41638474455802443
RISK_0_2_3 = 0.5328353533517096
LOGRR_DIAG = {
    1: -0.014551605279096713,
    2: -0.24660277135162734,
    3: -0.014551605279096713,
    4: -0.24660277135162734,
    5: -0.25218554249082303,
}


def test_probability_laws_are_coherent():
    for l1 in (0.0, 1.0):
        for l2 in (0.0, 1.0):
            probs = site_probabilities(CFG, l1, l2)
            assert probs.shape[-1] == 5
            assert np.all(probs > 0)
            assert np.sum(probs) == pytest.approx(1.0, abs=1e-12)
    assert sum(site_marginal(CFG, s) for s in CFG.sites) == pytest.approx(1.0, abs=1e-12)
    law = target_covariate_law(CFG)
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
    assert sum(w for _, w in covariate_cells(CFG)) == pytest.approx(1.0, abs=1e-12)


def test_mediator_law_ignores_site():
    for x in (0, 1):
        base = mediator_prob(CFG, x, 1.0, 0.0, 2)
        for s in (3, 4, 5):
            assert mediator_prob(CFG, x, 1.0, 0.0, s) == base


def test_outcome_site_terms():
    # shifted sites move the outcome law, synergy sites bend the x*l1 term
    assert outcome_prob(CFG, 1, 1, 1.0, 0.0, 2) != outcome_prob(CFG, 1, 1, 1.0, 0.0, 5)
    assert outcome_prob(CFG, 1, 1, 1.0, 0.0, 3) != outcome_prob(CFG, 1, 1, 1.0, 0.0, 5)
    plain = CFG.without_site_terms()
    vals = {outcome_prob(plain, 1, 1, 1.0, 0.0, s) for s in plain.sites}
    assert len(vals) == 1


def test_frozen_oracle_values():
    assert oracle_risk(CFG, 1, 2, 3) == pytest.approx(RISK_1_2_3, abs=1e-14)
    assert oracle_risk(CFG, 0, 2, 3) == pytest.approx(RISK_0_2_3, abs=1e-14)
    for k, val in LOGRR_DIAG.items():
        assert oracle_log_rr(CFG, k, k) == pytest.approx(val, abs=1e-14)
    # mediator columns are interchangeable because the mediator law is shared
    assert oracle_log_rr(CFG, 2, 3) == oracle_log_rr(CFG, 2, 2)


def test_oracle_matrix_layout():
    mat = oracle_log_rr_matrix(CFG)
    assert mat.shape == (4, 4)
    for j in range(1, 4):
        assert np.array_equal(mat[:, j], mat[:, 0])
    full = oracle_log_rr_matrix(CFG, CFG.sites, CFG.sites)
    assert full.shape == (5, 5)
    assert full[1, 2] == mat[0, 1]


def test_monte_carlo_agrees_with_exact_sum():
    est, se = mc_counterfactual_risk(CFG, 1, 2, 3, n_draws=400_000, seed=5)
    assert abs(est - RISK_1_2_3) < 4 * se
    est0, se0 = mc_counterfactual_risk(CFG, 0, 2, 3, n_draws=400_000, seed=6)
    assert abs(est0 - RISK_0_2_3) < 4 * se0


def test_dgp_sample_masks_target_only():
    ds = dgp_sample(3000, CFG, seed=42)
    assert ds.n_records == 3000
    target_rows = ds.site_mask(1)
    assert target_rows.sum() > 0
    for arr in (ds.exposure, ds.mediator, ds.outcome):
        assert np.isnan(arr[target_rows]).all()
        assert not np.isnan(arr[~target_rows]).any()
    assert not np.isnan(ds.covariates).any()
    assert set(np.unique(ds.site_index)) <= set(range(5))
    assert ds.site_labels == (1, 2, 3, 4, 5)


def test_dgp_sample_deterministic():
    a = dgp_sample(500, CFG, seed=7)
    b = dgp_sample(500, CFG, seed=7)
    assert a == b
    c = dgp_sample(500, CFG, seed=8)
    assert not (a == c)


def test_default_estimand():
    spec = default_estimand(CFG)
    assert spec.target == 1
    assert spec.mediator_sources == (2, 3, 4, 5)
    assert spec.outcome_sources == (2, 3, 4, 5)


def test_enumeration_dataset_is_exact():
    ds, w = enumeration_dataset(CFG)
    # 4 covariate cells x (1 masked target row + 4 sources x 2x x 2m x 2y)
    assert ds.n_records == 4 * (1 + 4 * 8)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w > 0)
    masked = ds.site_mask(1)
    assert masked.sum() == 4
    assert np.isnan(ds.exposure[masked]).all()
    # weighted target share reproduces the closed-form marginal
    assert w[masked].sum() == pytest.approx(site_marginal(CFG, 1), abs=1e-12)


def test_oracle_nuisance_identities():
    ds, w = enumeration_dataset(CFG)
    nuis = oracle_nuisances(ds, CFG, record_weights=w)
    stack = np.stack([nuis.site_given_covariates(s, raw=True) for s in CFG.sites])
    assert np.allclose(stack.sum(axis=0), 1.0, atol=1e-12)
    # shared mediator law collapses membership-given-mediator to membership
    for s in CFG.sites:
        assert np.allclose(
            nuis.site_given_mediator(s, raw=True),
            nuis.site_given_covariates(s, raw=True),
            atol=1e-12,
        )
    for s in CFG.sites:
        assert nuis.site_share(s) == pytest.approx(site_marginal(CFG, s), abs=1e-12)
    # exposure is randomized given covariates alone
    assert np.allclose(nuis.exposure_prob(1, 3, raw=True), CFG.exposure_prob, atol=1e-12)
    # but not given the mediator; check against exact conditionals built from
    # the enumeration weights, an independent route to the same quantity
    got = nuis.exposure_given_mediator(1, 3, raw=True)
    rows = ds.site_mask(3)
    for i in np.flatnonzero(rows):
        cell = (
            (ds.mediator == ds.mediator[i])
            & (ds.covariates[:, 0] == ds.covariates[i, 0])
            & (ds.covariates[:, 1] == ds.covariates[i, 1])
            & rows
        )
        exact = w[cell & (ds.exposure == 1.0)].sum() / w[cell].sum()
        assert got[i] == pytest.approx(exact, abs=1e-12)
    # truncation is applied on access unless raw
    tight = OracleNuisanceSet(ds, CFG, truncation=0.4)
    assert np.all(tight.site_given_covariates(2) >= 0.4)
    assert np.any(tight.site_given_covariates(2, raw=True) < 0.4)


def test_empirical_site_share_switch():
    ds = dgp_sample(400, CFG, seed=3)
    emp = OracleNuisanceSet(ds, CFG, empirical_site_share=True)
    for s in CFG.sites:
        assert emp.site_share(s) == ds.site_counts[s] / ds.n_records


def test_averaged_outcome_matches_manual_integral():
    ds = dgp_sample(200, CFG, seed=1)
    nuis = oracle_nuisances(ds, CFG)
    got = nuis.averaged_outcome(1, 2, 3)
    l1, l2 = ds.covariates[:, 0], ds.covariates[:, 1]
    pm = mediator_prob(CFG, 1, l1, l2, 3)
    manual = pm * outcome_prob(CFG, 1, 1.0, l1, l2, 2) + (1 - pm) * outcome_prob(
        CFG, 1, 0.0, l1, l2, 2
    )
    assert np.allclose(got, manual, atol=1e-14)


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_scenario_wiring(scenario):
    ds = dgp_sample(600, CFG, seed=11)
    truth = OracleNuisanceSet(ds, CFG, empirical_site_share=True)
    got = scenario_nuisances(ds, CFG, scenario)
    probes = {
        "outcome_mean": lambda n: n.outcome_mean(1, 2),
        "averaged_outcome": lambda n: n.averaged_outcome(1, 2, 3),
        "exposure_given_mediator": lambda n: n.exposure_given_mediator(1, 3, raw=True),
        "site_given_mediator": lambda n: n.site_given_mediator(3, raw=True),
        "site_given_covariates": lambda n: n.site_given_covariates(3, raw=True),
        "exposure_prob": lambda n: n.exposure_prob(1, 3, raw=True),
    }
    wrong = {
        "all_correct": set(),
        "wrong_weights": {
            "exposure_given_mediator",
            "site_given_mediator",
            "site_given_covariates",
            "exposure_prob",
        },
        "wrong_outcomes": {"outcome_mean", "averaged_outcome"},
        "wrong_ratios": {
            "exposure_given_mediator",
            "site_given_mediator",
            "averaged_outcome",
        },
    }[scenario]
    for name, probe in probes.items():
        same = np.allclose(probe(truth), probe(got), atol=1e-12)
        assert same == (name not in wrong), name
    assert got.site_share(2) == truth.site_share(2)


def test_scenario_rejects_unknown_name():
    ds = dgp_sample(50, CFG, seed=0)
    with pytest.raises(ValueError):
        scenario_nuisances(ds, CFG, "everything_wrong")
