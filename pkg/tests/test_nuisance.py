"""Nuisance fitting: fold plumbing, per-site models, accessor behavior."""

import numpy as np
import pytest

from sitetransport.data import spec_for_dataset
from sitetransport.errors import EmptySite, InvalidFoldCount, NoExposedRecordsInSite
from sitetransport.learners import LearnerSpec, fit_binary_regressor
from sitetransport.nuisance import (
    FoldAssignment,
    fit_nuisance_set,
    make_folds,
    single_fold,
)
from sitetransport.simulation import (
    DGPConfig,
    dgp_sample,
    mediator_prob,
    oracle_nuisances,
    outcome_prob,
    site_probabilities,
)

CFG = DGPConfig()


def test_make_folds_partition():
    folds = make_folds(103, 4, seed=9)
    assert folds.n_folds == 4
    all_rows = np.concatenate([folds.validation_rows(q) for q in range(1, 5)])
    assert sorted(all_rows.tolist()) == list(range(103))
    sizes = [folds.validation_rows(q).size for q in range(1, 5)]
    assert max(sizes) - min(sizes) <= 1
    # training mask excludes exactly the fold's own rows
    for q in range(1, 5):
        mask = folds.training_mask(q)
        assert not mask[folds.validation_rows(q)].any()
        assert mask.sum() == 103 - folds.validation_rows(q).size


def test_make_folds_bounds():
    with pytest.raises(InvalidFoldCount):
        make_folds(10, 1)
    with pytest.raises(InvalidFoldCount):
        make_folds(3, 4)


def test_single_fold_trains_on_everything():
    folds = single_fold(5)
    assert folds.training_mask(1).all()
    assert folds.validation_rows(1).tolist() == [0, 1, 2, 3, 4]


def test_fold_assignment_label_validation():
    with pytest.raises(InvalidFoldCount):
        FoldAssignment(n_folds=2, fold_of=np.array([1, 3, 1]))


def test_outcome_model_is_per_site_fit():
    """The first-stage accessor must equal a direct fit on that site's rows."""
    ds = dgp_sample(1500, CFG, seed=11)
    spec = spec_for_dataset(ds)
    learner = LearnerSpec("logistic_with_interactions")
    nuis = fit_nuisance_set(ds, spec, learner=learner)

    k = 3
    mask = ds.site_mask(k)
    feats = np.column_stack([ds.exposure[mask], ds.mediator[mask], ds.covariates[mask]])
    direct = fit_binary_regressor(feats, ds.outcome[mask], learner)
    xcol = np.ones(ds.n_records)
    m_filled = np.nan_to_num(ds.mediator, nan=0.0)
    eval_feats = np.column_stack([xcol, m_filled, ds.covariates])
    expected = direct.predict_proba(eval_feats)[:, 1]
    assert np.allclose(nuis.outcome_mean(1, k), expected, atol=1e-12)


def test_accessors_near_truth_at_moderate_n():
    ds = dgp_sample(20000, CFG, seed=2)
    spec = spec_for_dataset(ds)
    nuis = fit_nuisance_set(ds, spec)
    oracle = oracle_nuisances(ds, CFG)
    # outcome model: the interaction learner can express the per-site truth
    for k in (2, 5):
        err = np.max(np.abs(nuis.outcome_mean(1, k) - oracle.outcome_mean(1, k)))
        assert err < 0.06, f"site {k} outcome fit off by {err}"
    err_t = np.max(np.abs(nuis.exposure_prob(1, 3) - oracle.exposure_prob(1, 3)))
    assert err_t < 0.04
    # renormalized site-membership ratios track the closed form
    r_hat = nuis.site_given_covariates(1) / nuis.site_given_covariates(4)
    r_true = oracle.site_given_covariates(1) / oracle.site_given_covariates(4)
    assert np.max(np.abs(r_hat - r_true)) < 0.25


def test_second_stage_recovers_known_first_stage():
    """With an oracle first stage, the second stage should approximate the
    integral of the outcome mean over the mediator law of site p."""
    ds = dgp_sample(30000, CFG, seed=8)
    spec = spec_for_dataset(ds)

    def stage_one(x, m, cov, site):
        return outcome_prob(CFG, x, m, cov[:, 0], cov[:, 1], site)

    nuis = fit_nuisance_set(ds, spec, outcome_oracle=stage_one)
    x, k, p = 1, 4, 2
    l1 = ds.covariates[:, 0]
    l2 = ds.covariates[:, 1]
    # the second stage trains on rows with X=x, so it targets the
    # x-conditional mediator law of site p integrated against the site-k mean
    pm1 = np.asarray(mediator_prob(CFG, x, l1, l2, p))
    truth_x = pm1 * outcome_prob(CFG, x, 1, l1, l2, k) + (1 - pm1) * outcome_prob(
        CFG, x, 0, l1, l2, k
    )
    est = nuis.averaged_outcome(x, k, p)
    assert np.max(np.abs(est - truth_x)) < 0.03


def test_truncation_clips_on_access_only():
    ds = dgp_sample(800, CFG, seed=3)
    spec = spec_for_dataset(ds)
    nuis = fit_nuisance_set(ds, spec, truncation=0.4)
    clipped = nuis.site_given_covariates(1)
    assert clipped.min() >= 0.4 - 1e-12 and clipped.max() <= 0.6 + 1e-12
    raw = nuis.site_given_covariates(1, raw=True)
    assert raw.min() < 0.4  # the underlying fit is not degraded


def test_accessor_cache_returns_same_array():
    ds = dgp_sample(500, CFG, seed=4)
    spec = spec_for_dataset(ds)
    nuis = fit_nuisance_set(ds, spec)
    a1 = nuis.outcome_mean(1, 2)
    a2 = nuis.outcome_mean(1, 2)
    assert a1 is a2
    assert not a1.flags.writeable


def test_crossfit_routes_by_fold():
    ds = dgp_sample(1200, CFG, seed=6)
    spec = spec_for_dataset(ds)
    folds = make_folds(ds.n_records, 3, seed=0)
    nuis = fit_nuisance_set(ds, spec, folds=folds)
    plain = fit_nuisance_set(ds, spec)
    a_cf = nuis.outcome_mean(1, 2)
    a_plain = plain.outcome_mean(1, 2)
    assert a_cf.shape == a_plain.shape
    assert np.all(np.isfinite(a_cf))
    # fold-routed predictions come from different training data, so they
    # cannot coincide everywhere with the full-data fit
    assert not np.allclose(a_cf, a_plain)


def test_fold_count_must_match_dataset():
    ds = dgp_sample(100, CFG, seed=0)
    with pytest.raises(InvalidFoldCount):
        fit_nuisance_set(ds, spec_for_dataset(ds), folds=single_fold(99))


def test_empty_site_in_fold():
    ds = dgp_sample(60, CFG, seed=1)
    # a fold that hides every record of one source site from training
    some_site = 2
    fold_of = np.ones(ds.n_records, dtype=np.int64)
    fold_of[ds.site_mask(some_site)] = 2
    folds = FoldAssignment(n_folds=2, fold_of=fold_of)
    with pytest.raises((EmptySite, NoExposedRecordsInSite)):
        fit_nuisance_set(ds, spec_for_dataset(ds), folds=folds)


def test_site_share_is_empirical():
    ds = dgp_sample(400, CFG, seed=5)
    nuis = fit_nuisance_set(ds, spec_for_dataset(ds))
    assert nuis.site_share(1) == ds.site_counts[1] / 400
    total = sum(nuis.site_share(s) for s in ds.site_labels)
    assert total == pytest.approx(1.0, abs=1e-12)


def test_site_probabilities_sum_to_one():
    grid = site_probabilities(CFG, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.allclose(grid.sum(axis=-1), 1.0)
