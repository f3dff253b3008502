"""IRLS learners, the discrete super learner, and learner-spec parsing."""

import numpy as np
import pytest
from scipy.special import expit
from sklearn.exceptions import NotFittedError

from sitetransport.errors import EmptyInput, InvalidFoldCount, SeparationDetected
from sitetransport.learners import (
    DiscreteSuperLearner,
    InterceptOnly,
    LearnerSpec,
    LogisticMainTerms,
    LogisticWithInteractions,
    default_super_spec,
    fit_binary_regressor,
    make_learner,
    pairwise_expand,
    parse_learner,
)


def saturated_binary_design():
    # every (x1, x2) cell with fractional labels equal to a logistic truth:
    # the score is exactly zero at the true coefficients, so IRLS recovers them
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    beta = np.array([0.4, -0.9, 0.7])
    y = expit(beta[0] + X @ beta[1:])
    return X, y, beta


def test_intercept_only_predicts_mean():
    model = InterceptOnly().fit(np.zeros((5, 2)), [0, 0, 1, 1, 1])
    assert np.allclose(model.predict_prob1(np.ones((3, 2))), 0.6)
    proba = model.predict_proba(np.ones((2, 2)))
    assert proba.shape == (2, 2)
    assert np.allclose(proba.sum(axis=1), 1.0)


def test_logistic_recovers_exact_coefficients():
    X, y, beta = saturated_binary_design()
    model = LogisticMainTerms().fit(X, y)
    assert model.intercept_ == pytest.approx(beta[0], abs=1e-7)
    assert model.coef_ == pytest.approx(beta[1:], abs=1e-7)
    assert not model.ridge_stabilized_


def test_grouping_matches_ungrouped_fit():
    X, y, _ = saturated_binary_design()
    reps = np.repeat(np.arange(4), [7, 3, 5, 9])
    model_big = LogisticMainTerms().fit(X[reps], y[reps])
    model_small_weights = LogisticMainTerms().fit(
        np.repeat(X, [7, 3, 5, 9], axis=0), np.repeat(y, [7, 3, 5, 9])
    )
    assert model_big.intercept_ == pytest.approx(model_small_weights.intercept_, abs=1e-10)


def test_fractional_labels_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        LogisticMainTerms().fit(np.zeros((2, 1)), [0.5, 1.2])


def test_pairwise_expand():
    X = np.array([[1.0, 2.0, 3.0]])
    out = pairwise_expand(X)
    assert out.shape == (1, 6)
    assert list(out[0]) == [1.0, 2.0, 3.0, 2.0, 3.0, 6.0]


def test_interactions_fit_saturated_cells():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    beta = np.array([0.2, -0.5, 0.3, 0.8])  # includes the product term
    y = expit(beta[0] + X @ beta[1:3] + beta[3] * X[:, 0] * X[:, 1])
    model = LogisticWithInteractions().fit(X, y)
    assert np.allclose(model.predict_prob1(X), y, atol=1e-8)


def test_separation_falls_back_to_ridge():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])  # perfectly separable
    with pytest.warns(SeparationDetected):
        model = LogisticMainTerms().fit(X, y)
    assert model.ridge_stabilized_
    p = model.predict_prob1(X)
    assert np.all((p > 0) & (p < 1))


def test_super_learner_picks_interactions_when_they_matter():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 2, size=(4000, 2)).astype(float)
    p = expit(0.3 - 0.4 * X[:, 0] + 0.2 * X[:, 1] + 1.5 * X[:, 0] * X[:, 1])
    y = (rng.random(4000) < p).astype(float)
    sl = DiscreteSuperLearner(
        candidates=(InterceptOnly(), LogisticMainTerms(), LogisticWithInteractions()),
        cv_folds=4,
    ).fit(X, y)
    assert sl.winner_index_ == 2
    assert len(sl.cv_losses_) == 3


def test_super_learner_tie_goes_to_first_candidate():
    X = np.zeros((10, 1))
    y = np.full(10, 0.3)
    sl = DiscreteSuperLearner(
        candidates=(InterceptOnly(), LogisticMainTerms()), cv_folds=2
    ).fit(X, y)
    assert sl.winner_index_ == 0


def test_super_learner_fold_validation():
    with pytest.raises(InvalidFoldCount):
        DiscreteSuperLearner(candidates=(InterceptOnly(),), cv_folds=1).fit(
            np.zeros((4, 1)), [0, 1, 0, 1]
        )


def test_empty_input():
    with pytest.raises(EmptyInput):
        fit_binary_regressor(np.zeros((0, 2)), [], LearnerSpec("logistic_main_terms"))


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        LogisticMainTerms().predict_prob1(np.zeros((1, 1)))


def test_parse_learner_forms():
    assert parse_learner("mean").kind == "intercept_only"
    assert parse_learner("logistic").kind == "logistic_main_terms"
    assert parse_learner("interactions").kind == "logistic_with_interactions"
    spec = parse_learner("super(mean,logistic;cv=3)")
    assert spec.kind == "discrete_super_learner"
    assert spec.cv_folds == 3
    assert tuple(c.kind for c in spec.candidates) == (
        "intercept_only",
        "logistic_main_terms",
    )
    assert parse_learner("super") == default_super_spec()
    assert parse_learner(spec.describe()) == spec  # describe round-trips


def test_parse_learner_rejects_garbage():
    with pytest.raises(ValueError):
        parse_learner("boosted_trees")
    with pytest.raises(ValueError):
        parse_learner("super(mean;folds=3)")
    with pytest.raises(ValueError):
        LearnerSpec("logistic_main_terms", candidates=(LearnerSpec("intercept_only"),))


def test_make_learner_types():
    assert isinstance(make_learner(LearnerSpec("intercept_only")), InterceptOnly)
    sl = make_learner(default_super_spec(cv_folds=2))
    assert isinstance(sl, DiscreteSuperLearner)
    assert sl.cv_folds == 2
