"""Binary-probability regression learners behind the nuisance fits.

Three base learners (intercept only, logistic with main terms, logistic with
all pairwise interaction products) plus a discrete super learner that picks
the candidate with the lowest cross-validated negative log-likelihood and
refits it on the full data.

All learners follow the scikit-learn estimator protocol: constructor stores
parameters verbatim, `fit(X, y)` returns self, `predict_proba(X)` returns an
(n, 2) array, and `get_params` comes from BaseEstimator. Labels may be
fractional values in [0, 1] (binomial working likelihood), which the second
stage of the nuisance pipeline relies on.

The logistic solver is iteratively reweighted least squares run to a
coefficient-change tolerance of 1e-8 within 100 iterations. Separation or a
singular weighted Hessian triggers one retry with a ridge penalty of 1e-6 on
the Hessian diagonal; the fitted model then records `ridge_stabilized_`.
Identical feature rows are collapsed to weighted group means before
iterating, which leaves the maximizer unchanged and makes fits on low-
cardinality designs cheap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import NotFittedError

from .errors import EmptyInput, InvalidFoldCount, SeparationDetected

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
RIDGE_PENALTY = 1e-6
_COEF_DIVERGED = 30.0  # |log odds| beyond this is separation scale
_PRED_FLOOR = 1e-12    # guards log() in likelihood evaluations only


def _as_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-dimensional")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return X


def _as_labels(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != n_rows:
        raise ValueError("label length does not match feature rows")
    if y.size == 0:
        raise EmptyInput("no rows to fit")
    if not np.all(np.isfinite(y)) or np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("labels must lie in [0, 1]")
    return y


def _group_rows(X: np.ndarray, y: np.ndarray):
    """Collapse duplicate rows to (unique X, mean y, count). Exact for the
    binomial log-likelihood, which depends on data only through group sums."""
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    if uniq.shape[0] == X.shape[0]:
        return X, y, np.ones_like(y)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    sums = np.bincount(inverse, weights=y, minlength=uniq.shape[0])
    return uniq, sums / counts, counts


def _irls(X: np.ndarray, y: np.ndarray, weights: np.ndarray, ridge: float):
    """Weighted logistic IRLS with intercept prepended. Returns (beta,
    converged). With ridge > 0 both the Hessian and the score carry the
    penalty, so the solve targets the penalized maximum."""
    Z = np.column_stack([np.ones(X.shape[0]), X])
    d = Z.shape[1]
    beta = np.zeros(d)
    eye = np.eye(d)
    for _ in range(IRLS_MAX_ITER):
        eta = Z @ beta
        p = expit(eta)
        w = weights * np.clip(p * (1.0 - p), 1e-10, None)
        score = Z.T @ (weights * (y - p)) - ridge * beta
        hess = (Z * w[:, None]).T @ Z + ridge * eye
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if np.max(np.abs(beta)) > _COEF_DIVERGED and ridge == 0.0:
            return beta, False
        if np.max(np.abs(step)) < IRLS_TOL:
            return beta, True
    return beta, ridge > 0.0  # ridge run is kept even if slow to settle


class _FittedMixin:
    def _require_fitted(self):
        if not getattr(self, "_fitted", False):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        p1 = self.predict_prob1(X)
        return np.column_stack([1.0 - p1, p1])


class InterceptOnly(BaseEstimator, _FittedMixin):
    """Predicts the training-label mean for every input."""

    def fit(self, X, y):
        X = _as_features(X)
        y = _as_labels(y, X.shape[0])
        self.mean_ = float(np.mean(y))
        self.n_features_in_ = X.shape[1]
        self._fitted = True
        return self

    def predict_prob1(self, X) -> np.ndarray:
        self._require_fitted()
        X = _as_features(X)
        return np.full(X.shape[0], self.mean_)


class LogisticMainTerms(BaseEstimator, _FittedMixin):
    """Logistic regression on the raw feature columns, fitted by IRLS."""

    def _design(self, X: np.ndarray) -> np.ndarray:
        return X

    def fit(self, X, y):
        X = _as_features(X)
        y = _as_labels(y, X.shape[0])
        D = self._design(X)
        Dg, yg, wg = _group_rows(D, y)
        beta, converged = _irls(Dg, yg, wg, ridge=0.0)
        self.ridge_stabilized_ = not converged
        if not converged:
            warnings.warn(
                "IRLS did not converge (likely separation); "
                f"refitting with ridge penalty {RIDGE_PENALTY:g}",
                SeparationDetected,
                stacklevel=2,
            )
            beta, _ = _irls(Dg, yg, wg, ridge=RIDGE_PENALTY)
        self.intercept_ = float(beta[0])
        self.coef_ = beta[1:].copy()
        self.n_features_in_ = X.shape[1]
        self._fitted = True
        return self

    def predict_prob1(self, X) -> np.ndarray:
        self._require_fitted()
        X = _as_features(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("feature count differs from fit time")
        return expit(self.intercept_ + self._design(X) @ self.coef_)


def pairwise_expand(X: np.ndarray) -> np.ndarray:
    """Append all distinct pairwise products x_i * x_j (i < j)."""
    n, d = X.shape
    cols = [X]
    for i in range(d):
        for j in range(i + 1, d):
            cols.append((X[:, i] * X[:, j]).reshape(n, 1))
    return np.hstack(cols)


class LogisticWithInteractions(LogisticMainTerms):
    """Logistic regression on main terms plus all pairwise products."""

    def _design(self, X: np.ndarray) -> np.ndarray:
        return pairwise_expand(X)


def negative_log_likelihood(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, _PRED_FLOOR, 1.0 - _PRED_FLOOR)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


class DiscreteSuperLearner(BaseEstimator, _FittedMixin):
    """Winner-take-all model selection by cross-validated negative
    log-likelihood, then a refit of the winning candidate on all rows.

    Folds come from a fixed internal permutation so that fitting is
    deterministic; ties go to the earliest candidate in the list.
    """

    def __init__(self, candidates: Sequence[BaseEstimator], cv_folds: int = 5):
        self.candidates = candidates
        self.cv_folds = cv_folds

    def fit(self, X, y):
        X = _as_features(X)
        y = _as_labels(y, X.shape[0])
        if not self.candidates:
            raise ValueError("candidate list is empty")
        if self.cv_folds < 2:
            raise InvalidFoldCount("cv_folds must be >= 2")
        n = X.shape[0]
        folds = min(self.cv_folds, n)
        if folds < 2:
            # single row: no split possible, score in-sample
            losses = []
            for cand in self.candidates:
                model = clone(cand).fit(X, y)
                losses.append(negative_log_likelihood(y, model.predict_prob1(X)))
        else:
            order = np.random.default_rng(0).permutation(n)
            parts = np.array_split(order, folds)
            losses = []
            for cand in self.candidates:
                total = 0.0
                for val_idx in parts:
                    train = np.setdiff1d(order, val_idx, assume_unique=True)
                    model = clone(cand).fit(X[train], y[train])
                    total += negative_log_likelihood(
                        y[val_idx], model.predict_prob1(X[val_idx])
                    )
                losses.append(total)
        self.cv_losses_ = tuple(float(v) for v in losses)
        best = int(np.argmin(losses))
        self.winner_index_ = best
        self.model_ = clone(self.candidates[best]).fit(X, y)
        self.n_features_in_ = X.shape[1]
        self._fitted = True
        return self

    def predict_prob1(self, X) -> np.ndarray:
        self._require_fitted()
        return self.model_.predict_prob1(X)


# ---------------------------------------------------------------------------
# Learner specification (config-file friendly)

_KINDS = ("intercept_only", "logistic_main_terms", "logistic_with_interactions",
          "discrete_super_learner")
_ALIASES = {
    "mean": "intercept_only",
    "intercept_only": "intercept_only",
    "logistic": "logistic_main_terms",
    "logistic_main_terms": "logistic_main_terms",
    "interactions": "logistic_with_interactions",
    "logistic_with_interactions": "logistic_with_interactions",
    "super": "discrete_super_learner",
    "discrete_super_learner": "discrete_super_learner",
}


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    candidates: tuple["LearnerSpec", ...] = field(default_factory=tuple)
    cv_folds: int = 5

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind == "discrete_super_learner":
            if not self.candidates:
                raise ValueError("discrete_super_learner needs candidates")
            if self.cv_folds < 2:
                raise InvalidFoldCount("cv_folds must be >= 2")
        elif self.candidates:
            raise ValueError("only discrete_super_learner takes candidates")

    def describe(self) -> str:
        if self.kind != "discrete_super_learner":
            return self.kind
        inner = ",".join(c.describe() for c in self.candidates)
        return f"super({inner};cv={self.cv_folds})"


def default_super_spec(cv_folds: int = 5) -> LearnerSpec:
    return LearnerSpec(
        kind="discrete_super_learner",
        candidates=(
            LearnerSpec("intercept_only"),
            LearnerSpec("logistic_main_terms"),
            LearnerSpec("logistic_with_interactions"),
        ),
        cv_folds=cv_folds,
    )


def default_interactions_spec() -> LearnerSpec:
    return LearnerSpec("logistic_with_interactions")


def parse_learner(text: str) -> LearnerSpec:
    """Parse a config-file learner string.

    Accepted forms: `mean`, `logistic`, `interactions`, `super`,
    `super(mean,logistic,interactions;cv=5)`.
    """
    s = text.strip()
    if "(" not in s:
        kind = _ALIASES.get(s)
        if kind is None:
            raise ValueError(f"unknown learner {text!r}")
        if kind == "discrete_super_learner":
            return default_super_spec()
        return LearnerSpec(kind)
    head, _, rest = s.partition("(")
    if _ALIASES.get(head.strip()) != "discrete_super_learner" or not rest.endswith(")"):
        raise ValueError(f"cannot parse learner {text!r}")
    body = rest[:-1]
    names, _, opts = body.partition(";")
    cands = tuple(parse_learner(c) for c in names.split(",") if c.strip())
    cv = 5
    if opts.strip():
        key, _, val = opts.partition("=")
        if key.strip() != "cv":
            raise ValueError(f"unknown super-learner option {opts!r}")
        cv = int(val)
    return LearnerSpec("discrete_super_learner", candidates=cands, cv_folds=cv)


def make_learner(spec: LearnerSpec) -> BaseEstimator:
    if spec.kind == "intercept_only":
        return InterceptOnly()
    if spec.kind == "logistic_main_terms":
        return LogisticMainTerms()
    if spec.kind == "logistic_with_interactions":
        return LogisticWithInteractions()
    return DiscreteSuperLearner(
        candidates=tuple(make_learner(c) for c in spec.candidates),
        cv_folds=spec.cv_folds,
    )


def fit_binary_regressor(features, labels, spec: LearnerSpec):
    """Fit one learner per `spec` and return the fitted model."""
    X = _as_features(features)
    if X.shape[0] == 0:
        raise EmptyInput("no rows to fit")
    return make_learner(spec).fit(X, labels)
