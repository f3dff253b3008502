"""Fitted nuisance functions with optional cross-fitting.

Seven ingredients feed the transported-risk estimators:

  outcome_mean            E(Y | X=x, M, L, S=k), one model per outcome site
  averaged_outcome        E(outcome_mean(x, M, L, k) | X=x, L, S=p), the
                          second-stage regression of first-stage predictions
  exposure_given_mediator P(X=x | M, L, S=p)
  site_given_mediator     P(S=p | M, L), one-vs-rest over source sites,
                          renormalized (target rows carry no mediator, so the
                          conditional is relative to being a source record;
                          estimators only ever use ratios of these)
  site_given_covariates   P(S=s | L), one-vs-rest over all sites, renormalized
  exposure_prob           P(X=x | L, S=p)
  site_share              P(S=s), always the empirical frequency

Probabilities that end up in denominators (the four middle ones) are clipped
to [truncation, 1-truncation] on access; `raw=True` returns the unclipped
fits, which the positivity diagnostics inspect. With a fold assignment,
predictions at record i always come from models trained without record i's
fold; pseudo-outcomes for the second stage likewise come from the same fold's
first-stage model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import Dataset, EstimandSpec
from .errors import EmptySite, InvalidFoldCount, NoExposedRecordsInSite
from .learners import LearnerSpec, default_interactions_spec, make_learner


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of record indices into folds labeled 1..n_folds."""

    n_folds: int
    fold_of: np.ndarray

    def __post_init__(self):
        labels = np.unique(self.fold_of)
        if self.n_folds < 1 or not np.array_equal(labels, np.arange(1, self.n_folds + 1)):
            raise InvalidFoldCount(
                f"fold labels must cover 1..{self.n_folds}, got {labels.tolist()}"
            )

    @property
    def n_records(self) -> int:
        return self.fold_of.shape[0]

    def validation_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def training_mask(self, fold: int) -> np.ndarray:
        if self.n_folds == 1:
            # degenerate single fold: train and predict on everything
            return np.ones(self.n_records, dtype=bool)
        return self.fold_of != fold


def single_fold(n: int) -> FoldAssignment:
    return FoldAssignment(n_folds=1, fold_of=np.ones(n, dtype=np.int64))


def make_folds(n: int, n_folds: int, seed=0) -> FoldAssignment:
    """Deterministic random partition into n_folds parts of near-equal size."""
    if not 2 <= n_folds <= n:
        raise InvalidFoldCount(f"need 2 <= n_folds <= n, got n_folds={n_folds}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for i, part in enumerate(np.array_split(order, n_folds)):
        fold_of[part] = i + 1
    return FoldAssignment(n_folds=n_folds, fold_of=fold_of)


class _FoldModels:
    """All component models trained on one fold's training rows."""

    __slots__ = ("outcome", "averaged", "exposure_m", "site_m", "site_l", "exposure_l")

    def __init__(self):
        self.outcome = {}     # k -> model of Y on (x, m, L)
        self.averaged = {}    # (x, k, p) -> model of pseudo-outcome on L
        self.exposure_m = {}  # p -> model of X on (m, L)
        self.site_m = {}      # p -> one-vs-rest model of I(S=p) on (m, L)
        self.site_l = {}      # s -> one-vs-rest model of I(S=s) on L
        self.exposure_l = {}  # p -> model of X on L


class NuisanceSet:
    """Fitted nuisances with fold-routed, cached, vectorized predictions."""

    def __init__(
        self,
        ds: Dataset,
        folds: FoldAssignment,
        models: dict[int, _FoldModels],
        truncation: float,
        learner: LearnerSpec,
    ):
        self.dataset = ds
        self.folds = folds
        self.truncation = float(truncation)
        self.learner = learner
        self._models = models
        self._m_filled = np.nan_to_num(ds.mediator, nan=0.0)
        self._cache: dict[tuple, np.ndarray] = {}
        self._source_sites = ds.source_sites

    # -- feature builders ---------------------------------------------------

    def _features_xml(self, rows: np.ndarray, x: int) -> np.ndarray:
        xcol = np.full(rows.shape[0], float(x))
        return np.column_stack([xcol, self._m_filled[rows], self.dataset.covariates[rows]])

    def _features_ml(self, rows: np.ndarray) -> np.ndarray:
        return np.column_stack([self._m_filled[rows], self.dataset.covariates[rows]])

    def _features_l(self, rows: np.ndarray) -> np.ndarray:
        return self.dataset.covariates[rows]

    # -- fold-routed prediction --------------------------------------------

    def _routed(self, key: tuple, selector: Callable, builder: Callable) -> np.ndarray:
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        out = np.empty(self.dataset.n_records)
        for q in range(1, self.folds.n_folds + 1):
            rows = self.folds.validation_rows(q)
            model = selector(self._models[q])
            out[rows] = model.predict_proba(builder(rows))[:, 1]
        out.setflags(write=False)
        self._cache[key] = out
        return out

    def _clip(self, v: np.ndarray, raw: bool) -> np.ndarray:
        if raw:
            return v
        return np.clip(v, self.truncation, 1.0 - self.truncation)

    # -- accessors (all return per-record vectors) ---------------------------

    def outcome_mean(self, x: int, outcome_site) -> np.ndarray:
        """First-stage prediction at exposure x, the record's own (M, L)."""
        return self._routed(
            ("a", x, outcome_site),
            lambda fm: fm.outcome[outcome_site],
            lambda rows: self._features_xml(rows, x),
        )

    def averaged_outcome(self, x: int, outcome_site, mediator_site) -> np.ndarray:
        """Second-stage prediction at exposure x, the record's own L."""
        return self._routed(
            ("b", x, outcome_site, mediator_site),
            lambda fm: fm.averaged[(x, outcome_site, mediator_site)],
            self._features_l,
        )

    def exposure_given_mediator(self, x: int, site, raw: bool = False) -> np.ndarray:
        p1 = self._routed(
            ("g", site), lambda fm: fm.exposure_m[site], self._features_ml
        )
        return self._clip(p1 if x == 1 else 1.0 - p1, raw)

    def _site_given_mediator_total(self) -> np.ndarray:
        total = np.zeros(self.dataset.n_records)
        for s in self._source_sites:
            total = total + self._routed(
                ("e-raw", s), lambda fm, s=s: fm.site_m[s], self._features_ml
            )
        return total

    def site_given_mediator(self, site, raw: bool = False) -> np.ndarray:
        key = ("e", site)
        if key not in self._cache:
            v = self._routed(("e-raw", site), lambda fm: fm.site_m[site], self._features_ml)
            v = v / self._site_given_mediator_total()
            v.setflags(write=False)
            self._cache[key] = v
        return self._clip(self._cache[key], raw)

    def _site_given_covariates_total(self) -> np.ndarray:
        total = np.zeros(self.dataset.n_records)
        for s in self.dataset.site_labels:
            total = total + self._routed(
                ("r-raw", s), lambda fm, s=s: fm.site_l[s], self._features_l
            )
        return total

    def site_given_covariates(self, site, raw: bool = False) -> np.ndarray:
        key = ("r", site)
        if key not in self._cache:
            v = self._routed(("r-raw", site), lambda fm: fm.site_l[site], self._features_l)
            v = v / self._site_given_covariates_total()
            v.setflags(write=False)
            self._cache[key] = v
        return self._clip(self._cache[key], raw)

    def exposure_prob(self, x: int, site, raw: bool = False) -> np.ndarray:
        p1 = self._routed(("t", site), lambda fm: fm.exposure_l[site], self._features_l)
        return self._clip(p1 if x == 1 else 1.0 - p1, raw)

    def site_share(self, site) -> float:
        return self.dataset.site_counts[site] / self.dataset.n_records


def fit_nuisance_set(
    ds: Dataset,
    spec: EstimandSpec,
    learner: Optional[LearnerSpec] = None,
    folds: Optional[FoldAssignment] = None,
    truncation: float = 0.01,
    outcome_oracle: Optional[Callable] = None,
) -> NuisanceSet:
    """Fit every nuisance component, honoring the fold partition.

    `outcome_oracle(x, m, l_matrix, site)` replaces first-stage predictions
    when building second-stage pseudo-outcomes; used to test that the second
    stage recovers the conditional mean of a known first stage.
    """
    spec.validate_against(ds)
    learner = learner or default_interactions_spec()
    folds = folds or single_fold(ds.n_records)
    if folds.n_records != ds.n_records:
        raise InvalidFoldCount(
            f"fold assignment covers {folds.n_records} records, dataset has {ds.n_records}"
        )

    cov = ds.covariates
    m_filled = np.nan_to_num(ds.mediator, nan=0.0)
    site_idx = ds.site_index
    models: dict[int, _FoldModels] = {}
    for q in range(1, folds.n_folds + 1):
        train = folds.training_mask(q)
        fm = _FoldModels()
        src_train = {s: train & ds.site_mask(s) for s in ds.source_sites}
        for s, mask in src_train.items():
            if not mask.any():
                raise EmptySite(f"no training records for site {s!r} in fold {q}")

        for k, mask in src_train.items():
            feats = np.column_stack([ds.exposure[mask], ds.mediator[mask], cov[mask]])
            fm.outcome[k] = make_learner(learner).fit(feats, ds.outcome[mask])

        for p, mask in src_train.items():
            feats_ml = np.column_stack([ds.mediator[mask], cov[mask]])
            fm.exposure_m[p] = make_learner(learner).fit(feats_ml, ds.exposure[mask])
            fm.exposure_l[p] = make_learner(learner).fit(cov[mask], ds.exposure[mask])

        src_rows = train & (site_idx != ds.index_of(ds.target))
        feats_src = np.column_stack([m_filled[src_rows], cov[src_rows]])
        for p in ds.source_sites:
            label = (site_idx[src_rows] == ds.index_of(p)).astype(np.float64)
            fm.site_m[p] = make_learner(learner).fit(feats_src, label)
        for s in ds.site_labels:
            label = (site_idx[train] == ds.index_of(s)).astype(np.float64)
            fm.site_l[s] = make_learner(learner).fit(cov[train], label)

        for x in (0, 1):
            for k in ds.source_sites:
                if outcome_oracle is not None:
                    def stage_one(rows_mask):
                        return outcome_oracle(x, ds.mediator[rows_mask], cov[rows_mask], k)
                else:
                    a_model = fm.outcome[k]

                    def stage_one(rows_mask, a_model=a_model, x=x):
                        xcol = np.full(int(rows_mask.sum()), float(x))
                        feats = np.column_stack(
                            [xcol, ds.mediator[rows_mask], cov[rows_mask]]
                        )
                        return a_model.predict_proba(feats)[:, 1]

                for p, mask in src_train.items():
                    fit_mask = mask & (ds.exposure == x)
                    if not fit_mask.any():
                        raise NoExposedRecordsInSite(
                            f"site {p!r} has no records with exposure {x} in fold {q}"
                        )
                    pseudo = stage_one(fit_mask)
                    fm.averaged[(x, k, p)] = make_learner(learner).fit(
                        cov[fit_mask], pseudo
                    )
        models[q] = fm

    return NuisanceSet(ds, folds, models, truncation, learner)
