"""Transported-risk estimators, their influence functions, and the effect grid.

A transported risk combines three ingredients: the target site's covariate
distribution, one source site's mediator law, and another source site's
outcome law. Four estimation strategies are provided:

  gcomp                plug-in: average the two-stage regression over target rows
  weighting            indicator-weighted average of observed outcomes, with
                       density-ratio weights carrying records from the outcome
                       site to the target covariate law and the mediator site's
                       mediator law
  weighting_regression average of first-stage predictions over the mediator
                       site's records, reweighted to the target covariate law
  onestep              gcomp plus the mean of the efficient influence function;
                       asymptotically efficient, supplies standard errors

Log relative risks contrast exposure levels 1 and 0 of the same strategy, with
delta-method standard errors from the per-record influence values. The grid
collects one log-RR per (outcome site, mediator site) pair and, for onestep,
the joint covariance across cells (cells share records, so they correlate).

All estimators accept optional per-record weights. With weights equal to exact
cell probabilities (an enumeration of the population), the empirical averages
become population expectations, which is how the oracle-equivalence tests
evaluate the estimating equations at the population itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, EstimandSpec, spec_for_dataset
from .errors import (
    IncompleteGrid,
    NonPositiveRisk,
    NoTargetRecords,
)
from .learners import LearnerSpec, parse_learner
from .nuisance import FoldAssignment, fit_nuisance_set, make_folds

METHODS = ("gcomp", "weighting", "weighting_regression", "onestep")

CLAMP_LO = 1e-6

_Z95 = 1.959963984540054


def _weights_or_uniform(record_weights, n: int) -> tuple[np.ndarray, bool]:
    if record_weights is None:
        return np.full(n, 1.0 / n), False
    w = np.asarray(record_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"record_weights must have shape ({n},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("record_weights must be finite, nonnegative, not all zero")
    return w / w.sum(), True


@dataclass
class RiskEstimate:
    """One transported risk for one exposure level."""

    value: float
    x: int
    target: object
    outcome_site: object
    mediator_site: object
    method: str
    se: Optional[float] = None
    eif_values: Optional[np.ndarray] = None


@dataclass
class LogRREstimate:
    """Log relative risk for one (outcome site, mediator site) pair."""

    value: float
    target: object
    outcome_site: object
    mediator_site: object
    method: str
    risk_exposed: float
    risk_unexposed: float
    se: Optional[float] = None
    eif_values: Optional[np.ndarray] = None

    def confidence_interval(self, z: float = _Z95) -> tuple[float, float]:
        if self.se is None:
            return (float("nan"), float("nan"))
        return (self.value - z * self.se, self.value + z * self.se)


def gcomp_risk(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    x: int,
    outcome_site,
    mediator_site,
    record_weights=None,
) -> RiskEstimate:
    """Average the second-stage regression over the target site's records."""
    w, _ = _weights_or_uniform(record_weights, ds.n_records)
    target_mask = ds.site_mask(spec.target)
    wt = w[target_mask]
    if wt.sum() <= 0:
        raise NoTargetRecords(f"no records (or weight) for target site {spec.target!r}")
    b = nuis.averaged_outcome(x, outcome_site, mediator_site)
    value = float(np.sum(wt * b[target_mask]) / wt.sum())
    return RiskEstimate(value, x, spec.target, outcome_site, mediator_site, "gcomp")


def _ratio_weights(ds, spec, nuis, x, outcome_site, mediator_site):
    """Density-ratio weight common to the weighting estimator and EIF term 1."""
    g_p = nuis.exposure_given_mediator(x, mediator_site)
    g_k = nuis.exposure_given_mediator(x, outcome_site)
    e_p = nuis.site_given_mediator(mediator_site)
    e_k = nuis.site_given_mediator(outcome_site)
    r_j = nuis.site_given_covariates(spec.target)
    r_p = nuis.site_given_covariates(mediator_site)
    t_p = nuis.exposure_prob(x, mediator_site)
    h_j = nuis.site_share(spec.target)
    return (g_p / g_k) * (e_p / e_k) * (r_j / r_p) / (t_p * h_j)


def weighting_risk(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    x: int,
    outcome_site,
    mediator_site,
    record_weights=None,
) -> RiskEstimate:
    """Indicator-weighted outcome average over the outcome site's records.

    The identity this implements carries matching exposure-probability and
    site-share factors for the outcome site in numerator and denominator;
    they cancel exactly and are omitted here.
    """
    w, _ = _weights_or_uniform(record_weights, ds.n_records)
    ind = (ds.exposure == x) & ds.site_mask(outcome_site)
    y = np.nan_to_num(ds.outcome, nan=0.0)
    ratio = _ratio_weights(ds, spec, nuis, x, outcome_site, mediator_site)
    value = float(np.sum(w * ind * y * ratio))
    return RiskEstimate(value, x, spec.target, outcome_site, mediator_site, "weighting")


def weighting_regression_risk(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    x: int,
    outcome_site,
    mediator_site,
    record_weights=None,
) -> RiskEstimate:
    """First-stage predictions averaged over the mediator site's records,
    reweighted to the target covariate law."""
    w, _ = _weights_or_uniform(record_weights, ds.n_records)
    ind = (ds.exposure == x) & ds.site_mask(mediator_site)
    a = nuis.outcome_mean(x, outcome_site)
    r_j = nuis.site_given_covariates(spec.target)
    r_p = nuis.site_given_covariates(mediator_site)
    t_p = nuis.exposure_prob(x, mediator_site)
    h_j = nuis.site_share(spec.target)
    value = float(np.sum(w * ind * a * (r_j / r_p) / (t_p * h_j)))
    return RiskEstimate(
        value, x, spec.target, outcome_site, mediator_site, "weighting_regression"
    )


def eif_evaluate(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    x: int,
    outcome_site,
    mediator_site,
    theta: float,
) -> np.ndarray:
    """Per-record efficient influence function contributions.

    Three terms: (1) outcome residuals on the outcome site's exposed records,
    carried by the full density-ratio weight; (2) first-minus-second stage
    residuals on the mediator site's exposed records, carried by the covariate
    ratio; (3) second-stage predictions centered at `theta` on target records.
    Records outside all three sites contribute zero. The first term divides by
    the mediator site's exposure probability, matching the estimator whose
    population limit the oracle tests pin down.
    """
    a = nuis.outcome_mean(x, outcome_site)
    b = nuis.averaged_outcome(x, outcome_site, mediator_site)
    r_j = nuis.site_given_covariates(spec.target)
    r_p = nuis.site_given_covariates(mediator_site)
    t_p = nuis.exposure_prob(x, mediator_site)
    h_j = nuis.site_share(spec.target)

    ind_k = (ds.exposure == x) & ds.site_mask(outcome_site)
    ind_p = (ds.exposure == x) & ds.site_mask(mediator_site)
    ind_j = ds.site_mask(spec.target)
    y = np.nan_to_num(ds.outcome, nan=0.0)

    ratio = _ratio_weights(ds, spec, nuis, x, outcome_site, mediator_site)
    term1 = ind_k * (y - a) * ratio
    term2 = ind_p * (a - b) * (r_j / r_p) / (t_p * h_j)
    term3 = ind_j * (b - theta) / h_j
    return term1 + term2 + term3


def onestep_risk(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    x: int,
    outcome_site,
    mediator_site,
    record_weights=None,
) -> RiskEstimate:
    """Plug-in estimate plus the influence-function correction, with its
    standard error from the influence values' sample variance."""
    w, weighted = _weights_or_uniform(record_weights, ds.n_records)
    plug_in = gcomp_risk(
        ds, spec, nuis, x, outcome_site, mediator_site, record_weights=record_weights
    )
    eif = eif_evaluate(ds, spec, nuis, x, outcome_site, mediator_site, plug_in.value)
    correction = float(np.sum(w * eif))
    value = plug_in.value + correction
    n = ds.n_records
    if weighted:
        centered = eif - correction
        se = float(np.sqrt(np.sum((w * centered) ** 2)))
    else:
        se = float(np.sqrt(np.var(eif, ddof=1) / n))
    return RiskEstimate(
        value,
        x,
        spec.target,
        outcome_site,
        mediator_site,
        "onestep",
        se=se,
        eif_values=eif,
    )


_RISK_FN = {
    "gcomp": gcomp_risk,
    "weighting": weighting_risk,
    "weighting_regression": weighting_regression_risk,
    "onestep": onestep_risk,
}


def log_rr(
    exposed: RiskEstimate,
    unexposed: RiskEstimate,
    record_weights=None,
    clamp: bool = False,
) -> LogRREstimate:
    """Contrast the two exposure arms on the log scale (delta method)."""
    if (exposed.x, unexposed.x) != (1, 0):
        raise ValueError("log_rr expects the exposure-1 then exposure-0 estimate")
    same = (
        exposed.method == unexposed.method
        and exposed.outcome_site == unexposed.outcome_site
        and exposed.mediator_site == unexposed.mediator_site
        and exposed.target == unexposed.target
    )
    if not same:
        raise ValueError("the two estimates describe different estimands")
    v1, v0 = exposed.value, unexposed.value
    if clamp:
        v1 = float(np.clip(v1, CLAMP_LO, 1.0 - CLAMP_LO))
        v0 = float(np.clip(v0, CLAMP_LO, 1.0 - CLAMP_LO))
    if v1 <= 0.0 or v0 <= 0.0:
        raise NonPositiveRisk(
            f"risk estimates must be positive to take logs, got {v1!r} and {v0!r}"
            " (a clamp option is available)"
        )
    value = float(np.log(v1) - np.log(v0))
    se = None
    eif = None
    if exposed.eif_values is not None and unexposed.eif_values is not None:
        eif = exposed.eif_values / v1 - unexposed.eif_values / v0
        n = eif.shape[0]
        w, weighted = _weights_or_uniform(record_weights, n)
        if weighted:
            mu = float(np.sum(w * eif))
            se = float(np.sqrt(np.sum((w * (eif - mu)) ** 2)))
        else:
            se = float(np.sqrt(np.var(eif, ddof=1) / n))
    return LogRREstimate(
        value=value,
        target=exposed.target,
        outcome_site=exposed.outcome_site,
        mediator_site=exposed.mediator_site,
        method=exposed.method,
        risk_exposed=exposed.value,
        risk_unexposed=unexposed.value,
        se=se,
        eif_values=eif,
    )


@dataclass
class TransportGrid:
    """All log-RR cells for one dataset, outcome sites as rows."""

    target: object
    outcome_sites: tuple
    mediator_sites: tuple
    method: str
    n_records: int
    site_counts: dict
    cells: dict = field(default_factory=dict)      # (k, p) -> LogRREstimate
    failures: dict = field(default_factory=dict)   # (k, p) -> reason string
    covariance: Optional[np.ndarray] = None        # over present cells, row-major

    def cell_order(self) -> list[tuple]:
        return [
            (k, p)
            for k in self.outcome_sites
            for p in self.mediator_sites
            if (k, p) in self.cells
        ]

    @property
    def is_complete(self) -> bool:
        return not self.failures and all(
            (k, p) in self.cells for k in self.outcome_sites for p in self.mediator_sites
        )

    def require_complete(self):
        problems = dict(self.failures)
        for k in self.outcome_sites:
            for p in self.mediator_sites:
                if (k, p) not in self.cells and (k, p) not in problems:
                    problems[(k, p)] = "cell absent"
        if problems:
            detail = "; ".join(
                f"(outcome={k!r}, mediator={p!r}): {reason}"
                for (k, p), reason in sorted(problems.items(), key=repr)
            )
            raise IncompleteGrid(f"grid has absent cells: {detail}")

    def log_rr_matrix(self) -> np.ndarray:
        out = np.full((len(self.outcome_sites), len(self.mediator_sites)), np.nan)
        for i, k in enumerate(self.outcome_sites):
            for j, p in enumerate(self.mediator_sites):
                cell = self.cells.get((k, p))
                if cell is not None:
                    out[i, j] = cell.value
        return out

    def se_matrix(self) -> np.ndarray:
        out = np.full((len(self.outcome_sites), len(self.mediator_sites)), np.nan)
        for i, k in enumerate(self.outcome_sites):
            for j, p in enumerate(self.mediator_sites):
                cell = self.cells.get((k, p))
                if cell is not None and cell.se is not None:
                    out[i, j] = cell.se
        return out

    def size_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column weights proportional to source-site record counts."""
        wk = np.array([self.site_counts[k] for k in self.outcome_sites], dtype=np.float64)
        wp = np.array([self.site_counts[p] for p in self.mediator_sites], dtype=np.float64)
        return wk / wk.sum(), wp / wp.sum()

    def to_json_dict(self) -> dict:
        cells = []
        for (k, p) in self.cell_order():
            c = self.cells[(k, p)]
            lo, hi = c.confidence_interval()
            cells.append(
                {
                    "outcome_site": k,
                    "mediator_site": p,
                    "log_rr": c.value,
                    "se": c.se,
                    "ci_lower": None if c.se is None else lo,
                    "ci_upper": None if c.se is None else hi,
                    "risk_exposed": c.risk_exposed,
                    "risk_unexposed": c.risk_unexposed,
                }
            )
        return {
            "target": self.target,
            "outcome_sites": list(self.outcome_sites),
            "mediator_sites": list(self.mediator_sites),
            "method": self.method,
            "n_records": self.n_records,
            "site_counts": {str(s): int(c) for s, c in self.site_counts.items()},
            "cells": cells,
            "failures": [
                {"outcome_site": k, "mediator_site": p, "reason": reason}
                for (k, p), reason in sorted(self.failures.items(), key=repr)
            ],
            "covariance": None if self.covariance is None else self.covariance.tolist(),
        }

    def format_table(self) -> str:
        lines = [
            f"log relative risks transported to site {self.target!r} "
            f"({self.method}, N={self.n_records})",
            f"{'outcome':>10} {'mediator':>10} {'log_rr':>10} {'se':>10} "
            f"{'ci_lower':>10} {'ci_upper':>10}",
        ]
        for k in self.outcome_sites:
            for p in self.mediator_sites:
                cell = self.cells.get((k, p))
                if cell is None:
                    lines.append(
                        f"{k!s:>10} {p!s:>10} {'absent':>10} "
                        f"({self.failures.get((k, p), 'unknown')})"
                    )
                    continue
                lo, hi = cell.confidence_interval()
                se = "" if cell.se is None else f"{cell.se:10.4f}"
                ci_l = "" if cell.se is None else f"{lo:10.4f}"
                ci_u = "" if cell.se is None else f"{hi:10.4f}"
                lines.append(
                    f"{k!s:>10} {p!s:>10} {cell.value:10.4f} {se:>10} {ci_l:>10} {ci_u:>10}"
                )
        return "\n".join(lines)


def grid_from_json_dict(payload: dict) -> TransportGrid:
    """Rebuild a grid from its JSON form (per-record vectors are not kept)."""
    cells = {}
    for c in payload["cells"]:
        key = (c["outcome_site"], c["mediator_site"])
        cells[key] = LogRREstimate(
            value=c["log_rr"],
            target=payload["target"],
            outcome_site=c["outcome_site"],
            mediator_site=c["mediator_site"],
            method=payload["method"],
            risk_exposed=c["risk_exposed"],
            risk_unexposed=c["risk_unexposed"],
            se=c["se"],
        )
    failures = {
        (f["outcome_site"], f["mediator_site"]): f["reason"]
        for f in payload.get("failures", [])
    }
    cov = payload.get("covariance")
    counts = payload["site_counts"]
    # JSON keys are strings; map back onto the declared site lists
    relabel = {}
    for s in list(payload["outcome_sites"]) + list(payload["mediator_sites"]) + [payload["target"]]:
        relabel[s] = counts.get(str(s), counts.get(s))
    return TransportGrid(
        target=payload["target"],
        outcome_sites=tuple(payload["outcome_sites"]),
        mediator_sites=tuple(payload["mediator_sites"]),
        method=payload["method"],
        n_records=payload["n_records"],
        site_counts=relabel,
        cells=cells,
        failures=failures,
        covariance=None if cov is None else np.asarray(cov, dtype=np.float64),
    )


def transport_grid(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    method: str = "onestep",
    record_weights=None,
    clamp: bool = False,
) -> TransportGrid:
    """Estimate every (outcome site, mediator site) cell.

    Failed cells are recorded with their reason instead of aborting; the
    heterogeneity decomposition later refuses incomplete grids. For onestep,
    the joint covariance of all present cells is the sample covariance of
    their per-record influence vectors divided by N, and each cell's standard
    error is read off the covariance diagonal so the two always agree.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    fn = _RISK_FN[method]
    grid = TransportGrid(
        target=spec.target,
        outcome_sites=tuple(spec.outcome_sources),
        mediator_sites=tuple(spec.mediator_sources),
        method=method,
        n_records=ds.n_records,
        site_counts=dict(ds.site_counts),
    )
    for k in spec.outcome_sources:
        for p in spec.mediator_sources:
            try:
                exposed = fn(ds, spec, nuis, 1, k, p, record_weights=record_weights)
                unexposed = fn(ds, spec, nuis, 0, k, p, record_weights=record_weights)
                grid.cells[(k, p)] = log_rr(
                    exposed, unexposed, record_weights=record_weights, clamp=clamp
                )
            except (NonPositiveRisk, NoTargetRecords, FloatingPointError) as exc:
                grid.failures[(k, p)] = f"{type(exc).__name__}: {exc}"

    if method == "onestep" and grid.cells:
        order = grid.cell_order()
        n = ds.n_records
        w, weighted = _weights_or_uniform(record_weights, n)
        rows = []
        for key in order:
            eif = grid.cells[key].eif_values
            mu = float(np.sum(w * eif)) if weighted else float(np.mean(eif))
            rows.append((eif - mu) * (w if weighted else 1.0))
        centered = np.vstack(rows)
        if weighted:
            cov = centered @ centered.T
        else:
            cov = (centered @ centered.T) / ((n - 1) * n)
        grid.covariance = cov
        for i, key in enumerate(order):
            grid.cells[key].se = float(np.sqrt(cov[i, i]))
    return grid


class TransportEffects(BaseEstimator):
    """Estimator facade: fit nuisances and the effect grid in one call.

    Parameters mirror the CLI. `learner` takes a learner spec object or the
    config-file string form (for example "super(mean,logistic,interactions;cv=5)").
    """

    def __init__(
        self,
        estimator: str = "onestep",
        learner="interactions",
        truncation: float = 0.01,
        crossfit_folds: int = 0,
        clamp: bool = False,
        seed: int = 0,
    ):
        self.estimator = estimator
        self.learner = learner
        self.truncation = truncation
        self.crossfit_folds = crossfit_folds
        self.clamp = clamp
        self.seed = seed

    def _learner_spec(self) -> LearnerSpec:
        if isinstance(self.learner, LearnerSpec):
            return self.learner
        return parse_learner(self.learner)

    def fit(self, dataset: Dataset, spec: Optional[EstimandSpec] = None):
        if self.estimator not in METHODS:
            raise ValueError(f"estimator must be one of {METHODS}")
        spec = spec or spec_for_dataset(dataset)
        folds: Optional[FoldAssignment] = None
        if self.crossfit_folds and self.crossfit_folds > 1:
            folds = make_folds(dataset.n_records, self.crossfit_folds, seed=self.seed)
        self.spec_ = spec
        self.nuisances_ = fit_nuisance_set(
            dataset,
            spec,
            learner=self._learner_spec(),
            folds=folds,
            truncation=self.truncation,
        )
        self.grid_ = transport_grid(
            dataset, spec, self.nuisances_, method=self.estimator, clamp=self.clamp
        )
        return self

    def log_rr_matrix(self) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "grid_")
        return self.grid_.log_rr_matrix()


def write_grid_json(grid: TransportGrid, path) -> None:
    with open(path, "w") as fh:
        json.dump(grid.to_json_dict(), fh, indent=2)


def write_grid_csv(grid: TransportGrid, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "outcome_site",
                "mediator_site",
                "log_rr",
                "se",
                "ci_lower",
                "ci_upper",
                "risk_exposed",
                "risk_unexposed",
            ]
        )
        for k in grid.outcome_sites:
            for p in grid.mediator_sites:
                cell = grid.cells.get((k, p))
                if cell is None:
                    writer.writerow([k, p, "NA", "NA", "NA", "NA", "NA", "NA"])
                    continue
                lo, hi = cell.confidence_interval()
                writer.writerow(
                    [
                        k,
                        p,
                        repr(cell.value),
                        "NA" if cell.se is None else repr(cell.se),
                        "NA" if cell.se is None else repr(lo),
                        "NA" if cell.se is None else repr(hi),
                        repr(cell.risk_exposed),
                        repr(cell.risk_unexposed),
                    ]
                )
