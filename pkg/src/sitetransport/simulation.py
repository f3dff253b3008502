"""Synthetic five-site generator with a closed-form truth oracle.

The generating process: two independent Bernoulli(0.5) covariates, a
categorical site whose conditional law is softmax-like in the covariates,
a randomized binary exposure, a binary mediator whose law is shared across
sites, and a binary outcome whose law differs across sites (a level shift
for two sites and an exposure-mediator synergy term for two others). Site 1
is the target: its rows are masked to covariates only.

Everything is binary, so true transported risks are exact finite sums. The
same closed forms back an oracle nuisance object (the estimator interface
evaluated with true conditionals instead of fits) and a misspecification
harness in which chosen components are replaced by fixed wrong functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .data import Dataset, EstimandSpec, dataset_from_arrays


@dataclass(frozen=True)
class DGPConfig:
    """Coefficients of the generating process (defaults are the study values)."""

    target_site: int = 1
    covariate_probs: tuple[float, float] = (0.5, 0.5)
    exposure_prob: float = 0.5
    # per-site log weight relative to site 1: (intercept, l1, l2, l1*l2)
    site_score_coefs: tuple[tuple[float, float, float, float], ...] = (
        (0.0, 0.0, 0.0, 0.0),
        (0.01, 0.45, 0.3, 0.5),
        (0.01, -0.2, 0.2, -1.0),
        (0.01, 0.45, 0.1, 0.0),
        (-0.25, 0.55, -0.25, -1.0),
    )
    # mediator log-odds: (intercept, x, l1, x*l1, l2)
    mediator_coefs: tuple[float, ...] = (1.37, -0.5, -0.5, 1.0, -0.5)
    # outcome log-odds: (intercept, x, m, l1, m*l1, l2, x*l1)
    outcome_coefs: tuple[float, ...] = (-1.0, -1.0, 0.75, 0.5, 0.5, -0.5, 1.0)
    # site-dependent outcome terms (the heterogeneity switches)
    outcome_site_shift: float = 0.5
    shift_sites: tuple[int, ...] = (2, 4)
    outcome_synergy: float = 0.65
    synergy_sites: tuple[int, ...] = (1, 3)
    site_shift_enabled: bool = True
    synergy_enabled: bool = True

    @property
    def sites(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.site_score_coefs) + 1))

    @property
    def source_sites(self) -> tuple[int, ...]:
        return tuple(s for s in self.sites if s != self.target_site)

    def without_site_terms(self) -> "DGPConfig":
        return replace(self, site_shift_enabled=False, synergy_enabled=False)


def default_estimand(cfg: DGPConfig) -> EstimandSpec:
    return EstimandSpec(
        target=cfg.target_site,
        mediator_sources=cfg.source_sites,
        outcome_sources=cfg.source_sites,
    )


# ---------------------------------------------------------------------------
# Closed-form conditionals (vectorized over numpy inputs)


def site_probabilities(cfg: DGPConfig, l1, l2) -> np.ndarray:
    """P(S=s | L) for every site; last axis indexes sites in label order."""
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    scores = [
        c0 + c1 * l1 + c2 * l2 + c12 * l1 * l2
        for (c0, c1, c2, c12) in cfg.site_score_coefs
    ]
    w = np.exp(np.stack(scores, axis=-1))
    return w / np.sum(w, axis=-1, keepdims=True)


def mediator_prob(cfg: DGPConfig, x, l1, l2, site=None) -> np.ndarray:
    """P(M=1 | X=x, L, S=site); the default coefficients carry no site terms."""
    c0, cx, c1, cx1, c2 = cfg.mediator_coefs
    x = np.asarray(x, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    return expit(c0 + cx * x + c1 * l1 + cx1 * x * l1 + c2 * l2)


def outcome_prob(cfg: DGPConfig, x, m, l1, l2, site) -> np.ndarray:
    """P(Y=1 | X=x, M=m, L, S=site)."""
    c0, cx, cm, c1, cm1, c2, cx1 = cfg.outcome_coefs
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    site = np.asarray(site)
    eta = c0 + cx * x + cm * m + c1 * l1 + cm1 * m * l1 + c2 * l2 + cx1 * x * l1
    if cfg.site_shift_enabled:
        eta = eta + cfg.outcome_site_shift * np.isin(site, cfg.shift_sites)
    if cfg.synergy_enabled:
        eta = eta + cfg.outcome_synergy * x * m * np.isin(site, cfg.synergy_sites)
    return expit(eta)


def covariate_cells(cfg: DGPConfig) -> list[tuple[tuple[int, int], float]]:
    """All (l1, l2) cells with their marginal probabilities."""
    p1, p2 = cfg.covariate_probs
    cells = []
    for l1 in (0, 1):
        for l2 in (0, 1):
            w = (p1 if l1 else 1 - p1) * (p2 if l2 else 1 - p2)
            cells.append(((l1, l2), w))
    return cells


def site_marginal(cfg: DGPConfig, site: int) -> float:
    """P(S=site), summing over the covariate cells."""
    idx = cfg.sites.index(site)
    return float(
        sum(w * site_probabilities(cfg, l1, l2)[idx] for (l1, l2), w in covariate_cells(cfg))
    )


def target_covariate_law(cfg: DGPConfig) -> dict[tuple[int, int], float]:
    """P(L = l | S = target) by Bayes from the site model."""
    j = cfg.sites.index(cfg.target_site)
    joint = {
        cell: w * float(site_probabilities(cfg, *cell)[j])
        for cell, w in covariate_cells(cfg)
    }
    total = sum(joint.values())
    return {cell: v / total for cell, v in joint.items()}


def mediator_marginal_given_covariates(cfg: DGPConfig, m, l1, l2, site) -> np.ndarray:
    """P(M=m | L, S=site), exposure integrated out."""
    m = np.asarray(m, dtype=np.float64)
    px = cfg.exposure_prob
    p1 = mediator_prob(cfg, 1, l1, l2, site)
    p0 = mediator_prob(cfg, 0, l1, l2, site)
    p_m1 = px * p1 + (1 - px) * p0
    return np.where(m == 1.0, p_m1, 1.0 - p_m1)


# ---------------------------------------------------------------------------
# Sampling


def dgp_sample(n: int, cfg: DGPConfig = DGPConfig(), seed=0) -> Dataset:
    """Draw n records and mask the target site to covariates only."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    p1, p2 = cfg.covariate_probs
    l1 = (rng.random(n) < p1).astype(np.float64)
    l2 = (rng.random(n) < p2).astype(np.float64)
    probs = site_probabilities(cfg, l1, l2)
    u = rng.random(n)
    site_idx = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    site = np.asarray(cfg.sites)[site_idx].astype(np.int64)
    x = (rng.random(n) < cfg.exposure_prob).astype(np.float64)
    m = (rng.random(n) < mediator_prob(cfg, x, l1, l2, site)).astype(np.float64)
    y = (rng.random(n) < outcome_prob(cfg, x, m, l1, l2, site)).astype(np.float64)
    masked = site == cfg.target_site
    x[masked] = np.nan
    m[masked] = np.nan
    y[masked] = np.nan
    return dataset_from_arrays(
        site=site,
        covariates=np.column_stack([l1, l2]),
        exposure=x,
        mediator=m,
        outcome=y,
        target=cfg.target_site,
        covariate_names=("1", "2"),
    )


# ---------------------------------------------------------------------------
# Exact oracle


def oracle_risk(cfg: DGPConfig, x: int, k: int, p: int) -> float:
    """True transported risk: target covariate law, site-p mediator law at
    exposure x, site-k outcome law. Exact finite sum, no sampling."""
    total = 0.0
    for (l1, l2), w in target_covariate_law(cfg).items():
        for m in (0, 1):
            fm = mediator_prob(cfg, x, l1, l2, p)
            fm = fm if m == 1 else 1.0 - fm
            total += w * float(fm) * float(outcome_prob(cfg, x, m, l1, l2, k))
    return total


def oracle_log_rr(cfg: DGPConfig, k: int, p: int) -> float:
    return float(np.log(oracle_risk(cfg, 1, k, p)) - np.log(oracle_risk(cfg, 0, k, p)))


def oracle_log_rr_matrix(
    cfg: DGPConfig,
    outcome_sites: Optional[tuple[int, ...]] = None,
    mediator_sites: Optional[tuple[int, ...]] = None,
) -> np.ndarray:
    """True log relative risks, rows = outcome sites, columns = mediator sites."""
    ks = outcome_sites or cfg.source_sites
    ps = mediator_sites or cfg.source_sites
    return np.array([[oracle_log_rr(cfg, k, p) for p in ps] for k in ks])


def mc_counterfactual_risk(
    cfg: DGPConfig, x: int, k: int, p: int, n_draws: int = 1_000_000, seed=0
) -> tuple[float, float]:
    """Independent Monte Carlo check of oracle_risk: draw covariates from the
    target law, the mediator from site p at exposure x, the outcome from site
    k. Returns (mean, binomial SE)."""
    rng = np.random.default_rng(seed)
    cells = list(target_covariate_law(cfg).items())
    probs = np.array([w for _, w in cells])
    idx = rng.choice(len(cells), size=n_draws, p=probs)
    l = np.array([cells[i][0] for i in range(len(cells))], dtype=np.float64)[idx]
    l1, l2 = l[:, 0], l[:, 1]
    m = (rng.random(n_draws) < mediator_prob(cfg, x, l1, l2, p)).astype(np.float64)
    y = (rng.random(n_draws) < outcome_prob(cfg, x, m, l1, l2, k)).astype(np.float64)
    est = float(np.mean(y))
    se = float(np.sqrt(est * (1.0 - est) / n_draws))
    return est, se


def enumeration_dataset(cfg: DGPConfig = DGPConfig()) -> tuple[Dataset, np.ndarray]:
    """Every attainable record cell with its exact probability as a weight.

    Target-site cells are masked (covariates only) and carry P(S=j, L=l);
    source cells enumerate (l1, l2, s, x, m, y) with the full joint weight.
    Feeding these rows with their weights through the estimators evaluates
    the estimating equations at the population itself.
    """
    rows_site, rows_cov, rows_x, rows_m, rows_y, weights = [], [], [], [], [], []
    for (l1, l2), wl in covariate_cells(cfg):
        sprobs = site_probabilities(cfg, l1, l2)
        for s_idx, s in enumerate(cfg.sites):
            ws = wl * float(sprobs[s_idx])
            if s == cfg.target_site:
                rows_site.append(s)
                rows_cov.append((l1, l2))
                rows_x.append(np.nan)
                rows_m.append(np.nan)
                rows_y.append(np.nan)
                weights.append(ws)
                continue
            for x in (0, 1):
                wx = ws * (cfg.exposure_prob if x else 1 - cfg.exposure_prob)
                pm = float(mediator_prob(cfg, x, l1, l2, s))
                for m in (0, 1):
                    wm = wx * (pm if m else 1 - pm)
                    py = float(outcome_prob(cfg, x, m, l1, l2, s))
                    for y in (0, 1):
                        rows_site.append(s)
                        rows_cov.append((l1, l2))
                        rows_x.append(float(x))
                        rows_m.append(float(m))
                        rows_y.append(float(y))
                        weights.append(wm * (py if y else 1 - py))
    ds = dataset_from_arrays(
        site=rows_site,
        covariates=np.array(rows_cov, dtype=np.float64),
        exposure=np.array(rows_x),
        mediator=np.array(rows_m),
        outcome=np.array(rows_y),
        target=cfg.target_site,
        covariate_names=("1", "2"),
    )
    return ds, np.array(weights)


# ---------------------------------------------------------------------------
# Oracle nuisance interface (duck-typed like the fitted NuisanceSet)


class OracleNuisanceSet:
    """Estimator-facing nuisance interface evaluated with true conditionals.

    Optional `overrides` swap selected components for arbitrary functions,
    which is how the misspecification harness constructs its scenarios.
    Components not overridden stay exact. `site_share` uses the closed-form
    marginal unless `record_weights` is supplied (then the weighted empirical
    share, which coincides with the truth for the enumeration dataset) or
    `empirical_site_share=True` (plain counts; keeps the one-step's third
    term an exact telescoping sum on sampled data).
    """

    def __init__(
        self,
        ds: Dataset,
        cfg: DGPConfig,
        truncation: float = 0.01,
        overrides: Optional[dict[str, Callable]] = None,
        empirical_site_share: bool = False,
        record_weights: Optional[np.ndarray] = None,
    ):
        self.ds = ds
        self.cfg = cfg
        self.truncation = float(truncation)
        self.overrides = dict(overrides or {})
        self._l1 = ds.covariates[:, 0]
        self._l2 = ds.covariates[:, 1]
        self._m = np.nan_to_num(ds.mediator, nan=0.0)
        if record_weights is not None:
            w = np.asarray(record_weights, dtype=np.float64)
            self._share = {
                s: float(np.sum(w[ds.site_mask(s)]) / np.sum(w)) for s in ds.site_labels
            }
        elif empirical_site_share:
            self._share = {
                s: ds.site_counts[s] / ds.n_records for s in ds.site_labels
            }
        else:
            self._share = {s: site_marginal(cfg, s) for s in ds.site_labels}

    def _clip(self, v: np.ndarray, raw: bool) -> np.ndarray:
        if raw:
            return v
        d = self.truncation
        return np.clip(v, d, 1.0 - d)

    def outcome_mean(self, x: int, outcome_site: int) -> np.ndarray:
        fn = self.overrides.get("outcome_mean")
        if fn is not None:
            return fn(x, self._m, self._l1, self._l2, outcome_site)
        return np.asarray(
            outcome_prob(self.cfg, x, self._m, self._l1, self._l2, outcome_site),
            dtype=np.float64,
        )

    def averaged_outcome(self, x: int, outcome_site: int, mediator_site: int) -> np.ndarray:
        fn = self.overrides.get("averaged_outcome")
        if fn is not None:
            return fn(x, self._l1, self._l2, mediator_site, outcome_site)
        pm1 = mediator_prob(self.cfg, x, self._l1, self._l2, mediator_site)
        out1 = outcome_prob(self.cfg, x, 1.0, self._l1, self._l2, outcome_site)
        out0 = outcome_prob(self.cfg, x, 0.0, self._l1, self._l2, outcome_site)
        return np.asarray(pm1 * out1 + (1.0 - pm1) * out0, dtype=np.float64)

    def exposure_given_mediator(self, x: int, site: int, raw: bool = False) -> np.ndarray:
        fn = self.overrides.get("exposure_given_mediator")
        if fn is not None:
            return self._clip(fn(x, self._m, self._l1, self._l2, site), raw)
        px = self.cfg.exposure_prob
        lik1 = np.where(
            self._m == 1.0,
            mediator_prob(self.cfg, 1, self._l1, self._l2, site),
            1.0 - mediator_prob(self.cfg, 1, self._l1, self._l2, site),
        ) * px
        lik0 = np.where(
            self._m == 1.0,
            mediator_prob(self.cfg, 0, self._l1, self._l2, site),
            1.0 - mediator_prob(self.cfg, 0, self._l1, self._l2, site),
        ) * (1.0 - px)
        p_x1 = lik1 / (lik1 + lik0)
        return self._clip(p_x1 if x == 1 else 1.0 - p_x1, raw)

    def _site_given_mediator_all(self) -> np.ndarray:
        cols = []
        for s in self.cfg.sites:
            pm = mediator_marginal_given_covariates(self.cfg, self._m, self._l1, self._l2, s)
            cols.append(pm)
        lik = np.stack(cols, axis=-1)
        prior = site_probabilities(self.cfg, self._l1, self._l2)
        joint = lik * prior
        return joint / np.sum(joint, axis=-1, keepdims=True)

    def site_given_mediator(self, site: int, raw: bool = False) -> np.ndarray:
        fn = self.overrides.get("site_given_mediator")
        if fn is not None:
            return self._clip(fn(site, self._m, self._l1, self._l2), raw)
        idx = self.cfg.sites.index(site)
        return self._clip(self._site_given_mediator_all()[..., idx], raw)

    def site_given_covariates(self, site: int, raw: bool = False) -> np.ndarray:
        fn = self.overrides.get("site_given_covariates")
        if fn is not None:
            return self._clip(fn(site, self._l1, self._l2), raw)
        idx = self.cfg.sites.index(site)
        return self._clip(site_probabilities(self.cfg, self._l1, self._l2)[..., idx], raw)

    def exposure_prob(self, x: int, site: int, raw: bool = False) -> np.ndarray:
        fn = self.overrides.get("exposure_prob")
        if fn is not None:
            return self._clip(fn(x, self._l1, self._l2, site), raw)
        p = self.cfg.exposure_prob if x == 1 else 1.0 - self.cfg.exposure_prob
        return self._clip(np.full(self.ds.n_records, p), raw)

    def site_share(self, site: int) -> float:
        return self._share[site]


def oracle_nuisances(
    ds: Dataset,
    cfg: DGPConfig = DGPConfig(),
    truncation: float = 0.01,
    record_weights: Optional[np.ndarray] = None,
) -> OracleNuisanceSet:
    return OracleNuisanceSet(ds, cfg, truncation=truncation, record_weights=record_weights)


# ---------------------------------------------------------------------------
# Misspecification harness (fixed wrong functions with bounded probabilities)


def _junk_outcome_mean(x, m, l1, l2, site):
    return expit(0.4 - 0.3 * np.asarray(x) + 0.2 * np.asarray(m) - 0.1 * np.asarray(l1))


def _junk_averaged_outcome(x, l1, l2, mediator_site, outcome_site):
    return expit(-0.9 + 0.2 * np.asarray(x) + 0.15 * np.asarray(l2))


def _junk_exposure_given_mediator(x, m, l1, l2, site):
    q = expit(0.3 + 0.25 * np.asarray(m) - 0.2 * np.asarray(l1))
    return q if x == 1 else 1.0 - q


def _junk_site_scores(sites, feats):
    scores = np.stack([0.15 * s + feats * ((-1.0) ** s) for s in sites], axis=-1)
    w = np.exp(scores)
    return w / np.sum(w, axis=-1, keepdims=True)


def _make_junk_site_given_mediator(sites):
    def fn(site, m, l1, l2):
        feats = 0.2 * np.asarray(m) - 0.1 * np.asarray(l1)
        return _junk_site_scores(sites, feats)[..., sites.index(site)]

    return fn


def _make_junk_site_given_covariates(sites):
    def fn(site, l1, l2):
        feats = 0.15 * np.asarray(l1) + 0.1 * np.asarray(l2)
        return _junk_site_scores(sites, feats)[..., sites.index(site)]

    return fn


def _junk_exposure_prob(x, l1, l2, site):
    q = expit(-0.3 + 0.2 * np.asarray(l1))
    return q if x == 1 else 1.0 - q


SCENARIOS = ("all_correct", "wrong_weights", "wrong_outcomes", "wrong_ratios")


def scenario_nuisances(
    ds: Dataset, cfg: DGPConfig, scenario: str, truncation: float = 0.01
) -> OracleNuisanceSet:
    """Oracle nuisances with chosen components replaced by fixed wrong ones.

    wrong_weights:  membership/exposure weight models wrong, outcome models true
    wrong_outcomes: outcome models wrong, all weight models true
    wrong_ratios:   mediator-density-ratio weights and the iterated mean wrong;
                    site/exposure weights and the outcome model true
    """
    sites = list(ds.site_labels)
    junk = {
        "outcome_mean": _junk_outcome_mean,
        "averaged_outcome": _junk_averaged_outcome,
        "exposure_given_mediator": _junk_exposure_given_mediator,
        "site_given_mediator": _make_junk_site_given_mediator(sites),
        "site_given_covariates": _make_junk_site_given_covariates(sites),
        "exposure_prob": _junk_exposure_prob,
    }
    if scenario == "all_correct":
        overrides = {}
    elif scenario == "wrong_weights":
        overrides = {
            k: junk[k]
            for k in (
                "exposure_given_mediator",
                "site_given_mediator",
                "site_given_covariates",
                "exposure_prob",
            )
        }
    elif scenario == "wrong_outcomes":
        overrides = {k: junk[k] for k in ("outcome_mean", "averaged_outcome")}
    elif scenario == "wrong_ratios":
        overrides = {
            k: junk[k]
            for k in ("exposure_given_mediator", "site_given_mediator", "averaged_outcome")
        }
    else:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    return OracleNuisanceSet(
        ds, cfg, truncation=truncation, overrides=overrides, empirical_site_share=True
    )
