"""Decomposing disagreement among transported effect estimates.

Two routes. The nonparametric route applies the law of total variance to the
effect grid: variation of row means (rows = outcome sites) is the
outcome-related share, average within-row variation (columns = mediator sites)
is the mediator-related share, and the two add up to the total exactly. The
model-based route fits a two-way random-effects model by Gibbs sampling, with
the grid's sampling covariance treated as known residual covariance, and
reports posterior medians.

Variance of a set of bitwise-identical values is returned as exact 0.0 rather
than trusting float summation: the mean of five identical doubles can round,
and a genuine zero matters downstream (share computations, no-heterogeneity
sentinel).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import (
    ChainNotConverged,
    ConfigError,
    IncompleteGrid,
    NegativeVariance,
    UnknownAnchorSite,
)
from .estimators import TransportGrid

PRIOR_SUMMARY_VARIANCE = 1000.0
PRIOR_VARIANCE_UPPER = 100.0
SLICE_WIDTH = 1.0
RHAT_THRESHOLD = 1.05


class _NoHeterogeneity:
    """Sentinel for share computations when both variance components are 0."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "no-heterogeneity"


NO_HETEROGENEITY = _NoHeterogeneity()


def i2_shares(omega2: float, zeta2: float):
    """Relative shares of the two heterogeneity sources, or the sentinel."""
    if omega2 < 0 or zeta2 < 0:
        raise NegativeVariance(f"variance components must be >= 0, got {omega2}, {zeta2}")
    total = omega2 + zeta2
    if total == 0:
        return NO_HETEROGENEITY
    return omega2 / total, zeta2 / total


def _exact_weighted_variance(values: np.ndarray, weights: np.ndarray, center: float) -> float:
    if np.all(values == values.flat[0]):
        return 0.0
    return float(np.sum(weights * (values - center) ** 2))


@dataclass
class NPDecomposition:
    """Law-of-total-variance split of a complete effect grid."""

    outcome_sites: tuple
    mediator_sites: tuple
    row_weights: np.ndarray
    col_weights: np.ndarray
    grand_mean: float
    row_means: np.ndarray
    col_means: np.ndarray
    total: float
    outcome_related: float
    mediator_related: float
    noise: Optional[float]

    def shares(self):
        return i2_shares(self.outcome_related, self.mediator_related)

    def to_json_dict(self) -> dict:
        shares = self.shares()
        if shares is NO_HETEROGENEITY:
            share_y = share_m = None
        else:
            share_y, share_m = shares
        return {
            "outcome_sites": list(self.outcome_sites),
            "mediator_sites": list(self.mediator_sites),
            "row_weights": self.row_weights.tolist(),
            "col_weights": self.col_weights.tolist(),
            "grand_mean": self.grand_mean,
            "row_means": self.row_means.tolist(),
            "col_means": self.col_means.tolist(),
            "total": self.total,
            "outcome_related": self.outcome_related,
            "mediator_related": self.mediator_related,
            "noise": self.noise,
            "share_outcome_related": share_y,
            "share_mediator_related": share_m,
        }


def _as_matrix_and_sites(grid: Union[TransportGrid, np.ndarray]):
    if isinstance(grid, TransportGrid):
        grid.require_complete()
        mat = grid.log_rr_matrix()
        return mat, grid.outcome_sites, grid.mediator_sites, grid
    mat = np.asarray(grid, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ValueError("grid must be a 2-d matrix or a TransportGrid")
    if np.isnan(mat).any():
        raise IncompleteGrid("grid matrix contains missing cells")
    rows = tuple(range(mat.shape[0]))
    cols = tuple(range(mat.shape[1]))
    return mat, rows, cols, None


def _normalized(weights, n: int, what: str) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"{what} must be {n} nonnegative weights with positive sum")
    return w / w.sum()


def np_decompose(
    grid: Union[TransportGrid, np.ndarray],
    row_weights=None,
    col_weights=None,
    size_weighted: bool = False,
) -> NPDecomposition:
    """Split the grid's variability into outcome- and mediator-related parts.

    Uniform weights by default; `size_weighted=True` weighs each site by its
    record count (TransportGrid input only); explicit weight vectors win over
    both. The total is computed from its own grand-mean formula, not as the
    sum of the parts, so additivity stays a checkable property. `noise` is the
    weighted mean of squared cell standard errors when the grid carries them.
    """
    mat, rows, cols, tgrid = _as_matrix_and_sites(grid)
    K, P = mat.shape
    if size_weighted and tgrid is not None and row_weights is None and col_weights is None:
        rw, cw = tgrid.size_weights()
    else:
        rw = _normalized(row_weights, K, "row_weights")
        cw = _normalized(col_weights, P, "col_weights")

    row_means = mat @ cw
    col_means = rw @ mat
    grand = float(rw @ row_means)

    mediator_related = float(
        np.sum(rw * [_exact_weighted_variance(mat[i], cw, row_means[i]) for i in range(K)])
    )
    outcome_related = _exact_weighted_variance(row_means, rw, grand)
    if np.all(mat == mat.flat[0]):
        total = 0.0
    else:
        total = float(np.sum((rw[:, None] * cw[None, :]) * (mat - grand) ** 2))

    noise = None
    if tgrid is not None:
        ses = tgrid.se_matrix()
        if not np.isnan(ses).any():
            noise = float(np.sum((rw[:, None] * cw[None, :]) * ses**2))

    return NPDecomposition(
        outcome_sites=rows,
        mediator_sites=cols,
        row_weights=rw,
        col_weights=cw,
        grand_mean=grand,
        row_means=np.asarray(row_means),
        col_means=np.asarray(col_means),
        total=total,
        outcome_related=outcome_related,
        mediator_related=mediator_related,
        noise=noise,
    )


# ---------------------------------------------------------------------------
# Random-effects model, fitted by MCMC


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 10000
    burn_in: int = 2000
    chains: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ConfigError("need 0 <= burn_in < iterations")
        if self.chains < 1:
            raise ConfigError("need at least one chain")


def _slice_sample_variance(log_density, current: float, rng) -> float:
    """One slice-sampling update on (0, upper] with doubling (Neal 2003)."""
    upper = PRIOR_VARIANCE_UPPER
    f0 = log_density(current)
    log_y = f0 + np.log(rng.random())
    # initial bracket of width SLICE_WIDTH around the current point
    left = current - SLICE_WIDTH * rng.random()
    right = left + SLICE_WIDTH
    # doubling until both ends are outside the slice (or the support)
    for _ in range(64):
        grew = False
        if left > 0 and log_density(left) > log_y:
            left -= (right - left)
            grew = True
        elif right < upper and log_density(right) > log_y:
            right += (right - left)
            grew = True
        if not grew:
            break
    left = max(left, 0.0)
    right = min(right, upper)
    # shrinkage with the doubling acceptance test
    for _ in range(1000):
        prop = left + (right - left) * rng.random()
        if log_density(prop) > log_y and _doubling_accepts(log_density, current, prop, left, right, log_y):
            return prop
        if prop < current:
            left = prop
        else:
            right = prop
    return current


def _doubling_accepts(log_density, x0, x1, left, right, log_y) -> bool:
    """Neal's acceptance check undoing the doubling procedure."""
    d = False
    while right - left > 1.1 * SLICE_WIDTH:
        mid = 0.5 * (left + right)
        if (x0 < mid) != (x1 < mid):
            d = True
        if x1 < mid:
            right = mid
        else:
            left = mid
        if d and log_density(left) <= log_y and log_density(right) <= log_y:
            return False
    return True


def _variance_log_density(ssq: float, count: int):
    def log_density(v: float) -> float:
        if v <= 0.0 or v > PRIOR_VARIANCE_UPPER:
            return -np.inf
        return -0.5 * count * np.log(v) - 0.5 * ssq / v

    return log_density


@dataclass
class REPosterior:
    """Posterior draws (burn-in removed, chains concatenated, effects centered)."""

    outcome_sites: tuple
    mediator_sites: tuple
    summary_draws: np.ndarray        # overall effect, per draw
    outcome_effect_draws: np.ndarray  # (draws, K), sum-to-zero per draw
    mediator_effect_draws: np.ndarray  # (draws, P)
    outcome_var_draws: np.ndarray
    mediator_var_draws: np.ndarray
    rhat: dict
    config: McmcConfig
    converged: bool

    @property
    def summary_median(self) -> float:
        return float(np.median(self.summary_draws))

    @property
    def outcome_related(self) -> float:
        return float(np.median(self.outcome_var_draws))

    @property
    def mediator_related(self) -> float:
        return float(np.median(self.mediator_var_draws))

    def credible_interval(self, draws: np.ndarray, level: float = 0.95):
        lo = (1.0 - level) / 2.0
        return (float(np.quantile(draws, lo)), float(np.quantile(draws, 1.0 - lo)))

    def to_json_dict(self) -> dict:
        s_lo, s_hi = self.credible_interval(self.summary_draws)
        o_lo, o_hi = self.credible_interval(self.outcome_var_draws)
        m_lo, m_hi = self.credible_interval(self.mediator_var_draws)
        return {
            "outcome_sites": list(self.outcome_sites),
            "mediator_sites": list(self.mediator_sites),
            "summary_median": self.summary_median,
            "summary_ci": [s_lo, s_hi],
            "outcome_related_median": self.outcome_related,
            "outcome_related_ci": [o_lo, o_hi],
            "mediator_related_median": self.mediator_related,
            "mediator_related_ci": [m_lo, m_hi],
            "outcome_effect_medians": np.median(self.outcome_effect_draws, axis=0).tolist(),
            "mediator_effect_medians": np.median(self.mediator_effect_draws, axis=0).tolist(),
            "rhat": {k: (None if np.isnan(v) else v) for k, v in self.rhat.items()},
            "converged": self.converged,
            "iterations": self.config.iterations,
            "burn_in": self.config.burn_in,
            "chains": self.config.chains,
            "seed": self.config.seed,
        }


def _split_rhat(chains: list[np.ndarray]) -> float:
    """Potential scale reduction on split chains."""
    halves = []
    for c in chains:
        half = len(c) // 2
        if half < 2:
            return float("nan")
        halves.append(c[:half])
        halves.append(c[half : 2 * half])
    m = len(halves)
    n = len(halves[0])
    means = np.array([h.mean() for h in halves])
    vars_ = np.array([h.var(ddof=1) for h in halves])
    w = vars_.mean()
    b = n * means.var(ddof=1)
    if w <= 0:
        return 1.0
    return float(np.sqrt((n - 1) / n + b / (n * w)))


def re_model_fit(
    grid: TransportGrid,
    mcmc: McmcConfig = McmcConfig(),
    residual_covariance: Optional[np.ndarray] = None,
) -> REPosterior:
    """Gibbs sampler for the two-way random-effects model on the grid.

    Per draw: the summary effect and both random-effect vectors are drawn
    jointly from their conjugate normal conditional (flat-ish normal prior on
    the summary, scale set by the current variance components); each variance
    component then takes one slice-sampling step under its uniform prior. The
    residual covariance is the grid's influence-function covariance, held
    fixed. The chain runs on the centered parameterization: after each joint
    draw the factor means are swept into the summary level (sum-to-zero within
    each factor), so the variance updates see centered effects. Split-chain
    potential scale reduction above 1.05 on any scalar triggers a
    ChainNotConverged warning and marks the posterior as unconverged.
    """
    grid.require_complete()
    if residual_covariance is not None:
        sigma = np.asarray(residual_covariance, dtype=np.float64)
    elif grid.covariance is not None:
        sigma = grid.covariance
    else:
        raise ConfigError(
            "the random-effects model needs a residual covariance; fit the grid "
            "with the onestep estimator or pass residual_covariance explicitly"
        )
    order = grid.cell_order()
    m = len(order)
    if sigma.shape != (m, m):
        raise ConfigError(f"residual covariance must be {m}x{m}, got {sigma.shape}")
    y = np.array([grid.cells[key].value for key in order])
    K = len(grid.outcome_sites)
    P = len(grid.mediator_sites)
    X = np.zeros((m, 1 + K + P))
    X[:, 0] = 1.0
    row_of = {k: i for i, k in enumerate(grid.outcome_sites)}
    col_of = {p: i for i, p in enumerate(grid.mediator_sites)}
    for i, (k, p) in enumerate(order):
        X[i, 1 + row_of[k]] = 1.0
        X[i, 1 + K + col_of[p]] = 1.0

    # factor the residual covariance once; escalate jitter if near-singular
    scale = float(np.mean(np.diag(sigma))) or 1.0
    jitter = 0.0
    for attempt in range(8):
        try:
            cf = cho_factor(sigma + jitter * np.eye(m), lower=False)
            break
        except np.linalg.LinAlgError:
            jitter = scale * (1e-12 * 10**attempt)
    else:
        raise ConfigError("residual covariance is not positive definite")
    sigma_inv_X = cho_solve(cf, X)
    xtsx = X.T @ sigma_inv_X
    xtsy = X.T @ cho_solve(cf, y)

    n_keep = mcmc.iterations - mcmc.burn_in
    per_chain = {
        "summary": [], "gamma": [], "delta": [], "omega2": [], "zeta2": [],
    }
    seeds = np.random.SeedSequence(mcmc.seed).spawn(mcmc.chains)
    for chain_idx in range(mcmc.chains):
        rng = np.random.default_rng(seeds[chain_idx])
        omega2 = 0.5 if chain_idx % 2 == 0 else 2.0
        zeta2 = 2.0 if chain_idx % 2 == 0 else 0.5
        keep_s = np.empty(n_keep)
        keep_g = np.empty((n_keep, K))
        keep_d = np.empty((n_keep, P))
        keep_o = np.empty(n_keep)
        keep_z = np.empty(n_keep)
        for it in range(mcmc.iterations):
            prior_prec = np.concatenate(
                [[1.0 / PRIOR_SUMMARY_VARIANCE], np.full(K, 1.0 / omega2), np.full(P, 1.0 / zeta2)]
            )
            A = xtsx + np.diag(prior_prec)
            ucf = cho_factor(A, lower=False)
            mean = cho_solve(ucf, xtsy)
            z = rng.standard_normal(1 + K + P)
            beta = mean + solve_triangular(ucf[0], z, lower=False)
            # sweep factor means into the summary level right away: the mean
            # structure is only identified up to location shifts, and leaving
            # the shift in the effects inflates their sums of squares, which
            # the variance updates would then absorb
            gamma = beta[1 : 1 + K]
            delta = beta[1 + K :]
            g_bar = gamma.mean()
            d_bar = delta.mean()
            summary = beta[0] + g_bar + d_bar
            gamma = gamma - g_bar
            delta = delta - d_bar
            omega2 = _slice_sample_variance(
                _variance_log_density(float(np.sum(gamma**2)), K), omega2, rng
            )
            zeta2 = _slice_sample_variance(
                _variance_log_density(float(np.sum(delta**2)), P), zeta2, rng
            )
            if it >= mcmc.burn_in:
                idx = it - mcmc.burn_in
                keep_s[idx] = summary
                keep_g[idx] = gamma
                keep_d[idx] = delta
                keep_o[idx] = omega2
                keep_z[idx] = zeta2
        per_chain["summary"].append(keep_s)
        per_chain["gamma"].append(keep_g)
        per_chain["delta"].append(keep_d)
        per_chain["omega2"].append(keep_o)
        per_chain["zeta2"].append(keep_z)

    rhat = {
        "summary": _split_rhat(per_chain["summary"]),
        "outcome_related": _split_rhat(per_chain["omega2"]),
        "mediator_related": _split_rhat(per_chain["zeta2"]),
    }
    finite = [v for v in rhat.values() if np.isfinite(v)]
    converged = all(v <= RHAT_THRESHOLD for v in finite) if finite else True
    if not converged:
        worst = max(finite)
        warnings.warn(
            f"chains disagree (worst split-chain diagnostic {worst:.3f} > {RHAT_THRESHOLD});"
            " consider more iterations",
            ChainNotConverged,
        )
    return REPosterior(
        outcome_sites=grid.outcome_sites,
        mediator_sites=grid.mediator_sites,
        summary_draws=np.concatenate(per_chain["summary"]),
        outcome_effect_draws=np.vstack(per_chain["gamma"]),
        mediator_effect_draws=np.vstack(per_chain["delta"]),
        outcome_var_draws=np.concatenate(per_chain["omega2"]),
        mediator_var_draws=np.concatenate(per_chain["zeta2"]),
        rhat=rhat,
        config=mcmc,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Summary effects


@dataclass
class SummaryEffect:
    value: float
    ci_lower: float
    ci_upper: float
    method: str
    anchor_outcome: Optional[object]
    anchor_mediator: Optional[object]
    caveat: str

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "method": self.method,
            "anchor_outcome": self.anchor_outcome,
            "anchor_mediator": self.anchor_mediator,
            "caveat": self.caveat,
        }


def _heterogeneity_caveat(outcome_related, mediator_related, noise) -> str:
    if noise is None:
        return (
            "No sampling-noise estimate is available for this grid; compare the "
            "heterogeneity components to the estimates' uncertainty before pooling."
        )
    parts = []
    for label, value in (
        ("outcome-related", outcome_related),
        ("mediator-related", mediator_related),
    ):
        rel = "exceeds" if value > noise else "is below"
        parts.append(f"{label} heterogeneity ({value:.4g}) {rel} the noise ({noise:.4g})")
    tail = (
        "Pooling across sources may hide real disagreement."
        if (outcome_related > noise or mediator_related > noise)
        else "Disagreement across sources is within sampling noise."
    )
    return "; ".join(parts) + ". " + tail


def summary_effect(
    grid: TransportGrid,
    assessment,
    anchor_outcome=None,
    anchor_mediator=None,
    level: float = 0.95,
) -> SummaryEffect:
    """Pooled effect, optionally anchored at the source sites believed to
    match the target's mediator or outcome law.

    With a fitted posterior, anchoring adds the site's random effect to the
    summary draw by draw; the report is the posterior median and quantile
    interval. With only a nonparametric decomposition, no anchors are
    possible and the interval is normal-theory based on the grid covariance.
    """
    noise = None
    np_dec = assessment if isinstance(assessment, NPDecomposition) else None
    posterior = assessment if isinstance(assessment, REPosterior) else None
    if posterior is None and np_dec is None:
        raise TypeError("assessment must be an NPDecomposition or REPosterior")

    if posterior is not None:
        draws = posterior.summary_draws.copy()
        if anchor_outcome is not None:
            if anchor_outcome not in posterior.outcome_sites:
                raise UnknownAnchorSite(f"outcome site {anchor_outcome!r} not in the grid")
            idx = posterior.outcome_sites.index(anchor_outcome)
            draws = draws + posterior.outcome_effect_draws[:, idx]
        if anchor_mediator is not None:
            if anchor_mediator not in posterior.mediator_sites:
                raise UnknownAnchorSite(f"mediator site {anchor_mediator!r} not in the grid")
            idx = posterior.mediator_sites.index(anchor_mediator)
            draws = draws + posterior.mediator_effect_draws[:, idx]
        lo = (1.0 - level) / 2.0
        base = np_decompose(grid)
        caveat = _heterogeneity_caveat(
            posterior.outcome_related, posterior.mediator_related, base.noise
        )
        return SummaryEffect(
            value=float(np.median(draws)),
            ci_lower=float(np.quantile(draws, lo)),
            ci_upper=float(np.quantile(draws, 1.0 - lo)),
            method="re_model",
            anchor_outcome=anchor_outcome,
            anchor_mediator=anchor_mediator,
            caveat=caveat,
        )

    if anchor_outcome is not None or anchor_mediator is not None:
        raise UnknownAnchorSite(
            "anchored summaries need the random-effects posterior; the "
            "nonparametric decomposition has no site-effect estimates"
        )
    value = np_dec.grand_mean
    se = None
    if grid.covariance is not None:
        order = grid.cell_order()
        row_of = {k: i for i, k in enumerate(grid.outcome_sites)}
        col_of = {p: i for i, p in enumerate(grid.mediator_sites)}
        w = np.array(
            [np_dec.row_weights[row_of[k]] * np_dec.col_weights[col_of[p]] for k, p in order]
        )
        se = float(np.sqrt(w @ grid.covariance @ w))
    from .estimators import _Z95

    lo = value - _Z95 * se if se is not None else float("nan")
    hi = value + _Z95 * se if se is not None else float("nan")
    caveat = _heterogeneity_caveat(
        np_dec.outcome_related, np_dec.mediator_related, np_dec.noise
    )
    return SummaryEffect(
        value=value,
        ci_lower=lo,
        ci_upper=hi,
        method="nonparametric",
        anchor_outcome=None,
        anchor_mediator=None,
        caveat=caveat,
    )


def heterogeneity_table(
    np_dec: NPDecomposition, posterior: Optional[REPosterior] = None
) -> str:
    """Two-column text table: one row per heterogeneity type, one column per method."""
    lines = [f"{'heterogeneity':<22} {'nonparametric':>16}" + (f" {'re_model':>16}" if posterior else "")]
    rows = [
        ("mediator-related", np_dec.mediator_related, None if posterior is None else posterior.mediator_related),
        ("outcome-related", np_dec.outcome_related, None if posterior is None else posterior.outcome_related),
        ("total", np_dec.total, None),
        ("noise", np_dec.noise, None),
    ]
    for label, np_val, re_val in rows:
        nps = "" if np_val is None else f"{np_val:16.6g}"
        res = "" if re_val is None else f"{re_val:16.6g}"
        lines.append(f"{label:<22} {nps:>16}" + (f" {res:>16}" if posterior else ""))
    return "\n".join(lines)
