"""Replication study: sample, estimate, decompose, aggregate.

Each replication draws a dataset from the synthetic five-site process, fits
the nuisance stack, builds the effect grid, and runs both heterogeneity
assessments. Aggregates match the usual simulation reporting: root-N bias
(sqrt(n) times mean estimation error), sample-size-scaled mean squared error,
and 95% interval coverage, each per grid cell and averaged across cells, plus
medians and replication quantiles of the heterogeneity components.

Replications are reproducible and order-independent: every replication derives
its own random stream from (master seed, sample size, replication index), so
parallel and sequential runs give identical results.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import EstimandSpec
from .estimators import _Z95, transport_grid
from .heterogeneity import McmcConfig, np_decompose, re_model_fit
from .learners import LearnerSpec, default_super_spec
from .nuisance import FoldAssignment, fit_nuisance_set, make_folds
from .simulation import DGPConfig, default_estimand, dgp_sample, oracle_log_rr_matrix


@dataclass(frozen=True)
class StudyConfig:
    sizes: tuple[int, ...] = (1000, 5000, 10000)
    replications: int = 500
    seed: int = 0
    estimator: str = "onestep"
    learner: LearnerSpec = field(default_factory=lambda: default_super_spec(cv_folds=3))
    truncation: float = 0.01
    crossfit_folds: int = 0
    re_model: bool = True
    # shorter chains than the analysis default: the study needs many fits and
    # only ever reads posterior medians
    mcmc_iterations: int = 3000
    mcmc_burn_in: int = 600
    mcmc_chains: int = 2
    workers: int = 1
    dgp: DGPConfig = field(default_factory=DGPConfig)


@dataclass
class RepResult:
    size: int
    rep: int
    error: Optional[str] = None
    log_rr: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None
    np_outcome: Optional[float] = None
    np_mediator: Optional[float] = None
    np_noise: Optional[float] = None
    re_outcome: Optional[float] = None
    re_mediator: Optional[float] = None
    re_summary: Optional[float] = None
    n_warnings: int = 0


def replication_stream(master_seed: int, size: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((master_seed, size, rep))


def run_single_replication(cfg: StudyConfig, size: int, rep: int) -> RepResult:
    spec = default_estimand(cfg.dgp)
    result = RepResult(size=size, rep=rep)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ds = dgp_sample(size, cfg.dgp, seed=replication_stream(cfg.seed, size, rep))
            folds: Optional[FoldAssignment] = None
            if cfg.crossfit_folds and cfg.crossfit_folds > 1:
                fold_seed = int(
                    np.random.SeedSequence((cfg.seed, size, rep, 2)).generate_state(1)[0]
                )
                folds = make_folds(ds.n_records, cfg.crossfit_folds, seed=fold_seed)
            nuis = fit_nuisance_set(
                ds, spec, learner=cfg.learner, folds=folds, truncation=cfg.truncation
            )
            grid = transport_grid(ds, spec, nuis, method=cfg.estimator)
            if grid.failures:
                reasons = "; ".join(sorted(grid.failures.values()))
                result.error = f"incomplete grid: {reasons}"
                return result
            result.log_rr = grid.log_rr_matrix()
            result.se = grid.se_matrix()
            dec = np_decompose(grid)
            result.np_outcome = dec.outcome_related
            result.np_mediator = dec.mediator_related
            result.np_noise = dec.noise
            if cfg.re_model and cfg.estimator == "onestep":
                mcmc_seed = int(
                    np.random.SeedSequence((cfg.seed, size, rep, 1)).generate_state(1)[0]
                )
                post = re_model_fit(
                    grid,
                    McmcConfig(
                        iterations=cfg.mcmc_iterations,
                        burn_in=cfg.mcmc_burn_in,
                        chains=cfg.mcmc_chains,
                        seed=mcmc_seed,
                    ),
                )
                result.re_outcome = post.outcome_related
                result.re_mediator = post.mediator_related
                result.re_summary = post.summary_median
            result.n_warnings = len(caught)
    except Exception as exc:  # noqa: BLE001 - replication failures are data
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _quantiles(values: np.ndarray) -> dict:
    return {
        "median": float(np.median(values)),
        "q025": float(np.quantile(values, 0.025)),
        "q975": float(np.quantile(values, 0.975)),
    }


@dataclass
class MetricsSummary:
    """Aggregates for one sample size."""

    size: int
    n_replications: int
    n_failed: int
    truth: np.ndarray
    root_n_bias: np.ndarray       # per cell
    scaled_mse: np.ndarray        # per cell
    coverage: np.ndarray          # per cell
    root_n_bias_mean: float
    scaled_mse_mean: float
    coverage_mean: float
    np_outcome: dict
    np_mediator: dict
    re_outcome: Optional[dict]
    re_mediator: Optional[dict]
    mean_re_minus_np_outcome: Optional[float]

    def to_json_dict(self) -> dict:
        return {
            "size": self.size,
            "n_replications": self.n_replications,
            "n_failed": self.n_failed,
            "truth": self.truth.tolist(),
            "root_n_bias": self.root_n_bias.tolist(),
            "scaled_mse": self.scaled_mse.tolist(),
            "coverage": self.coverage.tolist(),
            "root_n_bias_mean": self.root_n_bias_mean,
            "scaled_mse_mean": self.scaled_mse_mean,
            "coverage_mean": self.coverage_mean,
            "np_outcome": self.np_outcome,
            "np_mediator": self.np_mediator,
            "re_outcome": self.re_outcome,
            "re_mediator": self.re_mediator,
            "mean_re_minus_np_outcome": self.mean_re_minus_np_outcome,
        }


@dataclass
class StudyResult:
    config: StudyConfig
    truth: np.ndarray
    metrics: dict          # size -> MetricsSummary
    replications: list     # RepResult, ordered by (size, rep)

    def to_json_dict(self) -> dict:
        return {
            "sizes": list(self.config.sizes),
            "replications": self.config.replications,
            "seed": self.config.seed,
            "estimator": self.config.estimator,
            "learner": self.config.learner.describe(),
            "truth": self.truth.tolist(),
            "metrics": {str(s): m.to_json_dict() for s, m in self.metrics.items()},
            "n_failed_total": sum(m.n_failed for m in self.metrics.values()),
        }


def _summarize(cfg: StudyConfig, size: int, reps: list[RepResult], truth: np.ndarray) -> MetricsSummary:
    ok = [r for r in reps if r.error is None]
    n_failed = len(reps) - len(ok)
    if not ok:
        nan_grid = np.full_like(truth, np.nan)
        return MetricsSummary(
            size=size, n_replications=len(reps), n_failed=n_failed, truth=truth,
            root_n_bias=nan_grid, scaled_mse=nan_grid, coverage=nan_grid,
            root_n_bias_mean=float("nan"), scaled_mse_mean=float("nan"),
            coverage_mean=float("nan"),
            np_outcome={}, np_mediator={}, re_outcome=None, re_mediator=None,
            mean_re_minus_np_outcome=None,
        )
    lam = np.stack([r.log_rr for r in ok])
    se = np.stack([r.se for r in ok])
    err = lam - truth[None, :, :]
    root_n_bias = np.sqrt(size) * err.mean(axis=0)
    scaled_mse = size * np.mean(err**2, axis=0)
    covered = np.abs(err) <= _Z95 * se
    coverage = covered.mean(axis=0)
    np_out = np.array([r.np_outcome for r in ok])
    np_med = np.array([r.np_mediator for r in ok])
    has_re = all(r.re_outcome is not None for r in ok) and len(ok) > 0 and cfg.re_model
    re_out = np.array([r.re_outcome for r in ok]) if has_re else None
    re_med = np.array([r.re_mediator for r in ok]) if has_re else None
    return MetricsSummary(
        size=size,
        n_replications=len(reps),
        n_failed=n_failed,
        truth=truth,
        root_n_bias=root_n_bias,
        scaled_mse=scaled_mse,
        coverage=coverage,
        root_n_bias_mean=float(root_n_bias.mean()),
        scaled_mse_mean=float(scaled_mse.mean()),
        coverage_mean=float(coverage.mean()),
        np_outcome=_quantiles(np_out),
        np_mediator=_quantiles(np_med),
        re_outcome=_quantiles(re_out) if has_re else None,
        re_mediator=_quantiles(re_med) if has_re else None,
        mean_re_minus_np_outcome=float(np.mean(re_out - np_out)) if has_re else None,
    )


def _run_one(args) -> RepResult:
    cfg, size, rep = args
    return run_single_replication(cfg, size, rep)


def run_study(cfg: StudyConfig, progress: bool = False) -> StudyResult:
    truth = oracle_log_rr_matrix(cfg.dgp)
    jobs = [(cfg, size, rep) for size in cfg.sizes for rep in range(cfg.replications)]
    results: list[RepResult] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for i, r in enumerate(pool.map(_run_one, jobs, chunksize=4)):
                results.append(r)
                if progress and (i + 1) % 25 == 0:
                    print(f"  {i + 1}/{len(jobs)} replications done", flush=True)
    else:
        for i, job in enumerate(jobs):
            results.append(_run_one(job))
            if progress and (i + 1) % 25 == 0:
                print(f"  {i + 1}/{len(jobs)} replications done", flush=True)
    results.sort(key=lambda r: (r.size, r.rep))
    metrics = {}
    for size in cfg.sizes:
        reps = [r for r in results if r.size == size]
        metrics[size] = _summarize(cfg, size, reps, truth)
    return StudyResult(config=cfg, truth=truth, metrics=metrics, replications=results)


# ---------------------------------------------------------------------------
# Delimited outputs (plot- and table-ready)


def write_replications_csv(result: StudyResult, path) -> None:
    import csv

    truth = result.truth
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "size", "rep", "error",
                "root_n_bias_mean", "scaled_mse_mean", "coverage_mean",
                "np_outcome", "np_mediator", "np_noise",
                "re_outcome", "re_mediator", "re_summary",
            ]
        )
        for r in result.replications:
            if r.error is not None:
                w.writerow([r.size, r.rep, r.error] + ["NA"] * 9)
                continue
            err = r.log_rr - truth
            rnb = float(np.sqrt(r.size) * err.mean())
            smse = float(r.size * np.mean(err**2))
            cov = float(np.mean(np.abs(err) <= _Z95 * r.se))
            row = [r.size, r.rep, "", rnb, smse, cov,
                   r.np_outcome, r.np_mediator, r.np_noise,
                   r.re_outcome, r.re_mediator, r.re_summary]
            w.writerow(["NA" if v is None else v for v in row])


def write_metrics_panels_csv(result: StudyResult, path) -> None:
    """One row per (size, panel): the three averaged performance metrics."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "panel", "value"])
        for size, m in result.metrics.items():
            w.writerow([size, "root_n_bias", m.root_n_bias_mean])
            w.writerow([size, "scaled_mse", m.scaled_mse_mean])
            w.writerow([size, "coverage", m.coverage_mean])


def write_heterogeneity_table_csv(result: StudyResult, path) -> None:
    """Medians with replication quantiles, method by heterogeneity type."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["heterogeneity", "method", "size", "median", "q025", "q975"])
        for size, m in result.metrics.items():
            rows = [
                ("mediator_related", "nonparametric", m.np_mediator),
                ("outcome_related", "nonparametric", m.np_outcome),
                ("mediator_related", "re_model", m.re_mediator),
                ("outcome_related", "re_model", m.re_outcome),
            ]
            for label, method, q in rows:
                if not q:
                    continue
                w.writerow([label, method, size, q["median"], q["q025"], q["q975"]])
