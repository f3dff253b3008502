"""Command-line front end.

Three subcommands cover the batch workflow:

  estimate   read a multi-site CSV, fit nuisances, write the effect grid
  decompose  read a grid file, run the heterogeneity assessments
  simulate   run the replication study on the built-in synthetic process
             (or just emit one synthetic dataset with --emit-data)

Every run writes a manifest.json echoing the resolved configuration, the seed,
and the package version, so outputs can be reproduced bit-identically. Options
can also come from a key=value config file (--config); unknown keys there are
rejected. Explicit command-line flags win over config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    positivity_diagnostics,
    read_dataset_csv,
    spec_for_dataset,
    write_dataset_csv,
    write_positivity_json,
    EstimandSpec,
)
from .errors import (
    ConfigError,
    DataError,
    IncompleteGrid,
    InvalidFoldCount,
    NegativeVariance,
    NoExposedRecordsInSite,
    NonPositiveRisk,
    NoTargetRecords,
    UnknownAnchorSite,
)
from .estimators import (
    grid_from_json_dict,
    transport_grid,
    write_grid_csv,
    write_grid_json,
)
from .heterogeneity import (
    McmcConfig,
    heterogeneity_table,
    np_decompose,
    re_model_fit,
    summary_effect,
)
from .learners import parse_learner
from .nuisance import fit_nuisance_set, make_folds
from .simulation import DGPConfig, dgp_sample
from .study import (
    StudyConfig,
    replication_stream,
    run_study,
    write_heterogeneity_table_csv,
    write_metrics_panels_csv,
    write_replications_csv,
)

_ESTIMATOR_ALIASES = {
    "gcomp": "gcomp",
    "weighting": "weighting",
    "wreg": "weighting_regression",
    "onestep": "onestep",
}

# keys accepted in a --config file, per subcommand dest name
_CONFIG_KEYS = {
    "input", "target", "mediator_sources", "outcome_sources", "estimator",
    "learner", "truncation", "crossfit", "clamp_risk", "re_model",
    "iterations", "burn_in", "chains", "seed", "out", "workers",
    "sizes", "reps", "emit_data", "n", "grid", "size_weighted",
    "anchor_outcome", "anchor_mediator",
}

_BOOL_KEYS = {"clamp_risk", "re_model", "emit_data", "size_weighted"}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean config value {raw!r}")


def read_config_file(path) -> dict:
    """key = value lines; blank lines and #-comments ignored."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = raw.strip()
    return values


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Fill in None-valued args from the config file, then hard defaults.

    argparse leaves every option at None unless given on the command line, so
    precedence is: explicit flag > config file > built-in default.
    """
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, default in parser_defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in file_values:
            raw = file_values[key]
            if key in _BOOL_KEYS:
                setattr(args, key, _parse_bool(raw))
            elif isinstance(default, int) and not isinstance(default, bool):
                setattr(args, key, int(raw))
            elif isinstance(default, float):
                setattr(args, key, float(raw))
            else:
                setattr(args, key, raw)
        else:
            setattr(args, key, default)
    unknown_here = set(file_values) - set(parser_defaults)
    if unknown_here:
        names = ", ".join(sorted(unknown_here))
        raise ConfigError(f"config keys not used by this subcommand: {names}")


def _parse_site_list(raw) -> tuple:
    if raw is None:
        return None
    if isinstance(raw, (tuple, list)):
        return tuple(int(v) for v in raw)
    parts = [p for p in str(raw).replace(",", " ").split() if p]
    if not parts:
        raise ConfigError("empty site list")
    return tuple(int(p) for p in parts)


def _resolved_config(args: argparse.Namespace, keys) -> dict:
    out = {}
    for key in keys:
        v = getattr(args, key)
        if isinstance(v, Path):
            v = str(v)
        out[key] = v
    return out


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "package_version": __version__,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# estimate


_ESTIMATE_DEFAULTS = {
    "input": None, "target": None, "mediator_sources": None,
    "outcome_sources": None, "estimator": "onestep", "learner": "interactions",
    "truncation": 0.01, "crossfit": 0, "clamp_risk": False, "seed": 0,
    "out": "transport-out",
}


def cmd_estimate(args: argparse.Namespace) -> int:
    _apply_config(args, _ESTIMATE_DEFAULTS)
    if args.input is None or args.target is None:
        raise ConfigError("estimate needs --input and --target")
    ds = read_dataset_csv(args.input, target=int(args.target))
    med = _parse_site_list(args.mediator_sources)
    out_sites = _parse_site_list(args.outcome_sources)
    if med is None and out_sites is None:
        spec = spec_for_dataset(ds)
    else:
        spec = EstimandSpec(
            target=ds.target,
            mediator_sources=med if med is not None else ds.source_sites,
            outcome_sources=out_sites if out_sites is not None else ds.source_sites,
        )
        spec.validate_against(ds)
    learner = parse_learner(args.learner)
    folds = None
    if int(args.crossfit) > 1:
        folds = make_folds(ds.n_records, int(args.crossfit), seed=int(args.seed))
    nuis = fit_nuisance_set(
        ds, spec, learner=learner, folds=folds, truncation=float(args.truncation)
    )
    method = _ESTIMATOR_ALIASES[args.estimator]
    grid = transport_grid(ds, spec, nuis, method=method, clamp=bool(args.clamp_risk))

    out = _out_dir(args)
    write_grid_json(grid, out / "grid.json")
    write_grid_csv(grid, out / "grid.csv")
    report = positivity_diagnostics(ds, spec, nuis, bound=float(args.truncation))
    write_positivity_json(report, out / "positivity.json")
    _write_manifest(out, "estimate", _resolved_config(args, _ESTIMATE_DEFAULTS))

    for key in grid.cell_order():
        cell = grid.cells[key]
        line = f"outcome-site {key[0]}  mediator-site {key[1]}  log-rr {cell.value:+.4f}"
        if cell.se is not None:
            lo, hi = cell.confidence_interval()
            line += f"  95% CI [{lo:+.4f}, {hi:+.4f}]"
        print(line)
    if report.flagged_pairs:
        print("positivity warning for (outcome-site, mediator-site) pairs: "
              + ", ".join(str(t) for t in report.flagged_pairs))
    if grid.failures:
        for key, reason in sorted(grid.failures.items()):
            print(f"cell {key}: {reason}", file=sys.stderr)
        print(f"grid incomplete: {len(grid.failures)} cell(s) failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# decompose


_DECOMPOSE_DEFAULTS = {
    "grid": None, "size_weighted": False, "re_model": False,
    "iterations": 10000, "burn_in": 2000, "chains": 2, "seed": 0,
    "anchor_outcome": None, "anchor_mediator": None, "out": "transport-out",
}


def cmd_decompose(args: argparse.Namespace) -> int:
    _apply_config(args, _DECOMPOSE_DEFAULTS)
    if args.grid is None:
        raise ConfigError("decompose needs --grid (a grid.json from `estimate`)")
    with open(args.grid) as fh:
        grid = grid_from_json_dict(json.load(fh))
    dec = np_decompose(grid, size_weighted=bool(args.size_weighted))
    out = _out_dir(args)
    with open(out / "decomposition.json", "w") as fh:
        json.dump(dec.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    posterior = None
    if args.re_model:
        posterior = re_model_fit(
            grid,
            McmcConfig(
                iterations=int(args.iterations),
                burn_in=int(args.burn_in),
                chains=int(args.chains),
                seed=int(args.seed),
            ),
        )
        with open(out / "posterior.json", "w") as fh:
            json.dump(posterior.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    assessment = posterior if posterior is not None else dec
    anchor_k = None if args.anchor_outcome is None else int(args.anchor_outcome)
    anchor_p = None if args.anchor_mediator is None else int(args.anchor_mediator)
    summary = summary_effect(
        grid, assessment, anchor_outcome=anchor_k, anchor_mediator=anchor_p
    )
    with open(out / "summary.json", "w") as fh:
        json.dump(summary.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "decompose", _resolved_config(args, _DECOMPOSE_DEFAULTS))

    print(heterogeneity_table(dec, posterior))
    print()
    anchor_bits = []
    if anchor_k is not None:
        anchor_bits.append(f"outcome-site {anchor_k}")
    if anchor_p is not None:
        anchor_bits.append(f"mediator-site {anchor_p}")
    label = "summary effect" + (f" anchored at {', '.join(anchor_bits)}" if anchor_bits else "")
    print(f"{label}: {summary.value:+.4f} [{summary.ci_lower:+.4f}, {summary.ci_upper:+.4f}] ({summary.method})")
    print(summary.caveat)
    return 0


# ---------------------------------------------------------------------------
# simulate


_SIMULATE_DEFAULTS = {
    "sizes": "1000,5000,10000", "reps": 500, "seed": 0, "estimator": "onestep",
    "learner": "super(mean,logistic,interactions;cv=3)", "truncation": 0.01,
    "crossfit": 0, "re_model": True, "iterations": 3000, "burn_in": 600,
    "chains": 2, "workers": 0, "emit_data": False, "n": 1000,
    "out": "study-out",
}


def cmd_simulate(args: argparse.Namespace) -> int:
    _apply_config(args, _SIMULATE_DEFAULTS)
    out = _out_dir(args)
    if args.emit_data:
        # same stream as the study's replication 0 at this size, so a grid
        # estimated from the emitted file matches the study's internal grid
        ds = dgp_sample(
            int(args.n), DGPConfig(), seed=replication_stream(int(args.seed), int(args.n), 0)
        )
        write_dataset_csv(ds, out / "data.csv")
        _write_manifest(out, "simulate", _resolved_config(args, _SIMULATE_DEFAULTS))
        print(f"wrote {out / 'data.csv'} ({ds.n_records} records, target site {ds.target})")
        return 0

    sizes = tuple(int(s) for s in str(args.sizes).replace(",", " ").split())
    workers = int(args.workers)
    if workers <= 0:
        import os

        workers = os.cpu_count() or 1
    cfg = StudyConfig(
        sizes=sizes,
        replications=int(args.reps),
        seed=int(args.seed),
        estimator=_ESTIMATOR_ALIASES[args.estimator],
        learner=parse_learner(args.learner),
        truncation=float(args.truncation),
        crossfit_folds=int(args.crossfit),
        re_model=bool(args.re_model),
        mcmc_iterations=int(args.iterations),
        mcmc_burn_in=int(args.burn_in),
        mcmc_chains=int(args.chains),
        workers=workers,
    )
    result = run_study(cfg, progress=True)
    with open(out / "metrics.json", "w") as fh:
        json.dump(result.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_replications_csv(result, out / "replications.csv")
    write_metrics_panels_csv(result, out / "metrics_panels.csv")
    write_heterogeneity_table_csv(result, out / "heterogeneity_table.csv")
    _write_manifest(out, "simulate", _resolved_config(args, _SIMULATE_DEFAULTS))
    for size, m in result.metrics.items():
        print(
            f"n={size}: coverage {m.coverage_mean:.3f}, root-n bias {m.root_n_bias_mean:+.4f}, "
            f"scaled mse {m.scaled_mse_mean:.4f}, failures {m.n_failed}/{m.n_replications}"
        )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sitetransport",
        description="Transported exposure effects across data sources, with heterogeneity decomposition.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    pe = sub.add_parser("estimate", help="fit nuisances and write the transported-effect grid")
    pe.add_argument("--input", help="multi-site CSV (site,x,m,y,covariates; NA in target rows)")
    pe.add_argument("--target", type=int, help="target site label")
    pe.add_argument("--mediator-sources", help="comma-separated site labels (default: all non-target)")
    pe.add_argument("--outcome-sources", help="comma-separated site labels (default: all non-target)")
    pe.add_argument("--estimator", choices=sorted(_ESTIMATOR_ALIASES), help="default onestep")
    pe.add_argument("--learner", help='e.g. "interactions" or "super(mean,logistic,interactions;cv=5)"')
    pe.add_argument("--truncation", type=float, help="probability clipping bound (default 0.01)")
    pe.add_argument("--crossfit", type=int, metavar="Q", help="cross-fitting folds (0 or 1 = off)")
    pe.add_argument("--clamp-risk", action="store_const", const=True, help="clamp non-positive risks instead of failing the cell")
    pe.add_argument("--seed", type=int, help="seed for fold assignment")
    pe.add_argument("--out", help="output directory (default transport-out)")
    pe.add_argument("--config", help="key=value config file")
    pe.set_defaults(func=cmd_estimate, _defaults=_ESTIMATE_DEFAULTS)

    pd = sub.add_parser("decompose", help="heterogeneity decomposition of a saved grid")
    pd.add_argument("--grid", help="grid.json written by `estimate`")
    pd.add_argument("--size-weighted", action="store_const", const=True, help="weight cells by source-site record counts")
    pd.add_argument("--re-model", action="store_const", const=True, help="also fit the Bayesian random-effects model")
    pd.add_argument("--iterations", type=int, help="MCMC iterations per chain (default 10000)")
    pd.add_argument("--burn-in", type=int, help="burn-in per chain (default 2000)")
    pd.add_argument("--chains", type=int, help="number of chains (default 2)")
    pd.add_argument("--seed", type=int, help="MCMC seed")
    pd.add_argument("--anchor-outcome", type=int, metavar="K0", help="anchor the summary at this outcome site")
    pd.add_argument("--anchor-mediator", type=int, metavar="P0", help="anchor the summary at this mediator site")
    pd.add_argument("--out", help="output directory (default transport-out)")
    pd.add_argument("--config", help="key=value config file")
    pd.set_defaults(func=cmd_decompose, _defaults=_DECOMPOSE_DEFAULTS)

    ps = sub.add_parser("simulate", help="replication study on the synthetic five-site process")
    ps.add_argument("--sizes", help="comma-separated sample sizes (default 1000,5000,10000)")
    ps.add_argument("--reps", type=int, help="replications per size (default 500)")
    ps.add_argument("--seed", type=int, help="master seed")
    ps.add_argument("--estimator", choices=sorted(_ESTIMATOR_ALIASES))
    ps.add_argument("--learner", help="nuisance learner spec")
    ps.add_argument("--truncation", type=float)
    ps.add_argument("--crossfit", type=int, metavar="Q")
    ps.add_argument("--re-model", action="store_const", const=True)
    ps.add_argument("--no-re-model", dest="re_model", action="store_const", const=False)
    ps.add_argument("--iterations", type=int, help="study MCMC iterations (default 3000)")
    ps.add_argument("--burn-in", type=int)
    ps.add_argument("--chains", type=int)
    ps.add_argument("--workers", type=int, help="parallel workers (default: cpu count)")
    ps.add_argument("--emit-data", action="store_const", const=True, help="write one synthetic dataset CSV and exit")
    ps.add_argument("--n", type=int, help="records for --emit-data (default 1000)")
    ps.add_argument("--out", help="output directory (default study-out)")
    ps.add_argument("--config", help="key=value config file")
    ps.set_defaults(func=cmd_simulate, _defaults=_SIMULATE_DEFAULTS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UnknownAnchorSite as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 1
    except (
        DataError,
        InvalidFoldCount,
        NegativeVariance,
        IncompleteGrid,
        NoTargetRecords,
        NoExposedRecordsInSite,
        NonPositiveRisk,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
