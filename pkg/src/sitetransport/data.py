"""Multi-site observational data with a covariates-only target site.

One site plays the role of the target population: its records carry baseline
covariates and nothing else. Every other site is a source and must supply
exposure, mediator, and outcome for each record. The container is columnar
(numpy arrays) with structural missingness stored as NaN; a record view is
provided for convenience.

Site labels are small non-negative integers chosen by the user (e.g. 1..5).
Internally they are remapped to dense indices 0..K-1 in sorted label order;
the public API speaks labels throughout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    EmptySite,
    MixedMissingness,
    NonBinaryField,
    SiteAbsent,
)

NA_TOKEN = "NA"


@dataclass(frozen=True)
class ObservationRecord:
    site: int
    covariates: tuple[float, ...]
    exposure: Optional[float] = None
    mediator: Optional[float] = None
    outcome: Optional[float] = None


def _is_binary(values: np.ndarray) -> bool:
    observed = values[~np.isnan(values)]
    return bool(np.all((observed == 0.0) | (observed == 1.0)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated multi-site data. Immutable; safe to share across workers."""

    site_index: np.ndarray            # (N,) dense site ids 0..K-1
    covariates: np.ndarray            # (N, d) float
    exposure: np.ndarray              # (N,) float, NaN where absent
    mediator: np.ndarray              # (N,) float, NaN where absent
    outcome: np.ndarray               # (N,) float, NaN where absent
    covariate_names: tuple[str, ...]
    site_labels: tuple[int, ...]      # dense id -> original label
    target: int                       # original label of the target site
    site_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        counts = {
            label: int(np.sum(self.site_index == idx))
            for idx, label in enumerate(self.site_labels)
        }
        object.__setattr__(self, "site_counts", counts)

    @property
    def n_records(self) -> int:
        return int(self.site_index.shape[0])

    @property
    def n_sites(self) -> int:
        return len(self.site_labels)

    @property
    def source_sites(self) -> tuple[int, ...]:
        return tuple(s for s in self.site_labels if s != self.target)

    def index_of(self, label: int) -> int:
        try:
            return self.site_labels.index(label)
        except ValueError:
            raise SiteAbsent(f"site {label} not present in dataset") from None

    def site_mask(self, label: int) -> np.ndarray:
        return self.site_index == self.index_of(label)

    def records(self) -> Iterator[ObservationRecord]:
        for i in range(self.n_records):
            x, m, y = self.exposure[i], self.mediator[i], self.outcome[i]
            yield ObservationRecord(
                site=int(self.site_labels[self.site_index[i]]),
                covariates=tuple(float(v) for v in self.covariates[i]),
                exposure=None if np.isnan(x) else float(x),
                mediator=None if np.isnan(m) else float(m),
                outcome=None if np.isnan(y) else float(y),
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.covariate_names == other.covariate_names
            and self.site_labels == other.site_labels
            and self.target == other.target
            and np.array_equal(self.site_index, other.site_index)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.exposure, other.exposure, equal_nan=True)
            and np.array_equal(self.mediator, other.mediator, equal_nan=True)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
        )


def dataset_from_arrays(
    site: Sequence[int],
    covariates: np.ndarray,
    exposure: np.ndarray,
    mediator: np.ndarray,
    outcome: np.ndarray,
    target: int,
    covariate_names: Optional[Sequence[str]] = None,
) -> Dataset:
    """Validate columnar inputs and build a Dataset.

    `site` holds raw labels; exposure/mediator/outcome use NaN for absent.
    Target rows must have all three absent, source rows all three present.
    """
    site_arr = np.asarray(site, dtype=np.int64)
    cov = np.asarray(covariates, dtype=np.float64)
    if cov.ndim == 1:
        cov = cov.reshape(-1, 1)
    x = np.asarray(exposure, dtype=np.float64).ravel()
    m = np.asarray(mediator, dtype=np.float64).ravel()
    y = np.asarray(outcome, dtype=np.float64).ravel()

    n = site_arr.shape[0]
    if n == 0:
        raise EmptySite("dataset has no records")
    if not (cov.shape[0] == x.shape[0] == m.shape[0] == y.shape[0] == n):
        raise ValueError("column lengths differ")
    if np.any(site_arr < 0):
        raise ValueError("site labels must be non-negative integers")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariates must be finite")

    labels = tuple(int(v) for v in np.unique(site_arr))
    if target not in labels:
        raise SiteAbsent(f"target site {target} not present in the data")
    label_to_dense = {lab: i for i, lab in enumerate(labels)}
    dense = np.array([label_to_dense[int(s)] for s in site_arr], dtype=np.int64)

    is_target_row = site_arr == target
    present = ~np.isnan(np.column_stack([x, m, y]))
    n_present = present.sum(axis=1)
    bad_target = is_target_row & (n_present != 0)
    if np.any(bad_target):
        i = int(np.argmax(bad_target))
        raise MixedMissingness(
            f"record {i}: target-site rows must omit exposure, mediator, outcome"
        )
    bad_source = (~is_target_row) & (n_present != 3)
    if np.any(bad_source):
        i = int(np.argmax(bad_source))
        raise MixedMissingness(
            f"record {i}: source-site rows must carry exposure, mediator, outcome"
        )
    for name, col in (("exposure", x), ("mediator", m), ("outcome", y)):
        if not _is_binary(col):
            raise NonBinaryField(f"{name} contains values outside {{0, 1}}")

    if covariate_names is None:
        covariate_names = tuple(f"c{i + 1}" for i in range(cov.shape[1]))
    names = tuple(str(v) for v in covariate_names)
    if len(names) != cov.shape[1]:
        raise ValueError("covariate_names length does not match covariate columns")

    return Dataset(
        site_index=dense,
        covariates=cov,
        exposure=x,
        mediator=m,
        outcome=y,
        covariate_names=names,
        site_labels=labels,
        target=int(target),
    )


def validate_dataset(raw_records: Iterable[ObservationRecord], target: int) -> Dataset:
    """Check the structural-missingness pattern and assemble a Dataset."""
    records = list(raw_records)
    if not records:
        raise EmptySite("no records supplied")
    d = len(records[0].covariates)
    if any(len(r.covariates) != d for r in records):
        raise ValueError("covariate vector length varies across records")

    def as_float(v):
        return np.nan if v is None else float(v)

    return dataset_from_arrays(
        site=[r.site for r in records],
        covariates=np.array([r.covariates for r in records], dtype=np.float64),
        exposure=np.array([as_float(r.exposure) for r in records]),
        mediator=np.array([as_float(r.mediator) for r in records]),
        outcome=np.array([as_float(r.outcome) for r in records]),
        target=target,
    )


@dataclass(frozen=True)
class EstimandSpec:
    """Target site plus the two source pools.

    mediator_sources supply the conditional mediator law, outcome_sources the
    conditional outcome law. The same site may appear in both pools.
    """

    target: int
    mediator_sources: tuple[int, ...]
    outcome_sources: tuple[int, ...]
    exposure_levels: tuple[int, int] = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "mediator_sources", tuple(self.mediator_sources))
        object.__setattr__(self, "outcome_sources", tuple(self.outcome_sources))
        if not self.mediator_sources or not self.outcome_sources:
            raise ValueError("both source pools must be non-empty")
        pool = set(self.mediator_sources) | set(self.outcome_sources)
        if self.target in pool:
            raise ValueError("target site cannot also be a source")
        if len(set(self.mediator_sources)) != len(self.mediator_sources):
            raise ValueError("duplicate mediator source labels")
        if len(set(self.outcome_sources)) != len(self.outcome_sources):
            raise ValueError("duplicate outcome source labels")
        if tuple(self.exposure_levels) != (0, 1):
            raise ValueError("only binary exposure (levels 0, 1) is supported")

    def validate_against(self, ds: Dataset) -> None:
        if self.target != ds.target:
            raise SiteAbsent(
                f"spec target {self.target} does not match dataset target {ds.target}"
            )
        for s in (self.target, *self.mediator_sources, *self.outcome_sources):
            if s not in ds.site_labels:
                raise SiteAbsent(f"site {s} not present in dataset")


def spec_for_dataset(ds: Dataset) -> EstimandSpec:
    """Default estimand: every non-target site in both source pools."""
    return EstimandSpec(
        target=ds.target,
        mediator_sources=ds.source_sites,
        outcome_sources=ds.source_sites,
    )


# ---------------------------------------------------------------------------
# CSV round trip


def _format_cell(v: float) -> str:
    if np.isnan(v):
        return NA_TOKEN
    if v == int(v):
        return str(int(v))
    return repr(float(v))


def write_dataset_csv(ds: Dataset, path) -> None:
    header = ["site"] + [f"l_{c}" for c in ds.covariate_names] + ["x", "m", "y"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n_records):
            row = [str(ds.site_labels[ds.site_index[i]])]
            row += [_format_cell(v) for v in ds.covariates[i]]
            row += [
                _format_cell(ds.exposure[i]),
                _format_cell(ds.mediator[i]),
                _format_cell(ds.outcome[i]),
            ]
            writer.writerow(row)


def read_dataset_csv(path, target: int) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptySite(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:1] != ["site"] or header[-3:] != ["x", "m", "y"]:
            raise ValueError(
                f"{path}: expected columns site, l_<name>..., x, m, y; got {header}"
            )
        cov_cols = header[1:-3]
        if any(not c.startswith("l_") for c in cov_cols):
            raise ValueError(f"{path}: covariate columns must be named l_<name>")
        names = tuple(c[2:] for c in cov_cols)

        site, cov, xs, ms, ys = [], [], [], [], []

        def parse(cell: str) -> float:
            cell = cell.strip()
            return np.nan if cell == NA_TOKEN else float(cell)

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: wrong number of fields")
            site.append(int(row[0]))
            cov.append([parse(c) for c in row[1 : 1 + len(names)]])
            xs.append(parse(row[-3]))
            ms.append(parse(row[-2]))
            ys.append(parse(row[-1]))

    return dataset_from_arrays(
        site=site,
        covariates=np.array(cov, dtype=np.float64),
        exposure=np.array(xs),
        mediator=np.array(ms),
        outcome=np.array(ys),
        target=target,
        covariate_names=names,
    )


# ---------------------------------------------------------------------------
# Positivity diagnostics


@dataclass(frozen=True)
class PositivityReport:
    """Per (outcome-site, mediator-site) fractions of units whose raw fitted
    membership/exposure probabilities fall outside [bound, 1-bound]."""

    bound: float
    alarm_fraction: float
    pairs: dict  # (k, p) -> {"fractions": {name: frac}, "worst": frac, "flagged": bool}

    @property
    def flagged_pairs(self) -> list:
        return [kp for kp, row in self.pairs.items() if row["flagged"]]

    def to_json_dict(self) -> dict:
        return {
            "bound": self.bound,
            "alarm_fraction": self.alarm_fraction,
            "pairs": [
                {
                    "outcome_site": k,
                    "mediator_site": p,
                    "fractions": row["fractions"],
                    "worst": row["worst"],
                    "flagged": row["flagged"],
                }
                for (k, p), row in sorted(self.pairs.items())
            ],
        }

    def format_table(self) -> str:
        lines = [
            f"positivity check (bound={self.bound:g}, alarm at {self.alarm_fraction:.0%} of units)",
            f"{'outcome':>8} {'mediator':>9} {'worst':>8}  offending probabilities",
        ]
        for (k, p), row in sorted(self.pairs.items()):
            bad = [f"{n}={f:.3f}" for n, f in row["fractions"].items() if f > 0]
            mark = " *FLAG*" if row["flagged"] else ""
            lines.append(
                f"{k:>8} {p:>9} {row['worst']:>8.3f}  {', '.join(bad) or '-'}{mark}"
            )
        return "\n".join(lines)


def positivity_diagnostics(
    ds: Dataset,
    spec: EstimandSpec,
    nuis,
    bound: float = 0.01,
    alarm_fraction: float = 0.05,
) -> PositivityReport:
    """Fraction of units, per (k, p) pair, with fitted membership or exposure
    probabilities outside [bound, 1-bound]. Raw (pre-truncation) values are
    inspected so the report is not masked by the estimation-time clipping."""
    source_rows = ds.site_index != ds.index_of(ds.target)

    def frac_outside(values: np.ndarray, rows: np.ndarray) -> float:
        v = values[rows]
        if v.size == 0:
            return 0.0
        return float(np.mean((v < bound) | (v > 1.0 - bound)))

    all_rows = np.ones(ds.n_records, dtype=bool)
    pairs = {}
    for k in spec.outcome_sources:
        for p in spec.mediator_sources:
            fractions = {
                "r_p": frac_outside(nuis.site_given_covariates(p, raw=True), all_rows),
                "e_p": frac_outside(nuis.site_given_mediator(p, raw=True), source_rows),
                "e_k": frac_outside(nuis.site_given_mediator(k, raw=True), source_rows),
                "t0_p": frac_outside(nuis.exposure_prob(0, p, raw=True), all_rows),
                "t1_p": frac_outside(nuis.exposure_prob(1, p, raw=True), all_rows),
                "g0_p": frac_outside(nuis.exposure_given_mediator(0, p, raw=True), source_rows),
                "g1_p": frac_outside(nuis.exposure_given_mediator(1, p, raw=True), source_rows),
                "g0_k": frac_outside(nuis.exposure_given_mediator(0, k, raw=True), source_rows),
                "g1_k": frac_outside(nuis.exposure_given_mediator(1, k, raw=True), source_rows),
            }
            worst = max(fractions.values())
            pairs[(k, p)] = {
                "fractions": fractions,
                "worst": worst,
                "flagged": worst > alarm_fraction,
            }
    return PositivityReport(bound=bound, alarm_fraction=alarm_fraction, pairs=pairs)


def write_positivity_json(report: PositivityReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
