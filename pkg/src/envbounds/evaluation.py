"""Scoring of bound estimators against oracle bounds, multi-seed aggregation and
Table-1-style tabulation.

RMSE is measured against the *combined* oracle bound of the same scope
(within pairs, cross pairs or all pairs), using the same outcome support as the
estimator.  ``rmse_pooled`` is the root of the mean of both sides' squared
errors and is the figure compared against the reference table.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bounds import SCOPES, BoundMatrix, scope_mask
from .dataset import Dataset
from .dgp import DgpConfig, OracleTable, oracle_table

__all__ = [
    "EvalReport",
    "METRICS",
    "TABLE1_ROWS",
    "TABLE1_REFERENCE",
    "score",
    "score_bounds",
    "aggregate",
    "describe_real",
    "summary_rows",
    "comparison_rows",
    "write_rows_csv",
    "acceptance_band",
]

METRICS = ("rmse_upper", "rmse_lower", "rmse_pooled", "coverage", "crossing_rate", "mean_width", "baseline_rmse")
WIDTH_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)

# (row label, fitted method, bound scope)
TABLE1_ROWS = (
    ("WB naive", "naive", "within"),
    ("WB", "cb_dr", "within"),
    ("CB naive", "naive", "cross"),
    ("CB-PI", "cb_pi", "cross"),
    ("CB-RA", "cb_ra", "cross"),
    ("CB-IPW", "cb_ipw", "cross"),
    ("CB-DR", "cb_dr", "cross"),
)

# published mean and standard deviation of RMSE over five runs
TABLE1_REFERENCE = {
    "WB naive": {"dataset1": (0.073, 0.031), "dataset2": (0.075, 0.045)},
    "WB": {"dataset1": (0.142, 0.069), "dataset2": (0.130, 0.077)},
    "CB naive": {"dataset1": (0.148, 0.098), "dataset2": (0.156, 0.105)},
    "CB-PI": {"dataset1": (0.125, 0.059), "dataset2": (0.127, 0.063)},
    "CB-RA": {"dataset1": (0.179, 0.089), "dataset2": (0.119, 0.037)},
    "CB-IPW": {"dataset1": (0.117, 0.057), "dataset2": (0.165, 0.072)},
    "CB-DR": {"dataset1": (0.132, 0.061), "dataset2": (0.111, 0.069)},
}


def acceptance_band(mean: float, std: float, widen: float = 1.0) -> float:
    return (mean + 2.0 * std) * 1.5 * widen


@dataclass(frozen=True)
class EvalReport:
    """Scores for one (dataset, method, scope) over one or more seeds.

    ``std`` holds the sample standard deviation of each metric across seeds
    (all zero for a single seed).  ``beats_baseline`` is true only if every
    aggregated run had a pooled RMSE below the vacuous ``[s1, s2]`` estimator.
    """

    dataset: str
    method: str
    scope: str
    config_hash: str
    seeds: tuple
    n_points: int
    rmse_upper: float
    rmse_lower: float
    rmse_pooled: float
    coverage: float
    crossing_rate: float
    mean_width: float
    baseline_rmse: float
    beats_baseline: bool
    width_quantiles: dict = field(default_factory=dict)
    per_pair_rmse: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage {self.coverage} outside [0, 1]")
        if min(self.rmse_upper, self.rmse_lower, self.rmse_pooled) < 0:
            raise ValueError("RMSE must be non-negative")
        if len(self.seeds) < 1:
            raise ValueError("a report aggregates at least one seed")
        object.__setattr__(self, "std", {m: float(self.std.get(m, 0.0)) for m in METRICS})
        object.__setattr__(self, "width_quantiles", {str(k): float(v) for k, v in self.width_quantiles.items()})

    @property
    def key(self) -> tuple[str, str, str]:
        return self.dataset, self.method, self.scope

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_text(Path(path).read_text())


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def score_bounds(est: BoundMatrix, oracle: BoundMatrix, tau, support, *, scope: str = "all",
                 dataset: str = "", method: str = "", config_hash: str = "", seed=0) -> EvalReport:
    """Score already-evaluated bound matrices on the same (ordered) points."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    tau = np.asarray(tau, dtype=float)
    if est.upper.shape != oracle.upper.shape or est.upper.shape[0] != tau.shape[0]:
        raise ValueError(f"dimension mismatch: estimate {est.upper.shape}, oracle {oracle.upper.shape}, "
                         f"tau {tau.shape}")
    e_b, o_b = est.restrict(scope), oracle.restrict(scope)
    up, lo = e_b.combined_upper, e_b.combined_lower
    r_up = _rmse(up, o_b.combined_upper)
    r_lo = _rmse(lo, o_b.combined_lower)
    pooled = math.sqrt((r_up**2 + r_lo**2) / 2.0)
    base_up = _rmse(np.full_like(up, support.hi), o_b.combined_upper)
    base_lo = _rmse(np.full_like(lo, support.lo), o_b.combined_lower)
    baseline = math.sqrt((base_up**2 + base_lo**2) / 2.0)
    width = up - lo
    mask = scope_mask(est.n_envs, scope)
    per_pair = {}
    for e, j in zip(*np.nonzero(mask)):
        per_pair[f"{e},{j}"] = math.sqrt((_rmse(est.upper[:, e, j], oracle.upper[:, e, j]) ** 2
                                          + _rmse(est.lower[:, e, j], oracle.lower[:, e, j]) ** 2) / 2.0)
    return EvalReport(
        dataset=dataset, method=method, scope=scope, config_hash=config_hash, seeds=(seed,),
        n_points=int(tau.shape[0]), rmse_upper=r_up, rmse_lower=r_lo, rmse_pooled=pooled,
        coverage=float(np.mean((lo <= tau) & (tau <= up))),
        crossing_rate=float(np.mean(lo > up)),
        mean_width=float(np.mean(width)),
        baseline_rmse=baseline, beats_baseline=bool(pooled < baseline),
        width_quantiles={q: float(np.quantile(width, q)) for q in WIDTH_QUANTILES},
        per_pair_rmse=per_pair,
        std={m: 0.0 for m in METRICS},
    )


def score(est, oracle, test_xs, scope: str = "all", **labels) -> EvalReport:
    """Score a fitted estimator against oracle bounds at exact test covariates.

    ``oracle`` is either a :class:`DgpConfig` (the oracle is evaluated exactly
    at the test points, with the estimator's support) or an
    :class:`OracleTable` whose grid contains every test covariate.  Points are
    sorted first so the result does not depend on their order.
    """
    xs = np.asarray(test_xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.ndim != 2 or xs.shape[1] != 1 or xs.shape[1] != est.n_features_in_:
        raise ValueError(f"dimension mismatch: test covariates {xs.shape}, estimator expects "
                         f"{est.n_features_in_} feature(s), synthetic oracle has 1")
    x = np.sort(xs[:, 0], kind="stable")
    if isinstance(oracle, DgpConfig):
        grid, inverse = np.unique(x, return_inverse=True)
        table = oracle_table(oracle, grid, est.support_)
    elif isinstance(oracle, OracleTable):
        table = oracle
        if table.support != est.support_:
            raise ValueError(f"oracle support {table.support} differs from estimator support {est.support_}")
        inverse = np.searchsorted(table.grid, x)
        inverse = np.clip(inverse, 0, len(table.grid) - 1)
        if not np.array_equal(table.grid[inverse], x):
            raise ValueError("oracle grid does not contain every test covariate; pass the DgpConfig instead")
    else:
        raise TypeError("oracle must be a DgpConfig or an OracleTable")
    ob = table.bounds
    oracle_bm = BoundMatrix.from_arrays(ob.upper[inverse], ob.lower[inverse])
    est_bm = est.predict_bounds(x[:, None])
    return score_bounds(est_bm, oracle_bm, table.tau[inverse], est.support_, scope=scope, **labels)


def aggregate(reports) -> EvalReport:
    """Mean and sample standard deviation (n-1; 0 for a single report) of every metric."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate needs at least one report")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise ValueError(f"refusing to aggregate reports with mixed config hashes: {sorted(hashes)}")
    keys = {r.key for r in reports}
    if len(keys) > 1:
        raise ValueError(f"refusing to aggregate different (dataset, method, scope) cells: {sorted(keys)}")
    seeds = tuple(s for r in reports for s in r.seeds)
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in aggregation: {seeds}")

    def stats(values):
        v = np.asarray(values, dtype=float)
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

    means, stds = {}, {}
    for m in METRICS:
        means[m], stds[m] = stats([getattr(r, m) for r in reports])
    first = reports[0]
    wq = {q: stats([r.width_quantiles[q] for r in reports])[0] for q in first.width_quantiles}
    pp = {p: stats([r.per_pair_rmse[p] for r in reports])[0] for p in first.per_pair_rmse}
    return replace(first, seeds=seeds, n_points=int(sum(r.n_points for r in reports)),
                   beats_baseline=all(r.beats_baseline for r in reports),
                   width_quantiles=wq, per_pair_rmse=pp, std=stds, **means)


def describe_real(est, data: Dataset, feature, grid=10) -> list[dict]:
    """Bounds summarised along one covariate, averaged over the others.

    ``grid`` is a number of equal-count bins or an increasing array of bin
    edges.  Each row holds mean and std of every pair bound and of the combined
    bounds over the rows in the bin, plus the share of rows whose tightest
    upper / lower bound comes from a cross-environment pair.
    """
    names = data.names
    if isinstance(feature, str):
        if feature not in names:
            raise KeyError(f"unknown covariate {feature!r}; available: {list(names)}")
        col = names.index(feature)
    else:
        col = int(feature)
        if not 0 <= col < data.covariate_dim:
            raise KeyError(f"covariate index {col} out of range")
    v = data.X[:, col]
    if np.isscalar(grid):
        edges = np.unique(np.quantile(v, np.linspace(0, 1, int(grid) + 1)))
    else:
        edges = np.asarray(grid, dtype=float)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be an increasing array of length >= 2")
    bins = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
    bm = est.predict_bounds(data.X)
    k = bm.n_envs
    rows = []
    for b in range(len(edges) - 1):
        m = bins == b
        if not m.any():
            continue
        row = {"feature": names[col], "bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]),
               "x_mean": float(v[m].mean()), "n": int(m.sum())}
        for e in range(k):
            for j in range(k):
                for side, arr in (("upper", bm.upper), ("lower", bm.lower)):
                    row[f"{side}_{e}_{j}_mean"] = float(arr[m, e, j].mean())
                    row[f"{side}_{e}_{j}_std"] = float(arr[m, e, j].std())
        for side, arr in (("upper", bm.combined_upper), ("lower", bm.combined_lower)):
            row[f"combined_{side}_mean"] = float(arr[m].mean())
            row[f"combined_{side}_std"] = float(arr[m].std())
        row["cross_share_upper"] = float(np.mean(bm.argmin_pair[m, 0] != bm.argmin_pair[m, 1]))
        row["cross_share_lower"] = float(np.mean(bm.argmax_pair[m, 0] != bm.argmax_pair[m, 1]))
        row["crossing_rate"] = float(np.mean(bm.crossed[m]))
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "pass" if v else "FAIL"
    if isinstance(v, float):
        return format(v, ".6f")
    return str(v)


def summary_rows(reports) -> list[dict]:
    """One row per Table-1 cell from aggregated reports keyed by (dataset, method, scope)."""
    by_key = {r.key: r for r in reports}
    datasets = sorted({r.dataset for r in reports})
    rows = []
    for ds in datasets:
        for label, method, scope in TABLE1_ROWS:
            r = by_key.get((ds, method, scope))
            if r is None:
                continue
            rows.append({
                "dataset": ds, "row": label, "method": method, "scope": scope,
                "n_seeds": len(r.seeds), "rmse_mean": r.rmse_pooled, "rmse_std": r.std["rmse_pooled"],
                "rmse_upper_mean": r.rmse_upper, "rmse_lower_mean": r.rmse_lower,
                "coverage_mean": r.coverage, "crossing_rate_mean": r.crossing_rate,
                "mean_width": r.mean_width, "baseline_rmse_mean": r.baseline_rmse,
                "config_hash": r.config_hash,
            })
    return rows


def comparison_rows(reports, widen: float = 1.0, label: str = "full") -> list[dict]:
    """Summary rows extended with the reference value, the acceptance band and a verdict."""
    by_key = {r.key: r for r in reports}
    out = []
    for row in summary_rows(reports):
        ref = TABLE1_REFERENCE.get(row["row"], {}).get(row["dataset"])
        r = by_key[row["dataset"], row["method"], row["scope"]]
        row = dict(row)
        if ref is None:
            row.update(paper_mean="", paper_std="", band="", within_band="", beats_baseline=r.beats_baseline,
                       verdict=r.beats_baseline)
        else:
            band = acceptance_band(*ref, widen=widen)
            ok = row["rmse_mean"] <= band
            row.update(paper_mean=ref[0], paper_std=ref[1], band=band, within_band=ok,
                       beats_baseline=r.beats_baseline, verdict=ok and r.beats_baseline)
        row["label"] = label
        out.append(row)
    return out


def write_rows_csv(rows, path=None) -> str:
    """Write dict rows with fixed float formatting; returns the CSV text."""
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        fields = list(rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f, "")) for f in fields])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
