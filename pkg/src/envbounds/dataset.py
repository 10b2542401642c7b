"""Multi-environment observational data: container, CSV I/O, splitting, outcome support."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .bounds import Interval

__all__ = [
    "Sample",
    "Dataset",
    "SplitSpec",
    "CsvSchema",
    "SupportMode",
    "DataValidationError",
    "SchemaError",
    "CsvParseError",
    "load_csv",
    "write_csv",
    "split",
    "infer_support",
]

SIDECAR_SUFFIX = ".meta.json"
SIDECAR_VERSION = 1


class DataValidationError(ValueError):
    """Data violates a structural invariant (environment coverage, treatment set, support)."""


class SchemaError(DataValidationError):
    """A column named by the schema is missing from the file."""


class CsvParseError(DataValidationError):
    """A cell could not be parsed as a finite number."""

    def __init__(self, message: str, row: int, column: str):
        super().__init__(message)
        self.row = row
        self.column = column


class Sample(NamedTuple):
    env: int
    covariates: np.ndarray
    treatment: int
    outcome: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of ``(env, covariates, treatment, outcome)`` samples.

    Environments are dense integers ``0..num_envs-1``; ``env_labels[i]`` is the
    original label of environment ``i``.  ``support`` is the declared outcome
    interval and is only checked against the observed outcomes when
    ``support_mode`` is ``"explicit"``.
    """

    env: np.ndarray
    X: np.ndarray
    treatment: np.ndarray
    y: np.ndarray
    num_envs: int
    support: Interval | None = None
    support_mode: str | None = None
    treatments: tuple[int, ...] = (0, 1)
    env_labels: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] | None = None
    metadata: dict = field(default_factory=dict)
    strict_envs: bool = True

    def __post_init__(self):
        env = np.asarray(self.env)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        a = np.asarray(self.treatment)
        y = np.asarray(self.y, dtype=float)
        n = len(y)
        if X.ndim != 2 or X.shape[1] < 1:
            raise DataValidationError(f"covariates must be a 2-d array with >= 1 column, got shape {X.shape}")
        if not (len(env) == len(a) == X.shape[0] == n):
            raise DataValidationError(
                f"column lengths differ: env={len(env)}, X={X.shape[0]}, treatment={len(a)}, y={n}"
            )
        if int(self.num_envs) < 1:
            raise DataValidationError("num_envs must be >= 1")
        if env.size and (not np.issubdtype(env.dtype, np.integer) and np.any(env != np.round(env))):
            raise DataValidationError("environment indices must be integers")
        env = env.astype(np.int64)
        if np.any((env < 0) | (env >= self.num_envs)):
            raise DataValidationError(f"environment index outside [0, {self.num_envs})")
        present = np.bincount(env, minlength=self.num_envs) if n else np.zeros(self.num_envs, int)
        if n and self.strict_envs and np.any(present == 0):
            raise DataValidationError(f"environment(s) {np.flatnonzero(present == 0).tolist()} have no samples")
        a_int = a.astype(np.int64) if a.size else a.astype(np.int64)
        if a.size and np.any(a_int != a):
            raise DataValidationError("treatments must be integers")
        bad = ~np.isin(a_int, np.asarray(self.treatments))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DataValidationError(
                f"row {i}: treatment {a_int[i]} not in declared treatment set {tuple(self.treatments)}"
            )
        if not np.all(np.isfinite(X)):
            raise DataValidationError("covariates must be finite")
        if not np.all(np.isfinite(y)):
            raise DataValidationError("outcomes must be finite")
        if self.support is not None and self.support_mode == "explicit" and n and not self.support.contains(y):
            raise DataValidationError(
                f"declared support [{self.support.lo}, {self.support.hi}] excludes observed outcomes "
                f"[{y.min()}, {y.max()}]"
            )
        if self.env_labels is not None and len(self.env_labels) != self.num_envs:
            raise DataValidationError("env_labels must name every environment")
        if self.covariate_names is not None and len(self.covariate_names) != X.shape[1]:
            raise DataValidationError("covariate_names must name every covariate column")
        object.__setattr__(self, "env", _frozen(env))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "treatment", _frozen(a_int))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "num_envs", int(self.num_envs))
        object.__setattr__(self, "treatments", tuple(int(t) for t in self.treatments))

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.env[i]), self.X[i], int(self.treatment[i]), float(self.y[i]))

    @property
    def covariate_dim(self) -> int:
        return self.X.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return self.covariate_names or tuple(f"x{i}" for i in range(self.covariate_dim))

    def env_counts(self) -> np.ndarray:
        return np.bincount(self.env, minlength=self.num_envs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, env=self.env[idx], X=self.X[idx], treatment=self.treatment[idx], y=self.y[idx])

    def with_support(self, support: Interval, mode: str | None = None) -> "Dataset":
        return replace(self, support=support, support_mode=mode)

    def with_metadata(self, **kwargs) -> "Dataset":
        return replace(self, metadata={**self.metadata, **kwargs})

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_envs == other.num_envs
            and np.array_equal(self.env, other.env)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and self.support == other.support
        )


# ---------------------------------------------------------------- support


@dataclass(frozen=True)
class SupportMode:
    """How to choose the outcome support: ``minmax``, ``quantile:ALPHA`` or ``explicit:LO,HI``."""

    kind: str = "minmax"
    alpha: float | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("minmax", "quantile", "explicit"):
            raise ValueError(f"unknown support mode {self.kind!r}")
        if self.kind == "quantile" and not (self.alpha is not None and 0 < self.alpha < 0.5):
            raise ValueError("quantile support needs 0 < alpha < 0.5")
        if self.kind == "explicit":
            Interval(self.lo, self.hi)

    @classmethod
    def parse(cls, text: "str | SupportMode") -> "SupportMode":
        if isinstance(text, SupportMode):
            return text
        text = text.strip()
        if text in ("minmax", "empirical-minmax"):
            return cls("minmax")
        kind, _, arg = text.partition(":")
        try:
            if kind == "quantile":
                return cls("quantile", alpha=float(arg))
            if kind == "explicit":
                lo, hi = (float(v) for v in arg.split(","))
                return cls("explicit", lo=lo, hi=hi)
        except ValueError as exc:
            raise ValueError(f"malformed support mode {text!r}: {exc}") from None
        raise ValueError(f"unknown support mode {text!r}")

    def __str__(self) -> str:
        if self.kind == "quantile":
            return f"quantile:{self.alpha!r}"
        if self.kind == "explicit":
            return f"explicit:{self.lo!r},{self.hi!r}"
        return "minmax"


def infer_support(data: Dataset, mode: "str | SupportMode" = "minmax") -> Interval:
    """Outcome support from the data.

    ``minmax`` returns the observed range, ``quantile:a`` the empirical
    ``(a, 1-a)`` quantiles, and ``explicit:lo,hi`` validates the given interval
    against every observed outcome.
    """
    mode = SupportMode.parse(mode)
    if len(data) == 0:
        raise DataValidationError("cannot infer support of an empty dataset")
    y = data.y
    if mode.kind == "minmax":
        return Interval(float(y.min()), float(y.max()))
    if mode.kind == "quantile":
        lo, hi = np.quantile(y, [mode.alpha, 1.0 - mode.alpha])
        return Interval(float(lo), float(hi))
    support = Interval(mode.lo, mode.hi)
    if not support.contains(y):
        raise DataValidationError(
            f"explicit support [{support.lo}, {support.hi}] excludes observed outcomes [{y.min()}, {y.max()}]"
        )
    return support


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0 < f < 1 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


def _repair_env_coverage(parts: list[np.ndarray], env: np.ndarray, num_envs: int) -> None:
    """Swap rows between partitions until every partition holds every environment.

    A missing environment ``e`` is taken from a partition holding at least two
    rows of ``e``, in exchange for a row whose environment the receiver has to
    spare.  Partition sizes never change.
    """
    for i, part in enumerate(parts):
        for e in range(num_envs):
            if np.any(env[part] == e):
                continue
            counts = np.bincount(env[part], minlength=num_envs)
            takers = np.flatnonzero(counts[env[part]] > 1)
            for k, other in enumerate(parts):
                if k == i or takers.size == 0:
                    continue
                donors = np.flatnonzero(env[other] == e)
                if donors.size < 2:
                    continue
                d, t = donors[0], takers[0]
                other[d], part[t] = part[t], other[d]
                break


def split(data: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded train/val/test partition.

    Sizes are ``floor(n * frac)`` for val and test; train takes the remainder.
    """
    n = len(data)
    if n < 10:
        raise DataValidationError(f"need at least 10 samples to split, got {n}")
    n_val = math.floor(n * spec.val_frac)
    n_test = math.floor(n * spec.test_frac)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(spec.seed).permutation(n)
    parts = [perm[:n_train].copy(), perm[n_train : n_train + n_val].copy(), perm[n_train + n_val :].copy()]
    if np.all(data.env_counts() >= 3):
        _repair_env_coverage(parts, data.env, data.num_envs)
    else:
        warnings.warn("some environment has fewer than 3 samples; partitions may miss it", stacklevel=2)
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        idx = np.sort(idx)
        out.append(_subset_allow_missing(data, idx).with_metadata(split=name, split_seed=spec.seed))
    return tuple(out)


def _subset_allow_missing(data: Dataset, idx: np.ndarray) -> Dataset:
    sub = replace(data, env=data.env[idx], X=data.X[idx], treatment=data.treatment[idx], y=data.y[idx],
                  strict_envs=False)
    if np.any(sub.env_counts() == 0):
        warnings.warn("a split partition is missing an environment", stacklevel=3)
        return sub
    return replace(sub, strict_envs=True)


# ---------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    ``env_levels`` fixes the environment order; otherwise labels are indexed
    by first appearance.
    """

    env: str
    treatment: str
    outcome: str
    covariates: tuple[str, ...]
    treatments: tuple[int, ...] = (0, 1)
    env_levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.covariates:
            raise SchemaError("schema needs at least one covariate column")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def to_dict(self) -> dict:
        return {
            "env": self.env,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "covariates": list(self.covariates),
            "treatments": list(self.treatments),
            "env_levels": None if self.env_levels is None else list(self.env_levels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        return cls(
            env=d["env"],
            treatment=d["treatment"],
            outcome=d["outcome"],
            covariates=tuple(d["covariates"]),
            treatments=tuple(d.get("treatments", (0, 1))),
            env_levels=None if d.get("env_levels") is None else tuple(d["env_levels"]),
        )


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise CsvParseError(f"row {row}, column {column!r}: cannot parse {cell!r} as a number", row, column) from None
    if not math.isfinite(value):
        raise CsvParseError(f"row {row}, column {column!r}: non-finite value {cell!r}", row, column)
    return value


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Read a dataset from CSV.

    Without a ``schema`` the sidecar metadata written by :func:`write_csv` is
    required; with both, the sidecar still restores the environment order and
    support.  Rows are reported 0-based, counting data rows only.
    """
    path = Path(path)
    sidecar = None
    side_path = _sidecar_path(path)
    if side_path.exists():
        sidecar = json.loads(side_path.read_text(encoding="utf-8"))
    if schema is None:
        if sidecar is None:
            raise SchemaError(f"{path}: no schema given and no sidecar {side_path.name}")
        schema = CsvSchema.from_dict(sidecar["schema"])
    if schema.env_levels is None and sidecar is not None and sidecar.get("env_labels"):
        schema = replace(schema, env_levels=tuple(sidecar["env_labels"]))

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        needed = [schema.env, schema.treatment, schema.outcome, *schema.covariates]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        col = {name: header.index(name) for name in needed}
        labels, a, y, X = [], [], [], []
        for row, cells in enumerate(reader):
            if not cells:
                continue
            if len(cells) != len(header):
                raise CsvParseError(
                    f"row {row}: expected {len(header)} cells, got {len(cells)}", row, "<row>"
                )
            labels.append(cells[col[schema.env]].strip())
            t = _parse_float(cells[col[schema.treatment]], row, schema.treatment)
            if t != int(t):
                raise CsvParseError(f"row {row}: treatment {t} is not an integer", row, schema.treatment)
            a.append(int(t))
            y.append(_parse_float(cells[col[schema.outcome]], row, schema.outcome))
            X.append([_parse_float(cells[col[c]], row, c) for c in schema.covariates])

    if not y:
        raise DataValidationError(f"{path}: no data rows")
    if schema.env_levels is not None:
        levels = [str(v) for v in schema.env_levels]
        unknown = sorted(set(labels) - set(levels))
        if unknown:
            raise DataValidationError(f"environment label(s) {unknown} not among declared levels {levels}")
        empty = [lvl for lvl in levels if lvl not in set(labels)]
        if empty:
            raise DataValidationError(f"declared environment(s) {empty} have zero rows")
    else:
        levels = list(dict.fromkeys(labels))
    index = {lvl: i for i, lvl in enumerate(levels)}
    support = None
    support_mode = None
    metadata = {"source": str(path), "relabel": index}
    if sidecar is not None:
        if sidecar.get("support") is not None:
            support = Interval(**sidecar["support"])
            support_mode = sidecar.get("support_mode")
        metadata.update(sidecar.get("metadata", {}))
    return Dataset(
        env=np.array([index[lbl] for lbl in labels], dtype=np.int64),
        X=np.array(X, dtype=float),
        treatment=np.array(a, dtype=np.int64),
        y=np.array(y, dtype=float),
        num_envs=len(levels),
        support=support,
        support_mode=support_mode,
        treatments=tuple(schema.treatments),
        env_labels=tuple(levels),
        covariate_names=tuple(schema.covariates),
        metadata=metadata,
    )


def write_csv(data: Dataset, path, env_column: str = "env", treatment_column: str = "a",
              outcome_column: str = "y") -> Path:
    """Write ``data`` to CSV (full float precision) plus a JSON sidecar; returns the CSV path."""
    path = Path(path)
    labels = data.env_labels or tuple(str(i) for i in range(data.num_envs))
    names = data.names
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([env_column, *names, treatment_column, outcome_column])
        for i in range(len(data)):
            w.writerow(
                [labels[data.env[i]], *(repr(float(v)) for v in data.X[i]), int(data.treatment[i]),
                 repr(float(data.y[i]))]
            )
    schema = CsvSchema(env_column, treatment_column, outcome_column, tuple(names), data.treatments)
    meta = {k: v for k, v in data.metadata.items() if k not in ("source",)}
    sidecar = {
        "format_version": SIDECAR_VERSION,
        "schema": schema.to_dict(),
        "env_labels": list(labels),
        "relabel": {lbl: i for i, lbl in enumerate(labels)},
        "support": None if data.support is None else data.support.to_dict(),
        "support_mode": data.support_mode,
        "n": len(data),
        "metadata": _jsonable(meta),
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def from_arrays(X, treatment, y, env, num_envs: int | None = None, **kwargs) -> Dataset:
    """Build a :class:`Dataset` from plain arrays; environments must already be dense integers."""
    env = np.asarray(env)
    if num_envs is None:
        num_envs = int(env.max()) + 1 if env.size else 1
    return Dataset(env=env, X=X, treatment=treatment, y=y, num_envs=num_envs, **kwargs)


__all__ += ["from_arrays"]
