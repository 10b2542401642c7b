"""Command-line front end.

Every command is a function of a :class:`RunConfig` and the files under
``--out``.  Results carry a config hash over the experiment-defining fields
(methods and seeds are fan-out axes and are recorded per artifact instead), so
``evaluate`` can refuse to mix artifacts from different configurations.

Output layout below ``OUT``::

    data/<dataset>/seed<S>/{train,val,test}.csv (+ .meta.json), oracle.csv
    models/<dataset>/<method>/seed<S>.joblib, models/fit_log.csv
    reports/<dataset>/<method>_<scope>[_seed<S>].json, summary.csv
    export/<dataset>/bounds.csv
    comparison.csv (reproduce only), manifest-<command>.json
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .bounds import BoundMatrix, Interval
from .dataset import (
    CsvSchema,
    Dataset,
    DataValidationError,
    SplitSpec,
    SupportMode,
    infer_support,
    load_csv,
    split,
    write_csv,
)
from .dgp import VARIANTS, DgpConfig, covariate_grid, oracle_nuisances, oracle_table, sample_synthetic
from .evaluation import (
    TABLE1_ROWS,
    EvalReport,
    aggregate,
    comparison_rows,
    describe_real,
    score,
    summary_rows,
    write_rows_csv,
)
from .learners import BoundLearner, Method, load_estimator, save_estimator
from .nuisance import FAMILIES

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
ALL_METHODS = tuple(m.value for m in Method)
COMMANDS = ("simulate", "fit", "evaluate", "export", "reproduce")
QUICK_N, QUICK_SEEDS, QUICK_WIDEN = 2000, (1, 2), 2.0

# fields that do not change any numerical result
_UNHASHED = {"methods", "seeds", "out", "n_jobs", "quick", "tightest_only", "feature", "datasets"}
_DATA_FIELDS = ("dataset", "n", "split", "csv_schema")


class ConfigError(ValueError):
    """Invalid configuration or inconsistent inputs (exit code 1)."""


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "dataset1"
    datasets: tuple = VARIANTS
    n: int = 10000
    methods: tuple = ALL_METHODS
    seeds: tuple = (1, 2, 3, 4, 5)
    support: str = "minmax"
    family: str = "ridge-fourier"
    family_params: dict = field(default_factory=dict)
    classifier_params: dict = field(default_factory=dict)
    stage2_family: str | None = None
    stage2_params: dict | None = None
    folds: int = 1
    clip_eps: float = 0.01
    min_cell_size: int = 20
    split: tuple = (0.7, 0.1, 0.2)
    grid: int = 181
    csv_schema: dict | None = None
    feature: str | None = None
    tightest_only: bool = False
    quick: bool = False
    n_jobs: int = 1
    out: str = "runs"

    def __post_init__(self):
        for name in ("methods", "seeds", "split", "datasets"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds: {self.seeds}")
        object.__setattr__(self, "methods", tuple(Method.parse(m).value for m in self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for ds in (self.dataset, *self.datasets):
            if ds not in VARIANTS and not ds.startswith("csv:"):
                raise ConfigError(f"dataset must be one of {VARIANTS} or csv:PATH, got {ds!r}")
            if ds.startswith("csv:") and not Path(ds[4:]).is_file():
                raise ConfigError(f"dataset file {ds[4:]!r} does not exist")
        SupportMode.parse(self.support)
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.stage2_family is not None and self.stage2_family not in FAMILIES:
            raise ConfigError(f"stage2_family must be one of {FAMILIES}")
        if int(self.folds) < 1:
            raise ConfigError("folds must be >= 1")
        if int(self.grid) < 2:
            raise ConfigError("grid must have at least 2 points")
        if int(self.n) < 10:
            raise ConfigError("n must be at least 10")
        self.split_spec(0)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def split_spec(self, seed: int) -> SplitSpec:
        try:
            return SplitSpec(*[float(v) for v in self.split], seed=int(seed))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid split {self.split}: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("methods", "seeds", "split", "datasets"):
            d[k] = list(d[k])
        return d

    def hash_dict(self, keys=None) -> dict:
        d = self.to_dict()
        keys = keys or [k for k in d if k not in _UNHASHED]
        out = {k: d[k] for k in sorted(keys)}
        if "dataset" in out and out["dataset"].startswith("csv:"):
            out["dataset_sha256"] = hashlib.sha256(Path(out["dataset"][4:]).read_bytes()).hexdigest()
        return out

    def config_hash(self) -> str:
        text = json.dumps(self.hash_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def data_hash(self) -> str:
        text = json.dumps(self.hash_dict(_DATA_FIELDS), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def dataset_name(self) -> str:
        return Path(self.dataset[4:]).stem if self.dataset.startswith("csv:") else self.dataset

    @property
    def synthetic(self) -> bool:
        return self.dataset in VARIANTS

    @property
    def root(self) -> Path:
        return Path(self.out)


# ---------------------------------------------------------------- helpers


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.root / "data" / cfg.dataset_name / f"seed{seed}"


def _model_path(cfg: RunConfig, method: str, seed: int) -> Path:
    return cfg.root / "models" / cfg.dataset_name / method / f"seed{seed}.joblib"


def _report_dir(cfg: RunConfig) -> Path:
    return cfg.root / "reports" / cfg.dataset_name


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_manifest(cfg: RunConfig, command: str, files) -> Path:
    manifest = {"command": command, "config_hash": cfg.config_hash(), "data_hash": cfg.data_hash(),
                "config": cfg.to_dict(), "files": sorted(str(Path(f).relative_to(cfg.root)) for f in files)}
    path = cfg.root / f"manifest-{command}.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dgp(cfg: RunConfig, seed: int) -> DgpConfig:
    return DgpConfig(variant=cfg.dataset, n=int(cfg.n), seed=int(seed))


def _csv_schema(cfg: RunConfig, path: Path) -> CsvSchema | None:
    if cfg.csv_schema is not None:
        return CsvSchema.from_dict(cfg.csv_schema)
    if Path(str(path) + ".meta.json").exists():
        return None
    with path.open(newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    base = {"env": "env", "treatment": "a", "outcome": "y"}
    if not set(base.values()) <= set(header):
        raise ConfigError(f"{path}: no sidecar and no csv_schema; default columns env/a/y not all present")
    return CsvSchema(covariates=tuple(h for h in header if h not in base.values()), **base)


def _load_source(cfg: RunConfig, seed: int) -> Dataset:
    if cfg.synthetic:
        return sample_synthetic(_dgp(cfg, seed))
    path = Path(cfg.dataset[4:])
    return load_csv(path, _csv_schema(cfg, path))


def _read_split(cfg: RunConfig, seed: int, part: str) -> Dataset:
    path = _seed_dir(cfg, seed) / f"{part}.csv"
    if not path.exists():
        raise ConfigError(f"missing {path}; run `simulate` with the same --out first")
    data = load_csv(path)
    got = data.metadata.get("data_hash")
    if got != cfg.data_hash():
        raise ConfigError(f"{path} was written under data hash {got}, current configuration has "
                          f"{cfg.data_hash()}; re-run simulate")
    return data


def _support(cfg: RunConfig, train: Dataset) -> Interval:
    return infer_support(train, SupportMode.parse(cfg.support))


def _learner(cfg: RunConfig, method: str, seed: int) -> BoundLearner:
    return BoundLearner(method=method, family=cfg.family, family_params=cfg.family_params or None,
                        classifier_params=cfg.classifier_params or None, stage2_family=cfg.stage2_family,
                        stage2_params=cfg.stage2_params, clip_eps=cfg.clip_eps,
                        cross_fit_folds=int(cfg.folds), min_cell_size=cfg.min_cell_size, random_state=seed)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    written = []
    for seed in cfg.seeds:
        source = _load_source(cfg, seed)
        parts = split(source, cfg.split_spec(seed))
        d = _seed_dir(cfg, seed)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {d} is not writable: {exc}") from None
        support = _support(cfg, parts[0])
        for name, part in zip(("train", "val", "test"), parts):
            part = part.with_metadata(config_hash=cfg.config_hash(), data_hash=cfg.data_hash(),
                                      dataset=cfg.dataset_name, seed=seed, part=name)
            p = d / f"{name}.csv"
            write_csv(part, p)
            written += [p, Path(str(p) + ".meta.json")]
        if cfg.synthetic:
            table = oracle_table(_dgp(cfg, seed), covariate_grid(int(cfg.grid)), support)
            p = d / "oracle.csv"
            table.to_csv(p, config_hash=cfg.config_hash())
            written.append(p)
        _log(f"simulate {cfg.dataset_name} seed {seed}: " + "/".join(str(len(p)) for p in parts))
    written.append(_write_manifest(cfg, "simulate", written))
    return written


def _fit_one(cfg: RunConfig, method: str, seed: int):
    train = _read_split(cfg, seed, "train")
    support = _support(cfg, train)
    est = _learner(cfg, method, seed).fit_dataset(train, support=support)
    path = _model_path(cfg, method, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    save_estimator(est, tmp, config_hash=cfg.config_hash(), dataset=cfg.dataset_name, method=method,
                   seed=seed, support=support.to_dict(), n_train=len(train))
    tmp.replace(path)
    return path, method, seed, est.fit_times_


def cmd_fit(cfg: RunConfig) -> list[Path]:
    for seed in cfg.seeds:
        _read_split(cfg, seed, "train")
    jobs = [(m, s) for s in cfg.seeds for m in cfg.methods]
    results = Parallel(n_jobs=int(cfg.n_jobs))(delayed(_fit_one)(cfg, m, s) for m, s in jobs)
    log_path = cfg.root / "models" / "fit_log.csv"
    rows = [{"dataset": cfg.dataset_name, "method": m, "seed": s, "stage1_seconds": t.get("stage1", 0.0),
             "stage2_seconds": t.get("stage2", 0.0), "config_hash": cfg.config_hash()} for _, m, s, t in results]
    _atomic_write(log_path, write_rows_csv(rows))
    for _, m, s, t in results:
        _log(f"fit {cfg.dataset_name} {m} seed {s}: stage1 {t.get('stage1', 0):.1f}s stage2 {t.get('stage2', 0):.1f}s")
    written = [p for p, *_ in results] + [log_path]
    written.append(_write_manifest(cfg, "fit", written))
    return written


def _load_models(cfg: RunConfig) -> dict:
    """All requested artifacts, checked for a single config hash."""
    models, missing = {}, []
    for m in cfg.methods:
        for s in cfg.seeds:
            p = _model_path(cfg, m, s)
            if p.exists():
                models[m, s] = load_estimator(p)
            else:
                missing.append(str(p))
    if missing:
        raise ConfigError("missing estimator artifacts (run `fit` first):\n  " + "\n  ".join(missing))
    hashes = {meta.get("config_hash") for _, meta in models.values()}
    if len(hashes) > 1:
        raise ConfigError(f"refusing to mix estimator artifacts with config hashes {sorted(map(str, hashes))}")
    (h,) = hashes
    if h != cfg.config_hash():
        raise ConfigError(f"estimator artifacts have config hash {h}, current configuration is {cfg.config_hash()}")
    return models


def _scopes_for(method: str) -> list[str]:
    scopes = [scope for _, m, scope in TABLE1_ROWS if m == method]
    return scopes + ["all"]


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    out_dir = _report_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, aggregated = [], []
    h = cfg.config_hash()
    for method in cfg.methods:
        if not cfg.synthetic:
            for seed in cfg.seeds:
                est, _ = models[method, seed]
                test = _read_split(cfg, seed, "test")
                feature = cfg.feature or test.names[0]
                rows = describe_real(est, test, feature, grid=min(int(cfg.grid), 20))
                for r in rows:
                    r.update(config_hash=h, method=method, seed=seed)
                p = out_dir / f"{method}_describe_seed{seed}.csv"
                _atomic_write(p, write_rows_csv(rows))
                written.append(p)
            continue
        for scope in _scopes_for(method):
            reports = []
            for seed in cfg.seeds:
                est, _ = models[method, seed]
                test = _read_split(cfg, seed, "test")
                r = score(est, _dgp(cfg, seed), test.X, scope=scope, dataset=cfg.dataset_name,
                          method=method, config_hash=h, seed=seed)
                p = out_dir / f"{method}_{scope}_seed{seed}.json"
                _atomic_write(p, r.to_text())
                written.append(p)
                reports.append(r)
            agg = aggregate(reports)
            p = out_dir / f"{method}_{scope}.json"
            _atomic_write(p, agg.to_text())
            written.append(p)
            aggregated.append(agg)
    if aggregated:
        p = out_dir / "summary.csv"
        _atomic_write(p, write_rows_csv(summary_rows(aggregated)))
        written.append(p)
        for row in summary_rows(aggregated):
            _log(f"{row['dataset']:>10} {row['row']:<9} rmse {row['rmse_mean']:.3f} +- {row['rmse_std']:.3f} "
                 f"coverage {row['coverage_mean']:.3f}")
    written.append(_write_manifest(cfg, "evaluate", written))
    return written


def _export_grid(cfg: RunConfig, models: dict) -> np.ndarray:
    if cfg.synthetic:
        return covariate_grid(int(cfg.grid))
    est, _ = next(iter(models.values()))
    if est.n_features_in_ != 1:
        raise ConfigError("export on a grid needs a single covariate; use `evaluate` for binned summaries")
    train = _read_split(cfg, cfg.seeds[0], "train")
    return np.linspace(train.X[:, 0].min(), train.X[:, 0].max(), int(cfg.grid))


def _pair_name(e, j) -> str:
    return f"{e}_{j}"


def cmd_export(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    x = _export_grid(cfg, models)
    X = x[:, None]
    table = {"x": x}
    if cfg.synthetic:
        orc = []
        for seed in cfg.seeds:
            est, _ = models[cfg.methods[0], seed]
            orc.append(oracle_nuisances(_dgp(cfg, seed), x).bounds(est.support_))
        table["tau"] = oracle_nuisances(_dgp(cfg, cfg.seeds[0]), x).tau
        k = orc[0].n_envs
        for e in range(k):
            for j in range(k):
                if cfg.tightest_only:
                    continue
                table[f"oracle_upper_{_pair_name(e, j)}"] = np.mean([b.upper[:, e, j] for b in orc], axis=0)
                table[f"oracle_lower_{_pair_name(e, j)}"] = np.mean([b.lower[:, e, j] for b in orc], axis=0)
        table["oracle_combined_upper"] = np.mean([b.combined_upper for b in orc], axis=0)
        table["oracle_combined_lower"] = np.mean([b.combined_lower for b in orc], axis=0)
        table["oracle_argmin"] = [_pair_name(*p) for p in orc[0].argmin_pair]
        table["oracle_argmax"] = [_pair_name(*p) for p in orc[0].argmax_pair]
    for method in cfg.methods:
        bms = [models[method, s][0].predict_bounds(X) for s in cfg.seeds]
        k = bms[0].n_envs
        cols = []
        if not cfg.tightest_only:
            for e in range(k):
                for j in range(k):
                    cols += [(f"upper_{_pair_name(e, j)}", [b.upper[:, e, j] for b in bms]),
                             (f"lower_{_pair_name(e, j)}", [b.lower[:, e, j] for b in bms])]
        cols += [("combined_upper", [b.combined_upper for b in bms]),
                 ("combined_lower", [b.combined_lower for b in bms])]
        for name, stack in cols:
            stack = np.asarray(stack)
            table[f"{method}_{name}_mean"] = stack.mean(axis=0)
            table[f"{method}_{name}_std"] = stack.std(axis=0, ddof=1) if len(stack) > 1 else np.zeros(len(x))
        # provenance of the tightest pair, from the seed-averaged pair bounds
        upper = np.mean([b.upper for b in bms], axis=0)
        lower = np.mean([b.lower for b in bms], axis=0)
        mean_bm = BoundMatrix.from_arrays(upper, lower)
        table[f"{method}_argmin"] = [_pair_name(*p) for p in mean_bm.argmin_pair]
        table[f"{method}_argmax"] = [_pair_name(*p) for p in mean_bm.argmax_pair]
        table[f"{method}_crossed"] = [int(c) for c in mean_bm.crossed]
    rows = [{k: (v[i] if isinstance(v, list) else float(v[i])) for k, v in table.items()} for i in range(len(x))]
    for r in rows:
        r["config_hash"] = cfg.config_hash()
    p = cfg.root / "export" / cfg.dataset_name / ("tightest.csv" if cfg.tightest_only else "bounds.csv")
    _atomic_write(p, write_rows_csv(rows))
    written = [p, _write_manifest(cfg, "export", [p])]
    return written


def cmd_reproduce(cfg: RunConfig) -> list[Path]:
    if cfg.quick:
        cfg = replace(cfg, n=QUICK_N, seeds=QUICK_SEEDS)
    label, widen = ("smoke", QUICK_WIDEN) if cfg.quick else ("full", 1.0)
    written, aggregated = [], []
    for ds in cfg.datasets:
        sub = replace(cfg, dataset=ds)
        _log(f"reproduce ({label}) {sub.dataset_name}: config hash {sub.config_hash()}")
        for cmd in (cmd_simulate, cmd_fit, cmd_evaluate, cmd_export):
            written += cmd(sub)
        for method in sub.methods:
            for scope in _scopes_for(method):
                aggregated.append(EvalReport.load(_report_dir(sub) / f"{method}_{scope}.json"))
    rows = comparison_rows(aggregated, widen=widen, label=label)
    p = cfg.root / "comparison.csv"
    _atomic_write(p, write_rows_csv(rows))
    written.append(p)
    print(f"{'dataset':<10} {'row':<9} {'rmse':>14} {'band':>7} {'baseline':>9}  verdict")
    for r in rows:
        print(f"{r['dataset']:<10} {r['row']:<9} {r['rmse_mean']:.3f} +- {r['rmse_std']:.3f} {r['band']:>7.3f} "
              f"{r['baseline_rmse_mean']:>9.3f}  {'pass' if r['verdict'] else 'FAIL'}")
    written.append(_write_manifest(cfg, "reproduce", written))
    return written


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
    "reproduce": cmd_reproduce,
}


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, _, hi = part.partition("-")
        out += list(range(int(lo), int(hi or lo) + 1))
    return out


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    common.add_argument("--dataset", help="dataset1 | dataset2 | csv:PATH")
    common.add_argument("--methods", help=f"comma list from {','.join(ALL_METHODS)}")
    common.add_argument("--seeds", help="comma list or ranges, e.g. 1-5")
    common.add_argument("--support", help="minmax | quantile:ALPHA | explicit:LO,HI")
    common.add_argument("--family", choices=FAMILIES)
    common.add_argument("--folds", type=int, help="cross-fitting folds (1 = no cross-fitting)")
    common.add_argument("--grid", type=int, help="export / oracle grid size")
    common.add_argument("--n", type=int, help="synthetic sample size")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quick", action="store_true", default=None, help="smoke-scale reproduce")
    common.add_argument("--jobs", dest="n_jobs", type=int, help="parallel (method, seed) fits")
    common.add_argument("--feature", help="covariate for real-data summaries")
    common.add_argument("--tightest-only", dest="tightest_only", action="store_true", default=None)
    parser = _Parser(prog="envbounds", description="Multi-environment CATE bounds")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=_COMMANDS[name].__name__.replace("cmd_", ""))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        unknown = set(values) - RunConfig.field_names()
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    for key in ("dataset", "support", "family", "folds", "grid", "n", "out", "quick", "n_jobs", "feature",
                "tightest_only"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.methods:
        values["methods"] = [m for m in args.methods.split(",") if m.strip()]
    if args.seeds:
        try:
            values["seeds"] = _int_list(args.seeds)
        except ValueError:
            raise ConfigError(f"invalid --seeds {args.seeds!r}") from None
    if args.command == "reproduce" and args.dataset:
        values["datasets"] = [args.dataset]
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        t0 = time.perf_counter()
        _COMMANDS[args.command](cfg)
        _log(f"{args.command} done in {time.perf_counter() - t0:.1f}s (config hash {cfg.config_hash()})")
        return EXIT_OK
    except (ConfigError, DataValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
