"""Partial-identification bounds on the CATE from multi-environment data."""

from .bounds import BoundMatrix, BoundPair, Interval, NuisancePoint, bounds_from_nuisances, combine, pairwise_bound
from .dataset import CsvSchema, Dataset, SplitSpec, SupportMode, infer_support, load_csv, split, write_csv
from .dgp import DgpConfig, OracleModels, oracle_nuisances, oracle_table, sample_synthetic
from .evaluation import EvalReport, aggregate, describe_real, score
from .learners import BoundLearner, Method, load_estimator, save_estimator
from .nuisance import FitConfig, cross_fit, fit_nuisances

__version__ = "0.1.0"

__all__ = [
    "BoundLearner", "BoundMatrix", "BoundPair", "CsvSchema", "Dataset", "DgpConfig", "EvalReport",
    "FitConfig", "Interval", "Method", "NuisancePoint", "OracleModels", "SplitSpec", "SupportMode",
    "aggregate", "bounds_from_nuisances", "combine", "cross_fit", "describe_real", "fit_nuisances",
    "infer_support", "load_csv", "load_estimator", "oracle_nuisances", "oracle_table", "pairwise_bound",
    "sample_synthetic", "save_estimator", "score", "split", "write_csv",
]
