"""First-stage learning: model families, fitted nuisance sets and cross-fitting.

Regressors follow the scikit-learn ``fit(X, y) / predict(X)`` contract.
Probability models wrap a classifier and always return a full, clipped
simplex over a fixed number of classes, even when some class is absent from
the training labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, clone
from sklearn.dummy import DummyRegressor
from sklearn.kernel_approximation import RBFSampler
from sklearn.linear_model import LogisticRegression, RidgeCV
from sklearn.neighbors import KNeighborsClassifier, KNeighborsRegressor
from sklearn.neural_network import MLPClassifier, MLPRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import derive_seed
from .bounds import Interval
from .dataset import Dataset

__all__ = [
    "FAMILIES",
    "FitConfig",
    "FourierFeatures",
    "FourierRidge",
    "FourierLogistic",
    "AdaptiveKNNRegressor",
    "AdaptiveKNNClassifier",
    "ProbabilityModel",
    "RegressionModel",
    "NuisanceSet",
    "CellSizeError",
    "make_regressor",
    "make_classifier",
    "clip_simplex",
    "fit_response_surfaces",
    "fit_propensities",
    "fit_environment_model",
    "fit_transformed_responses",
    "fit_nuisances",
    "cross_fit",
    "CrossFitNuisances",
]

FAMILIES = ("ridge-fourier", "mlp", "knn")
SIDES = ("+", "-")

# seed-derivation tags, one per model role
_TAG_MU, _TAG_PI, _TAG_DELTA, _TAG_R, _TAG_STAGE2, _TAG_FOLDS = range(1, 7)


class CellSizeError(ValueError):
    """A per-(environment, treatment) cell is too small to fit a model on."""


# ---------------------------------------------------------------- families


def median_bandwidth(X, max_points: int = 1000, random_state=0) -> float:
    """Median pairwise Euclidean distance over a subsample of rows."""
    X = np.asarray(X, dtype=float)
    if len(X) > max_points:
        idx = np.random.default_rng(random_state).choice(len(X), max_points, replace=False)
        X = X[idx]
    diff = X[:, None, :] - X[None, :, :]
    d = np.sqrt((diff**2).sum(-1))[np.triu_indices(len(X), 1)]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


class FourierFeatures(BaseEstimator):
    """Standardized inputs followed by multi-scale random Fourier features.

    The base length scale is the median pairwise distance; each entry of
    ``scales`` divides it, and features are split evenly across scales.  The
    standardized inputs are passed through alongside the features when
    ``include_linear`` is set, so linear signals are represented exactly.
    """

    def __init__(self, n_components=200, bandwidth="median", scales=(1.0, 4.0, 16.0),
                 include_linear=True, random_state=0):
        self.n_components = n_components
        self.bandwidth = bandwidth
        self.scales = scales
        self.include_linear = include_linear
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.scaler_ = StandardScaler().fit(X)
        Z = self.scaler_.transform(X)
        if self.bandwidth == "median":
            self.bandwidth_ = median_bandwidth(Z, random_state=self.random_state)
        else:
            self.bandwidth_ = float(self.bandwidth)
        scales = tuple(self.scales) or (1.0,)
        counts = np.full(len(scales), self.n_components // len(scales))
        counts[: self.n_components % len(scales)] += 1
        self.samplers_ = []
        for i, (scale, m) in enumerate(zip(scales, counts)):
            if m == 0:
                continue
            length = self.bandwidth_ / scale
            sampler = RBFSampler(gamma=0.5 / length**2, n_components=int(m),
                                 random_state=derive_seed(self.random_state, i))
            self.samplers_.append(sampler.fit(Z))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "samplers_")
        Z = self.scaler_.transform(check_array(X))
        blocks = [s.transform(Z) for s in self.samplers_]
        if self.include_linear:
            blocks.insert(0, Z)
        return np.hstack(blocks)

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)


class FourierRidge(RegressorMixin, BaseEstimator):
    """Ridge regression on :class:`FourierFeatures`, penalty chosen by leave-one-out CV."""

    def __init__(self, n_components=200, bandwidth="median", scales=(1.0, 4.0, 16.0),
                 alphas=(1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0), random_state=0):
        self.n_components = n_components
        self.bandwidth = bandwidth
        self.scales = scales
        self.alphas = alphas
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.features_ = FourierFeatures(self.n_components, self.bandwidth, self.scales,
                                         random_state=self.random_state).fit(X)
        self.ridge_ = RidgeCV(alphas=self.alphas).fit(self.features_.transform(X), y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "ridge_")
        return self.ridge_.predict(self.features_.transform(X))


class FourierLogistic(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression on :class:`FourierFeatures`."""

    def __init__(self, n_components=200, bandwidth="median", scales=(1.0, 4.0), C=1.0,
                 max_iter=500, random_state=0):
        self.n_components = n_components
        self.bandwidth = bandwidth
        self.scales = scales
        self.C = C
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.features_ = FourierFeatures(self.n_components, self.bandwidth, self.scales,
                                         random_state=self.random_state).fit(X)
        self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter)
        self.clf_.fit(self.features_.transform(X), y)
        self.classes_ = self.clf_.classes_
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "clf_")
        return self.clf_.predict_proba(self.features_.transform(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def _knn_size(n: int, k) -> int:
    k = math.ceil(n**0.4) if k is None else int(k)
    return max(1, min(k, n))


class AdaptiveKNNRegressor(RegressorMixin, BaseEstimator):
    """k-nearest-neighbour regression with ``k = ceil(n ** 0.4)`` unless ``n_neighbors`` is set."""

    def __init__(self, n_neighbors=None):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.k_ = _knn_size(len(y), self.n_neighbors)
        self.model_ = make_pipeline(StandardScaler(), KNeighborsRegressor(n_neighbors=self.k_)).fit(X, y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)


class AdaptiveKNNClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, n_neighbors=None):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.k_ = _knn_size(len(y), self.n_neighbors)
        self.model_ = make_pipeline(StandardScaler(), KNeighborsClassifier(n_neighbors=self.k_)).fit(X, y)
        self.classes_ = self.model_.classes_
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(X)

    def predict(self, X):
        return self.model_.predict(X)


_MLP_DEFAULTS = dict(hidden_layer_sizes=(100, 100), activation="tanh", solver="adam",
                     learning_rate_init=1e-3, batch_size=128, max_iter=300, early_stopping=True,
                     validation_fraction=0.125, n_iter_no_change=10, alpha=1e-4)


def make_regressor(family: str = "ridge-fourier", random_state: int = 0, **params):
    """Unfitted regressor for ``family`` with ``params`` overriding the defaults."""
    if family == "ridge-fourier":
        return FourierRidge(random_state=random_state, **params)
    if family == "mlp":
        return make_pipeline(StandardScaler(), MLPRegressor(random_state=random_state % 2**32,
                                                            **{**_MLP_DEFAULTS, **params}))
    if family == "knn":
        return AdaptiveKNNRegressor(**params)
    raise ValueError(f"unknown model family {family!r}; expected one of {FAMILIES}")


def make_classifier(family: str = "ridge-fourier", random_state: int = 0, **params):
    if family == "ridge-fourier":
        return FourierLogistic(random_state=random_state, **params)
    if family == "mlp":
        return make_pipeline(StandardScaler(), MLPClassifier(random_state=random_state % 2**32,
                                                             **{**_MLP_DEFAULTS, **params}))
    if family == "knn":
        return AdaptiveKNNClassifier(**params)
    raise ValueError(f"unknown model family {family!r}; expected one of {FAMILIES}")


# ---------------------------------------------------------------- contracts


def clip_simplex(p, eps: float):
    """Project rows of ``p`` onto ``{q in simplex : q >= eps}`` by flooring and rescaling the rest."""
    p = np.array(p, dtype=float)
    m = p.shape[-1]
    if eps <= 0:
        return p / p.sum(-1, keepdims=True)
    if eps * m >= 1:
        raise ValueError(f"clip_eps={eps} infeasible for {m} classes")
    p = np.clip(p, 0.0, None)
    p /= np.where(p.sum(-1, keepdims=True) > 0, p.sum(-1, keepdims=True), 1.0)
    floored = np.zeros(p.shape, dtype=bool)
    for _ in range(m):
        floored |= p < eps
        free_mass = 1.0 - eps * floored.sum(-1, keepdims=True)
        rest = np.where(floored, 0.0, p)
        rest_sum = rest.sum(-1, keepdims=True)
        scaled = np.where(rest_sum > 0, rest * free_mass / np.where(rest_sum > 0, rest_sum, 1.0),
                          free_mass / np.maximum((~floored).sum(-1, keepdims=True), 1))
        p = np.where(floored, eps, scaled)
        if not np.any((p < eps - 1e-15) & ~floored):
            break
    return p


class RegressionModel:
    """Fitted regressor whose predictions are optionally clamped to an interval."""

    def __init__(self, estimator, clamp: Interval | None = None):
        self.estimator = estimator
        self.clamp = clamp

    def fit(self, X, y) -> "RegressionModel":
        y = np.asarray(y, dtype=float)
        if np.ptp(y) == 0:
            # constant target: exact, and avoids solver warnings
            self.estimator = DummyRegressor(strategy="constant", constant=float(y[0]))
        self.estimator.fit(X, y)
        return self

    def predict(self, X) -> np.ndarray:
        out = np.asarray(self.estimator.predict(np.asarray(X, dtype=float)), dtype=float).ravel()
        if self.clamp is not None:
            out = np.clip(out, self.clamp.lo, self.clamp.hi)
        return out


class ProbabilityModel:
    """Fitted classifier returning clipped probabilities over ``n_classes`` labels."""

    def __init__(self, estimator, n_classes: int, clip_eps: float = 0.01):
        self.estimator = estimator
        self.n_classes = int(n_classes)
        self.clip_eps = float(clip_eps)

    def fit(self, X, labels) -> "ProbabilityModel":
        labels = np.asarray(labels).astype(np.int64)
        present = np.unique(labels)
        if present.size == 1:
            self.estimator = None
            self.constant_ = int(present[0])
            self.classes_ = present
        else:
            self.estimator.fit(X, labels)
            self.classes_ = np.asarray(self.estimator.classes_).astype(np.int64)
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        full = np.zeros((len(X), self.n_classes))
        if self.estimator is None:
            full[:, self.constant_] = 1.0
        else:
            full[:, self.classes_] = self.estimator.predict_proba(X)
        return clip_simplex(full, self.clip_eps)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class FitConfig:
    """Model family, hyperparameters and fitting policy for one learning stage."""

    model_family: str = "ridge-fourier"
    params: dict = field(default_factory=dict)
    classifier_params: dict = field(default_factory=dict)
    seed: int = 0
    cross_fit_folds: int = 1
    clip_eps: float = 0.01
    min_cell_size: int = 20

    def __post_init__(self):
        if self.model_family not in FAMILIES:
            raise ValueError(f"unknown model family {self.model_family!r}; expected one of {FAMILIES}")
        if int(self.cross_fit_folds) < 1:
            raise ValueError("cross_fit_folds must be >= 1")
        if not 0 <= self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in [0, 0.5)")
        if int(self.min_cell_size) < 1:
            raise ValueError("min_cell_size must be >= 1")

    def regressor(self, *seed_parts: int, clamp: Interval | None = None) -> RegressionModel:
        seed = derive_seed(self.seed, *seed_parts)
        return RegressionModel(make_regressor(self.model_family, seed, **self.params), clamp)

    def classifier(self, n_classes: int, *seed_parts: int) -> ProbabilityModel:
        seed = derive_seed(self.seed, *seed_parts)
        est = make_classifier(self.model_family, seed, **self.classifier_params)
        return ProbabilityModel(est, n_classes, self.clip_eps)


def _side_code(side: str) -> int:
    if side not in SIDES:
        raise ValueError(f"side must be '+' or '-', got {side!r}")
    return SIDES.index(side)


def _resolve_support(train: Dataset, support: Interval | None) -> Interval:
    support = support if support is not None else train.support
    if support is None:
        raise ValueError("outcome support is required; infer one with dataset.infer_support")
    return support


def _require_rows(mask: np.ndarray, minimum: int, what: str) -> None:
    count = int(mask.sum())
    if count < minimum:
        raise CellSizeError(f"{what} has {count} rows, fewer than the minimum {minimum}")


# ---------------------------------------------------------------- stage-1 fitting


def fit_response_surfaces(train: Dataset, cfg: FitConfig = FitConfig(),
                          support: Interval | None = None) -> dict[tuple[int, int], RegressionModel]:
    """One regressor per ``(env, treatment)`` cell, predictions clamped to the support."""
    support = _resolve_support(train, support)
    models = {}
    for e in range(train.num_envs):
        for a in train.treatments:
            mask = (train.env == e) & (train.treatment == a)
            _require_rows(mask, cfg.min_cell_size, f"cell (env={e}, treatment={a})")
            models[e, a] = cfg.regressor(_TAG_MU, e, a, clamp=support).fit(train.X[mask], train.y[mask])
    return models


def fit_propensities(train: Dataset, cfg: FitConfig = FitConfig()) -> dict[int, ProbabilityModel]:
    """One treatment classifier per environment, fit on that environment's rows."""
    models = {}
    n_t = max(train.treatments) + 1
    for e in range(train.num_envs):
        mask = train.env == e
        _require_rows(mask, cfg.min_cell_size, f"environment {e}")
        models[e] = cfg.classifier(n_t, _TAG_PI, e).fit(train.X[mask], train.treatment[mask])
    return models


def fit_environment_model(train: Dataset, cfg: FitConfig = FitConfig()) -> ProbabilityModel:
    """Classifier for ``P(E = e | X = x)`` over all environments."""
    if train.num_envs < 2:
        raise ValueError("an environment model needs at least two environments")
    return cfg.classifier(train.num_envs, _TAG_DELTA).fit(train.X, train.env)


def _endpoints(support: Interval, side: str) -> tuple[float, float]:
    """``(s1, s2)`` for the upper side, swapped for the lower side."""
    return (support.lo, support.hi) if _side_code(side) == 0 else (support.hi, support.lo)


def transformed_outcome_arrays(env, a, y, e: int, j: int, side: str, support: Interval) -> np.ndarray:
    """Transformed outcome for every row; zero outside environments ``e`` and ``j``."""
    if e == j:
        raise ValueError("transformed outcomes are defined for cross-environment pairs only (e != j)")
    env = np.asarray(env)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    s1, s2 = _endpoints(support, side)
    in_e = (env == e).astype(float)
    in_j = (env == j).astype(float)
    return in_e * (a * y + (1.0 - a) * s2) + in_j * ((1.0 - a) * y + a * s1)


def fit_transformed_responses(train: Dataset, pair: tuple[int, int], side: str,
                              support: Interval | None = None,
                              cfg: FitConfig = FitConfig()) -> dict[int, RegressionModel]:
    """Regress the transformed outcome on ``X`` within each leg environment of ``pair``."""
    support = _resolve_support(train, support)
    e, j = pair
    target = transformed_outcome_arrays(train.env, train.treatment, train.y, e, j, side, support)
    models = {}
    for leg in (e, j):
        mask = train.env == leg
        _require_rows(mask, cfg.min_cell_size, f"environment {leg}")
        models[leg] = cfg.regressor(_TAG_R, _side_code(side), e, j, leg, clamp=support).fit(
            train.X[mask], target[mask]
        )
    return models


@dataclass
class NuisanceSet:
    """Fitted first-stage models.

    Any of the model groups may be empty when the learner that built the set
    does not need it; querying a missing model raises ``KeyError`` naming it.
    """

    support: Interval
    num_envs: int
    n_treatments: int = 2
    clip_eps: float = 0.01
    mu_hat: dict = field(default_factory=dict)
    pi_hat: dict = field(default_factory=dict)
    delta_hat: ProbabilityModel | None = None
    r_hat: dict = field(default_factory=dict)

    def predict_mu(self, X) -> np.ndarray:
        """``(n, n_envs, n_treatments)`` response surfaces."""
        X = np.asarray(X, dtype=float)
        out = np.empty((len(X), self.num_envs, self.n_treatments))
        for e in range(self.num_envs):
            for a in range(self.n_treatments):
                out[:, e, a] = self._get(self.mu_hat, (e, a), "response surface").predict(X)
        return out

    def predict_pi(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack([self._get(self.pi_hat, e, "propensity").predict_proba(X)
                         for e in range(self.num_envs)], axis=1)

    def predict_delta(self, X) -> np.ndarray:
        if self.delta_hat is None:
            raise KeyError("environment model was not fitted")
        return self.delta_hat.predict_proba(np.asarray(X, dtype=float))

    def predict_r(self, X, e: int, j: int, side: str) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        r_e = self._get(self.r_hat, (side, e, j, e), "transformed response").predict(X)
        r_j = self._get(self.r_hat, (side, e, j, j), "transformed response").predict(X)
        return r_e, r_j

    @staticmethod
    def _get(group: dict, key, what: str):
        try:
            return group[key]
        except KeyError:
            raise KeyError(f"{what} {key} was not fitted") from None


def fit_nuisances(train: Dataset, cfg: FitConfig = FitConfig(), support: Interval | None = None,
                  need: tuple[str, ...] = ("mu", "pi", "delta", "r")) -> NuisanceSet:
    """Fit the requested model groups on ``train``."""
    support = _resolve_support(train, support)
    nuis = NuisanceSet(support=support, num_envs=train.num_envs, n_treatments=max(train.treatments) + 1,
                       clip_eps=cfg.clip_eps)
    if "mu" in need:
        nuis.mu_hat = fit_response_surfaces(train, cfg, support)
    if "pi" in need:
        nuis.pi_hat = fit_propensities(train, cfg)
    if "delta" in need:
        nuis.delta_hat = fit_environment_model(train, cfg)
    if "r" in need:
        for side in SIDES:
            for e in range(train.num_envs):
                for j in range(train.num_envs):
                    if e == j:
                        continue
                    for leg, model in fit_transformed_responses(train, (e, j), side, support, cfg).items():
                        nuis.r_hat[side, e, j, leg] = model
    return nuis


# ---------------------------------------------------------------- cross-fitting


@dataclass
class CrossFitNuisances:
    """Fold-specific nuisance sets with out-of-fold routing.

    ``folds[i]`` is the fold index of training row ``i``; ``sets[k]`` was fit
    on all rows outside fold ``k``.  Queries for new points average the fold
    models.
    """

    sets: list[NuisanceSet]
    folds: np.ndarray

    @property
    def support(self) -> Interval:
        return self.sets[0].support

    @property
    def num_envs(self) -> int:
        return self.sets[0].num_envs

    @property
    def clip_eps(self) -> float:
        return self.sets[0].clip_eps

    def out_of_fold(self, name: str, X, *args):
        """Evaluate ``predict_<name>`` for training rows, each with the model that did not see it."""
        X = np.asarray(X, dtype=float)
        if len(X) != len(self.folds):
            raise ValueError("out-of-fold prediction needs exactly the training rows")
        first = None
        for k, nuis in enumerate(self.sets):
            rows = self.folds == k
            pred = getattr(nuis, f"predict_{name}")(X[rows], *args)
            parts = pred if isinstance(pred, tuple) else (pred,)
            if first is None:
                first = [np.empty((len(X),) + p.shape[1:]) for p in parts]
            for buf, p in zip(first, parts):
                buf[rows] = p
        return tuple(first) if len(first) > 1 else first[0]

    def _average(self, name: str, X, *args):
        preds = [getattr(n, f"predict_{name}")(X, *args) for n in self.sets]
        if isinstance(preds[0], tuple):
            return tuple(np.mean([p[i] for p in preds], axis=0) for i in range(len(preds[0])))
        return np.mean(preds, axis=0)

    def predict_mu(self, X):
        return self._average("mu", X)

    def predict_pi(self, X):
        return self._average("pi", X)

    def predict_delta(self, X):
        return self._average("delta", X)

    def predict_r(self, X, e, j, side):
        return self._average("r", X, e, j, side)


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Balanced fold labels: fold sizes differ by at most one."""
    labels = np.arange(n) % k
    return np.random.default_rng(derive_seed(seed, _TAG_FOLDS)).permutation(labels)


def cross_fit(train: Dataset, cfg: FitConfig, support: Interval | None = None,
              need: tuple[str, ...] = ("mu", "pi", "delta", "r")) -> CrossFitNuisances | NuisanceSet:
    """Fit ``cfg.cross_fit_folds`` fold-specific nuisance sets; ``K = 1`` is plain fitting."""
    k = int(cfg.cross_fit_folds)
    if k == 1:
        return fit_nuisances(train, cfg, support, need)
    if k > len(train) / 10:
        raise ValueError(f"cross_fit_folds={k} too large for {len(train)} rows (need K <= n/10)")
    folds = fold_assignment(len(train), k, cfg.seed)
    sets = [fit_nuisances(train.subset(np.flatnonzero(folds != f)), cfg, support, need) for f in range(k)]
    return CrossFitNuisances(sets=sets, folds=folds)


__all__ += ["fold_assignment", "transformed_outcome_arrays", "median_bandwidth", "SIDES"]
