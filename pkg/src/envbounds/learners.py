"""Meta-learners for CATE bounds across environments.

Pair bounds ``b_{e,j}`` are learned one ``(side, e, j)`` at a time: within
pairs (``e == j``) regress a nuisance-free pseudo-outcome on ``X`` inside
environment ``e``; cross pairs use a plug-in over transformed responses
(CB-PI) or a second-stage regression of an RA / IPW / DR pseudo-outcome on all
rows.  The naive plug-in instead evaluates the closed-form bounds with
estimated propensities and response surfaces.

Pseudo-outcome functions are vectorised over rows and take the already
evaluated nuisance predictions, so they can be checked against oracle
nuisances directly.
"""

from __future__ import annotations

import enum
import time
from pathlib import Path

import joblib
import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bounds import BoundMatrix, Interval, pair_bound_arrays
from .dataset import Dataset, SupportMode, infer_support
from .nuisance import (
    SIDES,
    CrossFitNuisances,
    FitConfig,
    _TAG_STAGE2,
    _endpoints,
    _side_code,
    cross_fit,
    transformed_outcome_arrays,
)

__all__ = [
    "Method",
    "BoundLearner",
    "wb_pseudo",
    "transformed_outcome",
    "cb_pi_bound",
    "cb_ra_pseudo",
    "cb_ipw_pseudo",
    "cb_dr_pseudo",
    "fit_bounds",
    "save_estimator",
    "load_estimator",
]

ARTIFACT_FORMAT = "envbounds.BoundLearner"
ARTIFACT_VERSION = 1


class Method(str, enum.Enum):
    NAIVE_PLUGIN = "naive"
    CB_PI = "cb_pi"
    CB_RA = "cb_ra"
    CB_IPW = "cb_ipw"
    CB_DR = "cb_dr"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("-", "_")
        aliases = {"naive_plugin": "naive", "plugin": "naive", "pi": "cb_pi", "ra": "cb_ra",
                   "ipw": "cb_ipw", "dr": "cb_dr"}
        text = aliases.get(text, text)
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def needs(self) -> tuple[str, ...]:
        return _NEEDS[self]

    @property
    def two_stage(self) -> bool:
        return self is not Method.NAIVE_PLUGIN


_NEEDS = {
    Method.NAIVE_PLUGIN: ("mu", "pi"),
    Method.CB_PI: ("r",),
    Method.CB_RA: ("r",),
    Method.CB_IPW: ("delta",),
    Method.CB_DR: ("delta", "r"),
}


# ---------------------------------------------------------------- pseudo-outcomes


def wb_pseudo(env, a, y, e: int, side: str, support: Interval) -> np.ndarray:
    """Within-environment pseudo-outcome; ``nan`` on rows outside environment ``e``.

    Upper side: ``Y - s1`` for treated rows and ``s2 - Y`` for untreated rows.
    """
    s1, s2 = _endpoints(support, side)
    env = np.asarray(env)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    value = a * y + (1.0 - a) * s2 - (1.0 - a) * y - a * s1
    return np.where(env == e, value, np.nan)


def transformed_outcome(env, a, y, e: int, j: int, side: str, support: Interval) -> np.ndarray:
    """Transformed outcome for the cross pair ``(e, j)``; rows outside ``{e, j}`` get 0."""
    return transformed_outcome_arrays(env, a, y, e, j, side, support)


def cb_pi_bound(r_e, r_j):
    """Plug-in cross bound: difference of the two transformed responses."""
    return np.asarray(r_e, dtype=float) - np.asarray(r_j, dtype=float)


def cb_ra_pseudo(env, a, y, r_e, r_j, e: int, j: int, side: str, support: Interval) -> np.ndarray:
    env = np.asarray(env)
    y_t = transformed_outcome(env, a, y, e, j, side, support)
    r_e = np.asarray(r_e, dtype=float)
    r_j = np.asarray(r_j, dtype=float)
    return np.where(env == e, y_t - r_j, np.where(env == j, r_e - y_t, r_e - r_j))


def cb_ipw_pseudo(env, a, y, delta_e, delta_j, e: int, j: int, side: str, support: Interval) -> np.ndarray:
    """Inverse-environment-probability weighted pseudo-outcome; ``delta`` must already be clipped."""
    env = np.asarray(env)
    y_t = transformed_outcome(env, a, y, e, j, side, support)
    w = (env == e) / np.asarray(delta_e, dtype=float) - (env == j) / np.asarray(delta_j, dtype=float)
    return w * y_t


def cb_dr_pseudo(env, a, y, r_e, r_j, delta_e, delta_j, e: int, j: int, side: str,
                 support: Interval) -> np.ndarray:
    env = np.asarray(env)
    delta_e = np.asarray(delta_e, dtype=float)
    delta_j = np.asarray(delta_j, dtype=float)
    ipw = cb_ipw_pseudo(env, a, y, delta_e, delta_j, e, j, side, support)
    return (ipw + (1.0 - (env == e) / delta_e) * np.asarray(r_e, dtype=float)
            - (1.0 - (env == j) / delta_j) * np.asarray(r_j, dtype=float))


def _stage1(nuis, name: str, X, *args, in_sample: bool):
    """Stage-1 predictions, routed out-of-fold for training rows under cross-fitting."""
    if in_sample and isinstance(nuis, CrossFitNuisances):
        return nuis.out_of_fold(name, X, *args)
    return getattr(nuis, f"predict_{name}")(X, *args)


def cross_pseudo_outcome(method: Method, nuis, X, env, a, y, e: int, j: int, side: str,
                         support: Interval, in_sample: bool = True) -> np.ndarray:
    """RA / IPW / DR pseudo-outcomes for every row, using the nuisance predictions at each row."""
    method = Method.parse(method)
    if method in (Method.CB_RA, Method.CB_DR):
        r_e, r_j = _stage1(nuis, "r", X, e, j, side, in_sample=in_sample)
    if method in (Method.CB_IPW, Method.CB_DR):
        delta = _stage1(nuis, "delta", X, in_sample=in_sample)
        delta_e, delta_j = delta[:, e], delta[:, j]
    if method is Method.CB_RA:
        return cb_ra_pseudo(env, a, y, r_e, r_j, e, j, side, support)
    if method is Method.CB_IPW:
        return cb_ipw_pseudo(env, a, y, delta_e, delta_j, e, j, side, support)
    if method is Method.CB_DR:
        return cb_dr_pseudo(env, a, y, r_e, r_j, delta_e, delta_j, e, j, side, support)
    raise ValueError(f"{method.value} has no cross-environment pseudo-outcome")


# ---------------------------------------------------------------- estimator


def _fit_stage2(cfg: FitConfig, side: str, e: int, j: int, X, target):
    model = cfg.regressor(_TAG_STAGE2, _side_code(side), e, j)
    return (side, e, j), model.fit(X, target)


class BoundLearner(BaseEstimator):
    """Estimate CATE bounds from multi-environment data.

    Parameters
    ----------
    method : {"naive", "cb_pi", "cb_ra", "cb_ipw", "cb_dr"}
        Cross-environment learner.  Within-environment pairs always use the
        within-environment pseudo-outcome, except for ``"naive"`` which plugs
        estimated nuisances into every pair.
    family : {"ridge-fourier", "mlp", "knn"}
        Stage-1 model family.
    family_params, classifier_params : dict, optional
        Overrides for the stage-1 regressors and classifiers.
    stage2_family, stage2_params : optional
        Stage-2 regressor; defaults to the stage-1 family and parameters.
    support : str, Interval or tuple
        ``"minmax"``, ``"quantile:ALPHA"``, ``"explicit:LO,HI"``, or a fixed
        interval.  Modes are resolved on the training data.
    clip_eps : float
        Floor applied to every predicted probability.
    cross_fit_folds : int
        ``1`` fits stage 1 on all training rows.
    min_cell_size : int
        Minimum rows per fitted cell.
    random_state : int
    n_jobs : int, optional
        Parallel workers for the stage-2 fits; results do not depend on it.

    Attributes
    ----------
    support_ : Interval
    n_envs_ : int
    nuisances_ : NuisanceSet or CrossFitNuisances
    stage2_ : dict mapping ``(side, e, j)`` to fitted regressors
    fit_times_ : dict of wall-clock seconds per stage
    """

    def __init__(self, method="cb_dr", family="ridge-fourier", family_params=None, classifier_params=None,
                 stage2_family=None, stage2_params=None, support="minmax", clip_eps=0.01,
                 cross_fit_folds=1, min_cell_size=20, random_state=0, n_jobs=None):
        self.method = method
        self.family = family
        self.family_params = family_params
        self.classifier_params = classifier_params
        self.stage2_family = stage2_family
        self.stage2_params = stage2_params
        self.support = support
        self.clip_eps = clip_eps
        self.cross_fit_folds = cross_fit_folds
        self.min_cell_size = min_cell_size
        self.random_state = random_state
        self.n_jobs = n_jobs

    # -- configuration -------------------------------------------------

    def stage1_config(self) -> FitConfig:
        return FitConfig(
            model_family=self.family,
            params=dict(self.family_params or {}),
            classifier_params=dict(self.classifier_params or {}),
            seed=int(self.random_state),
            cross_fit_folds=int(self.cross_fit_folds),
            clip_eps=float(self.clip_eps),
            min_cell_size=int(self.min_cell_size),
        )

    def stage2_config(self) -> FitConfig:
        family = self.stage2_family or self.family
        params = self.stage2_params
        if params is None:
            params = self.family_params if family == self.family else {}
        return FitConfig(model_family=family, params=dict(params or {}), seed=int(self.random_state),
                         min_cell_size=int(self.min_cell_size))

    def _resolve_support(self, data: Dataset) -> Interval:
        s = self.support
        if isinstance(s, Interval):
            return s
        if isinstance(s, (tuple, list)) and len(s) == 2:
            return infer_support(data, SupportMode("explicit", lo=float(s[0]), hi=float(s[1])))
        return infer_support(data, SupportMode.parse(s))

    # -- fitting ---------------------------------------------------------

    def fit(self, X, y, treatment, env, support: Interval | None = None, nuisances=None):
        """Fit both stages.

        ``support`` overrides the ``support`` parameter with a fixed interval.
        ``nuisances`` injects a pre-fitted stage 1 (any object exposing the
        ``predict_mu/pi/delta/r`` interface), skipping stage-1 fitting.
        """
        X = check_array(X)
        data = Dataset(env=np.asarray(env), X=X, treatment=np.asarray(treatment), y=np.asarray(y),
                       num_envs=int(np.max(env)) + 1)
        return self.fit_dataset(data, support=support, nuisances=nuisances)

    def fit_dataset(self, data: Dataset, support: Interval | None = None, nuisances=None):
        method = Method.parse(self.method)
        if data.treatments != (0, 1) or not np.isin(data.treatment, (0, 1)).all():
            raise ValueError("bound learners need a binary treatment coded 0/1")
        if method.two_stage and data.num_envs < 2:
            raise ValueError(f"{method.value} needs at least two environments (no cross pairs otherwise)")
        self.support_ = support if support is not None else (data.support or self._resolve_support(data))
        self.n_envs_ = data.num_envs
        self.n_features_in_ = data.covariate_dim
        self.method_ = method
        t0 = time.perf_counter()
        if nuisances is None:
            nuisances = cross_fit(data, self.stage1_config(), self.support_, need=method.needs)
        self.nuisances_ = nuisances
        t1 = time.perf_counter()
        self.stage2_ = self._fit_stage2(data, method) if method.two_stage else {}
        t2 = time.perf_counter()
        self.fit_times_ = {"stage1": t1 - t0, "stage2": t2 - t1}
        return self

    def _fit_stage2(self, data: Dataset, method: Method) -> dict:
        cfg = self.stage2_config()
        tasks = []
        for side in SIDES:
            for e in range(data.num_envs):
                for j in range(data.num_envs):
                    if e == j:
                        target = wb_pseudo(data.env, data.treatment, data.y, e, side, self.support_)
                        rows = data.env == e
                        tasks.append((side, e, j, data.X[rows], target[rows]))
                    elif method is not Method.CB_PI:
                        target = cross_pseudo_outcome(method, self.nuisances_, data.X, data.env,
                                                      data.treatment, data.y, e, j, side, self.support_)
                        tasks.append((side, e, j, data.X, target))
        for side, e, j, Xs, target in tasks:
            if len(target) < cfg.min_cell_size:
                raise ValueError(f"stage 2 for pair ({e}, {j}), side {side}: only {len(target)} rows")
        try:
            fitted = Parallel(n_jobs=self.n_jobs)(
                delayed(_fit_stage2)(cfg, side, e, j, Xs, target) for side, e, j, Xs, target in tasks
            )
        except Exception as exc:
            raise RuntimeError(f"stage-2 fit failed: {exc}") from exc
        return dict(fitted)

    @classmethod
    def from_nuisances(cls, nuisances, support: Interval, n_envs: int, n_features: int = 1) -> "BoundLearner":
        """Naive plug-in estimator built directly from a nuisance provider (no training data)."""
        est = cls(method=Method.NAIVE_PLUGIN.value)
        est.support_, est.n_envs_, est.method_ = support, int(n_envs), Method.NAIVE_PLUGIN
        est.n_features_in_ = n_features
        est.nuisances_, est.stage2_, est.fit_times_ = nuisances, {}, {}
        return est

    # -- prediction --------------------------------------------------------

    def pair_bounds(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Estimated ``(upper, lower)`` pair bounds, each ``(n, n_envs, n_envs)``."""
        check_is_fitted(self, "nuisances_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fit with {self.n_features_in_}")
        k = self.n_envs_
        if self.method_ is Method.NAIVE_PLUGIN:
            pi = self.nuisances_.predict_pi(X)
            mu = np.clip(self.nuisances_.predict_mu(X), self.support_.lo, self.support_.hi)
            return pair_bound_arrays(pi, mu, self.support_)
        out = {side: np.empty((len(X), k, k)) for side in SIDES}
        for side in SIDES:
            for e in range(k):
                for j in range(k):
                    if e != j and self.method_ is Method.CB_PI:
                        r_e, r_j = self.nuisances_.predict_r(X, e, j, side)
                        out[side][:, e, j] = cb_pi_bound(r_e, r_j)
                    else:
                        out[side][:, e, j] = self.stage2_[side, e, j].predict(X)
        return out["+"], out["-"]

    def predict_bounds(self, X, scope: str = "all") -> BoundMatrix:
        upper, lower = self.pair_bounds(X)
        return BoundMatrix.from_arrays(upper, lower, scope=scope)

    def predict(self, X) -> np.ndarray:
        """Combined bounds as an ``(n, 2)`` array of ``[lower, upper]``."""
        bm = self.predict_bounds(X)
        return np.column_stack([bm.combined_lower, bm.combined_upper])


def fit_bounds(train: Dataset, method="cb_dr", nuis_cfg: FitConfig = FitConfig(),
               stage2_cfg: FitConfig | None = None, support: Interval | None = None) -> BoundLearner:
    """Functional front end: build and fit a :class:`BoundLearner` from two stage configs."""
    stage2_cfg = stage2_cfg or nuis_cfg
    est = BoundLearner(
        method=Method.parse(method).value,
        family=nuis_cfg.model_family,
        family_params=dict(nuis_cfg.params),
        classifier_params=dict(nuis_cfg.classifier_params),
        stage2_family=stage2_cfg.model_family,
        stage2_params=dict(stage2_cfg.params),
        clip_eps=nuis_cfg.clip_eps,
        cross_fit_folds=nuis_cfg.cross_fit_folds,
        min_cell_size=nuis_cfg.min_cell_size,
        random_state=nuis_cfg.seed,
    )
    return est.fit_dataset(train, support=support)


def save_estimator(est: BoundLearner, path, **metadata) -> Path:
    """Persist a fitted estimator (with its nuisance set) as a versioned joblib artifact."""
    check_is_fitted(est, "nuisances_")
    path = Path(path)
    payload = {"format": ARTIFACT_FORMAT, "version": ARTIFACT_VERSION, "params": est.get_params(),
               "metadata": metadata, "estimator": est}
    joblib.dump(payload, path)
    return path


def load_estimator(path) -> tuple[BoundLearner, dict]:
    payload = joblib.load(Path(path))
    if not isinstance(payload, dict) or payload.get("format") != ARTIFACT_FORMAT:
        raise ValueError(f"{path} is not a bound-estimator artifact")
    if payload.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"{path}: unsupported artifact version {payload.get('version')}")
    return payload["estimator"], payload.get("metadata", {})
