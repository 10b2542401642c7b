import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from envbounds.bounds import Interval
from envbounds.dataset import from_arrays
from envbounds.dgp import DgpConfig, OracleModels, oracle_table
from envbounds.evaluation import score
from envbounds.learners import (
    BoundLearner,
    Method,
    cb_dr_pseudo,
    cb_ipw_pseudo,
    cb_pi_bound,
    cb_ra_pseudo,
    fit_bounds,
    load_estimator,
    save_estimator,
    transformed_outcome,
    wb_pseudo,
)
from envbounds.nuisance import FitConfig

S = Interval(0.0, 10.0)


def test_method_parsing():
    assert Method.parse("CB-DR") is Method.CB_DR
    assert Method.parse("ipw") is Method.CB_IPW
    assert Method.parse("naive_plugin") is Method.NAIVE_PLUGIN
    assert Method.CB_PI.two_stage and not Method.NAIVE_PLUGIN.two_stage
    with pytest.raises(ValueError, match="unknown method"):
        Method.parse("u-learner")


def test_pseudo_outcomes_by_hand():
    env = np.array([0, 0, 1, 1])
    a = np.array([1, 0, 1, 0])
    y = np.array([3.0, 4.0, 5.0, 6.0])
    wb = wb_pseudo(env, a, y, 0, "+", S)
    np.testing.assert_allclose(wb[:2], [3.0, 6.0])  # Y - s1 ; s2 - Y
    assert np.isnan(wb[2:]).all()
    r_e, r_j = np.full(4, 2.0), np.full(4, 1.0)
    # transformed outcome (+, e=0, j=1): [3, 10, 0, 6]
    np.testing.assert_allclose(cb_ra_pseudo(env, a, y, r_e, r_j, 0, 1, "+", S), [2.0, 9.0, 2.0, -4.0])
    d_e, d_j = np.full(4, 0.5), np.full(4, 0.25)
    np.testing.assert_allclose(cb_ipw_pseudo(env, a, y, d_e, d_j, 0, 1, "+", S), [6.0, 20.0, 0.0, -24.0])
    dr = cb_dr_pseudo(env, a, y, r_e, r_j, d_e, d_j, 0, 1, "+", S)
    # ipw + (1 - 1{E=e}/d_e) r_e - (1 - 1{E=j}/d_j) r_j
    expected = np.array([6 - 2 - 1, 20 - 2 - 1, 0 + 2 + 3, -24 + 2 + 3])
    np.testing.assert_allclose(dr, expected)
    np.testing.assert_allclose(cb_pi_bound(r_e, r_j), 1.0)


def test_dr_reduces_to_ipw_and_ra():
    rng = np.random.default_rng(0)
    n = 50
    env, a, y = rng.integers(0, 2, n), rng.integers(0, 2, n), rng.uniform(0, 10, n)
    d = rng.uniform(0.1, 0.9, n)
    zeros = np.zeros(n)
    np.testing.assert_allclose(cb_dr_pseudo(env, a, y, zeros, zeros, d, 1 - d, 0, 1, "-", S),
                               cb_ipw_pseudo(env, a, y, d, 1 - d, 0, 1, "-", S))


def test_side_symmetry_metamorphic():
    """Lower side for (e, j) equals minus the upper side for (j, e) once treatment is flipped."""
    rng = np.random.default_rng(1)
    n = 200
    env, a, y = rng.integers(0, 3, n), rng.integers(0, 2, n), rng.uniform(0, 10, n)
    flip = 1 - a
    r0, r1 = rng.uniform(0, 10, n), rng.uniform(0, 10, n)
    d0, d1 = rng.uniform(0.1, 0.5, n), rng.uniform(0.1, 0.5, n)
    for e in range(3):
        np.testing.assert_allclose(wb_pseudo(env, a, y, e, "-", S), -wb_pseudo(env, flip, y, e, "+", S))
    np.testing.assert_allclose(transformed_outcome(env, a, y, 0, 1, "-", S),
                               transformed_outcome(env, flip, y, 1, 0, "+", S))
    np.testing.assert_allclose(cb_ra_pseudo(env, a, y, r0, r1, 0, 1, "-", S),
                               -cb_ra_pseudo(env, flip, y, r1, r0, 1, 0, "+", S))
    np.testing.assert_allclose(cb_ipw_pseudo(env, a, y, d0, d1, 0, 1, "-", S),
                               -cb_ipw_pseudo(env, flip, y, d1, d0, 1, 0, "+", S))
    np.testing.assert_allclose(cb_dr_pseudo(env, a, y, r0, r1, d0, d1, 0, 1, "-", S),
                               -cb_dr_pseudo(env, flip, y, r1, r0, d1, d0, 1, 0, "+", S))


@pytest.mark.parametrize("side", ["+", "-"])
def test_pseudo_outcomes_respect_clip_cap(side):
    rng = np.random.default_rng(2)
    n, eps = 5000, 0.01
    support = Interval(-3.0, 4.0)
    env, a = rng.integers(0, 2, n), rng.integers(0, 2, n)
    y = rng.uniform(support.lo, support.hi, n)
    r_e, r_j = rng.uniform(support.lo, support.hi, (2, n))
    d_e = rng.uniform(eps, 1 - eps, n)
    m = max(abs(support.lo), abs(support.hi))
    ipw = cb_ipw_pseudo(env, a, y, d_e, 1 - d_e, 0, 1, side, support)
    assert np.abs(ipw).max() <= m / eps
    dr = cb_dr_pseudo(env, a, y, r_e, r_j, d_e, 1 - d_e, 0, 1, side, support)
    assert np.abs(dr).max() <= m / eps + 2 * m * (1 + 1 / eps)
    ra = cb_ra_pseudo(env, a, y, r_e, r_j, 0, 1, side, support)
    assert np.abs(ra).max() <= 2 * m


def test_estimator_api():
    est = BoundLearner(method="cb_ra", family="knn", random_state=3)
    params = est.get_params()
    assert params["method"] == "cb_ra" and params["family"] == "knn"
    assert clone(est).get_params() == params
    est.set_params(method="cb_ipw")
    assert est.method == "cb_ipw"
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((2, 1)))


@pytest.fixture(scope="module")
def fitted(dgp1_small):
    cfg, train, _, test, support = dgp1_small
    return {m.value: BoundLearner(method=m.value, random_state=1).fit_dataset(train, support=support)
            for m in Method}


@pytest.mark.parametrize("method", [m.value for m in Method])
def test_every_method_fits_and_covers(fitted, dgp1_small, method):
    cfg, _, _, test, _ = dgp1_small
    est = fitted[method]
    pred = est.predict(test.X)
    assert pred.shape == (len(test), 2)
    report = score(est, cfg, test.X, scope="all")
    assert report.coverage >= 0.95 and report.beats_baseline
    if method == "naive":
        assert est.stage2_ == {}
    elif method == "cb_pi":
        assert sorted(est.stage2_) == [("+", 0, 0), ("+", 1, 1), ("-", 0, 0), ("-", 1, 1)]
    else:
        assert len(est.stage2_) == 8


def test_naive_with_oracle_nuisances_is_exact(dgp1_small):
    cfg, _, _, test, support = dgp1_small
    est = BoundLearner.from_nuisances(OracleModels(cfg, support), support, n_envs=2)
    xs = np.sort(test.X[:, 0])
    bm = est.predict_bounds(xs[:, None])
    table = oracle_table(cfg, xs, support)
    np.testing.assert_array_equal(bm.upper, table.bounds.upper)
    np.testing.assert_array_equal(bm.lower, table.bounds.lower)


def test_single_environment_is_rejected():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 1))
    with pytest.raises(ValueError, match="at least two environments"):
        BoundLearner(method="cb_dr").fit(X, rng.normal(size=200), rng.integers(0, 2, 200), np.zeros(200, int))


def test_non_binary_treatment_is_rejected():
    data = from_arrays(np.zeros((30, 1)), np.arange(30) % 3, np.zeros(30), np.arange(30) % 2, treatments=(0, 1, 2))
    with pytest.raises(ValueError, match="binary"):
        BoundLearner().fit_dataset(data, support=Interval(-1, 1))


def test_feature_mismatch(fitted):
    with pytest.raises(ValueError, match="features"):
        fitted["cb_dr"].predict(np.zeros((3, 2)))


def test_parallel_schedule_does_not_change_results(dgp1_small):
    _, train, _, test, support = dgp1_small
    a = BoundLearner(method="cb_dr", random_state=7, n_jobs=1).fit_dataset(train, support=support)
    b = BoundLearner(method="cb_dr", random_state=7, n_jobs=2).fit_dataset(train, support=support)
    np.testing.assert_array_equal(a.predict(test.X), b.predict(test.X))


def test_save_load_round_trip(tmp_path, fitted, dgp1_small):
    test = dgp1_small[3]
    p = save_estimator(fitted["cb_ipw"], tmp_path / "m.joblib", seed=1, note="x")
    est, meta = load_estimator(p)
    assert meta == {"seed": 1, "note": "x"}
    np.testing.assert_array_equal(est.predict(test.X), fitted["cb_ipw"].predict(test.X))
    (tmp_path / "junk.joblib").write_bytes(b"not a model")
    with pytest.raises(Exception):
        load_estimator(tmp_path / "junk.joblib")


def test_fit_bounds_front_end(dgp1_small):
    _, train, _, test, support = dgp1_small
    est = fit_bounds(train, "cb_pi", FitConfig(model_family="knn", seed=2), support=support)
    assert est.family == "knn" and est.predict(test.X).shape == (len(test), 2)


def test_three_environments_give_nine_pairs():
    rng = np.random.default_rng(4)
    n = 3000
    x = rng.uniform(-1, 1, n)
    env = rng.integers(0, 3, n)
    p = 1 / (1 + np.exp(-(2 * x + (env - 1))))
    a = (rng.uniform(size=n) < p).astype(int)
    y = x / 3 * a + x + rng.normal(scale=0.3, size=n)
    for method in ("naive", "cb_dr"):
        est = BoundLearner(method=method).fit(x[:, None], y, a, env)
        bm = est.predict_bounds(np.linspace(-0.5, 0.5, 5)[:, None])
        assert bm.upper.shape == (5, 3, 3)
    assert len(est.stage2_) == 18


@pytest.mark.slow
def test_cross_fitting_does_not_blow_up():
    from envbounds.dataset import SplitSpec, infer_support, split
    from envbounds.dgp import sample_synthetic

    cfg = DgpConfig("dataset1", n=10000, seed=1)
    train, _, test = split(sample_synthetic(cfg), SplitSpec(seed=1))
    support = infer_support(train)
    plain = score(BoundLearner(method="cb_dr").fit_dataset(train, support=support), cfg, test.X, "cross")
    folded = score(BoundLearner(method="cb_dr", cross_fit_folds=5).fit_dataset(train, support=support),
                   cfg, test.X, "cross")
    assert folded.rmse_pooled <= (0.132 + 2 * 0.061) * 1.5
    assert folded.rmse_pooled <= 2 * plain.rmse_pooled
