import math

import numpy as np
import pytest

from conftest import window_oracle
from envbounds.bounds import Interval
from envbounds.dgp import (
    DgpConfig,
    OracleModels,
    _simpson_weights,
    covariate_grid,
    environment_probability,
    oracle_nuisances,
    oracle_table,
    sample_synthetic,
)

SUPPORT = Interval(-3.0, 4.5)


def test_config_validation():
    with pytest.raises(ValueError):
        DgpConfig("dataset3")
    with pytest.raises(ValueError):
        DgpConfig(n=0)
    with pytest.raises(ValueError):
        DgpConfig(noise_scale=0.0)


def test_simpson_rule_is_exact_for_cubics():
    nodes, w = _simpson_weights(201)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.dot(w, nodes**3) == pytest.approx(0.25, abs=1e-14)
    with pytest.raises(ValueError):
        _simpson_weights(200)


def test_marginal_propensity_closed_form():
    nu = oracle_nuisances(DgpConfig("dataset1"), 0.0)
    closed = math.log((1 + math.e) / 2)
    assert nu.pi[1, 1] == pytest.approx(closed, abs=1e-10)
    assert nu.pi[0, 1] == pytest.approx(1 - closed, abs=1e-10)
    assert nu.pi[1, 1] == pytest.approx(0.6201, abs=1e-4)


def test_environment_probability_examples():
    assert environment_probability(DgpConfig("dataset1"), 0.0) == 0.5
    assert environment_probability(DgpConfig("dataset2"), 0.0) == 0.5
    x = covariate_grid(181)
    np.testing.assert_allclose(oracle_nuisances(DgpConfig("dataset2"), x).delta[:, 1], 0.15 * np.sin(5 * x) + 0.5)
    for variant in ("dataset1", "dataset2"):
        np.testing.assert_allclose(oracle_nuisances(DgpConfig(variant), 0.0).delta, [0.5, 0.5])


def test_oracle_invariants():
    x = covariate_grid(181)
    for variant in ("dataset1", "dataset2"):
        nu = oracle_nuisances(DgpConfig(variant), x)
        np.testing.assert_allclose(nu.pi.sum(-1), 1.0, atol=1e-10)
        np.testing.assert_allclose(nu.delta.sum(-1), 1.0, atol=1e-10)
        np.testing.assert_allclose(nu.mu_tilde[:, 1] - nu.mu_tilde[:, 0], nu.tau, atol=1e-12)
    assert oracle_nuisances(DgpConfig(), 0.6).tau == pytest.approx(0.2)


def test_confounding_bias_is_nonzero():
    nu = oracle_nuisances(DgpConfig("dataset1"), 0.0)
    bias = nu.mu[1, 1] - nu.mu[1, 0] - nu.tau
    assert abs(bias) > 0.01


def test_domain_errors():
    with pytest.raises(ValueError):
        oracle_nuisances(DgpConfig(), 1.5)
    with pytest.raises(ValueError):
        oracle_table(DgpConfig(), np.array([0.2, 0.1]), SUPPORT)


def test_oracle_table_shape_and_tightening():
    grid = np.round(np.arange(-0.9, 0.91, 0.1), 10)
    table = oracle_table(DgpConfig("dataset1"), grid, SUPPORT)
    width = table.bounds.width
    assert width[-1] < width[np.argmin(np.abs(grid))]
    assert np.all(table.bounds.combined_lower <= table.tau)
    assert np.all(table.tau <= table.bounds.combined_upper)
    single = oracle_table(DgpConfig("dataset2"), np.array([0.0]), SUPPORT)
    assert len(single) == 1


def test_oracle_table_csv(tmp_path):
    table = oracle_table(DgpConfig("dataset1"), covariate_grid(11), SUPPORT)
    p = table.to_csv(tmp_path / "oracle.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 12 and lines[0].startswith("x,")
    assert "tau" in lines[0].split(",")


def test_determinism_and_chunk_independence():
    a = sample_synthetic(DgpConfig("dataset2", n=70000, seed=9))
    b = sample_synthetic(DgpConfig("dataset2", n=70000, seed=9))
    assert a.equals(b)
    head = sample_synthetic(DgpConfig("dataset2", n=100, seed=9))
    np.testing.assert_array_equal(head.y, a.y[:100])
    other = sample_synthetic(DgpConfig("dataset2", n=100, seed=10))
    assert not np.array_equal(other.y, head.y)


def test_confounder_is_hidden():
    data, u = sample_synthetic(DgpConfig(n=500), return_confounder=True)
    assert data.covariate_dim == 1 and u.shape == (500,)
    assert np.all((u >= 0) & (u < 1))


def test_oracle_models_interface():
    cfg = DgpConfig("dataset1")
    models = OracleModels(cfg, SUPPORT)
    X = np.array([[-0.5], [0.0], [0.5]])
    assert models.predict_pi(X).shape == (3, 2, 2)
    assert models.predict_delta(X).shape == (3, 2)
    r_e, r_j = models.predict_r(X, 0, 1, "+")
    assert r_e.shape == (3,)
    corrupted = OracleModels(cfg, SUPPORT, delta_override=0.5, r_override=0.0)
    np.testing.assert_array_equal(corrupted.predict_delta(X), 0.5)
    assert np.all(corrupted.predict_r(X, 0, 1, "-")[1] == 0.0)


@pytest.fixture(scope="module")
def big_sample():
    cfg = DgpConfig("dataset1", n=10**6, seed=2024)
    return cfg, sample_synthetic(cfg)


@pytest.mark.slow
@pytest.mark.parametrize("x0", [-0.6, 0.0, 0.6])
def test_monte_carlo_matches_oracle(big_sample, x0):
    """Frequencies and means in a window match window-averaged oracle values within 3 SE."""
    cfg, d = big_sample
    h = 0.05
    x = d.X[:, 0]
    window = np.abs(x - x0) <= h
    nu = lambda xs: oracle_nuisances(cfg, xs)  # noqa: E731
    ones = np.ones_like
    e1 = d.env[window] == 1
    assert abs(e1.mean() - window_oracle(lambda xs: nu(xs).delta[:, 1], ones, x0, h)) < 3 * e1.std() / np.sqrt(e1.size)
    for e in (0, 1):
        in_e = window & (d.env == e)
        a = d.treatment[in_e]
        target = window_oracle(lambda xs: nu(xs).pi[:, e, 1], lambda xs: nu(xs).delta[:, e], x0, h)
        assert abs(a.mean() - target) < 3 * a.std() / np.sqrt(a.size)
        for t in (0, 1):
            cell = in_e & (d.treatment == t)
            y = d.y[cell]
            target = window_oracle(lambda xs: nu(xs).mu[:, e, t],
                                   lambda xs: nu(xs).delta[:, e] * nu(xs).pi[:, e, t], x0, h)
            assert abs(y.mean() - target) < 3 * y.std() / np.sqrt(y.size)


@pytest.mark.slow
def test_marginal_propensity_near_zero(big_sample):
    _, d = big_sample
    rows = (np.abs(d.X[:, 0]) < 0.05) & (d.env == 1)
    assert abs(d.treatment[rows].mean() - math.log((1 + math.e) / 2)) < 0.01
