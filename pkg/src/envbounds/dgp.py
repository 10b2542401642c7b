"""Synthetic two-environment benchmark with exact oracle nuisances.

Covariate ``X ~ U[-1, 1]``, hidden confounder ``U ~ U[0, 1]``, environment
``E | x ~ Bernoulli(delta(x))``, treatment ``A | x, u, E=1 ~ Bernoulli(sigmoid(s*x + u))``
(complemented in environment 0) and outcome
``Y = tau(x) A + (sin(12x) + x)/3 + cos(2x)/60 + U + 0.3 eps`` with Laplace noise.

Oracle quantities integrate the hidden confounder out with a fixed 201-point
composite Simpson rule, so they are deterministic and exact to ~1e-12.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._rng import uniform_rows
from .bounds import BoundMatrix, Interval, pair_bound_arrays
from .dataset import Dataset

__all__ = [
    "DgpConfig",
    "OracleNuisances",
    "OracleTable",
    "VARIANTS",
    "baseline_outcome",
    "true_cate",
    "environment_probability",
    "treatment_probability",
    "sample_synthetic",
    "oracle_nuisances",
    "oracle_table",
]

VARIANTS = ("dataset1", "dataset2")
N_QUAD = 201
_DENOM_FLOOR = 1e-12
_VALIDITY_TOL = 1e-8
_CHUNK = 1 << 16
_ORACLE_CHUNK = 4096
# uniform stream columns: x, u, env, treatment, noise
_WIDTH = 5


@dataclass(frozen=True)
class DgpConfig:
    variant: str = "dataset1"
    n: int = 10000
    seed: int = 0
    noise_scale: float = 0.3
    treatment_logit_slope: float = 2.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if int(self.n) < 1:
            raise ValueError("n must be >= 1")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")


def baseline_outcome(x):
    x = np.asarray(x, dtype=float)
    return (np.sin(12 * x) + x) / 3.0 + np.cos(2 * x) / 60.0


def true_cate(x):
    return np.asarray(x, dtype=float) / 3.0


def environment_probability(config: DgpConfig, x):
    """``P(E = 1 | X = x)``."""
    x = np.asarray(x, dtype=float)
    if config.variant == "dataset1":
        return expit(x)
    return 0.15 * np.sin(5 * x) + 0.5


def treatment_probability(config: DgpConfig, x, u, env):
    """``P(A = 1 | X = x, U = u, E = env)``."""
    p = expit(config.treatment_logit_slope * np.asarray(x, dtype=float) + np.asarray(u, dtype=float))
    return np.where(np.asarray(env) == 1, p, 1.0 - p)


def _laplace_from_uniform(q):
    q = np.clip(q, 2.0**-54, 1.0 - 2.0**-54)
    c = q - 0.5
    return -np.sign(c) * np.log1p(-2.0 * np.abs(c))


def sample_synthetic(config: DgpConfig, return_confounder: bool = False):
    """Draw ``config.n`` samples; the hidden confounder is dropped unless requested.

    Generation is chunked over a counter-based stream, so the result does not
    depend on chunking or on the order chunks are produced.
    """
    n = int(config.n)
    cols = {k: np.empty(n) for k in ("x", "u", "e", "a", "y")}
    for start in range(0, n, _CHUNK):
        stop = min(n, start + _CHUNK)
        q = uniform_rows(config.seed, start, stop, _WIDTH)
        x = 2.0 * q[:, 0] - 1.0
        u = q[:, 1]
        e = (q[:, 2] < environment_probability(config, x)).astype(np.int64)
        a = (q[:, 3] < treatment_probability(config, x, u, e)).astype(np.int64)
        eps = _laplace_from_uniform(q[:, 4])
        y = true_cate(x) * a + baseline_outcome(x) + u + config.noise_scale * eps
        for k, v in zip("xueay", (x, u, e, a, y)):
            cols[k][start:stop] = v
    data = Dataset(
        env=cols["e"].astype(np.int64),
        X=cols["x"][:, None],
        treatment=cols["a"].astype(np.int64),
        y=cols["y"],
        num_envs=2,
        env_labels=("0", "1"),
        covariate_names=("x",),
        metadata={"dgp": config.variant, "dgp_seed": config.seed, "n": n},
    ) if n >= 2 else _tiny_dataset(cols)
    if return_confounder:
        return data, cols["u"]
    return data


def _tiny_dataset(cols) -> Dataset:
    return Dataset(
        env=cols["e"].astype(np.int64), X=cols["x"][:, None], treatment=cols["a"].astype(np.int64),
        y=cols["y"], num_envs=2, env_labels=("0", "1"), covariate_names=("x",), strict_envs=False,
    )


def _simpson_weights(m: int = N_QUAD) -> tuple[np.ndarray, np.ndarray]:
    if m % 2 == 0:
        raise ValueError("composite Simpson needs an odd number of nodes")
    nodes = np.linspace(0.0, 1.0, m)
    w = np.ones(m)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return nodes, w / (3.0 * (m - 1))


_U_NODES, _U_WEIGHTS = _simpson_weights()


@dataclass(frozen=True)
class OracleNuisances:
    """Ground-truth nuisances at covariate value(s) ``x``.

    Array shapes for a batch of ``m`` points: ``pi`` and ``mu`` are
    ``(m, n_envs, n_treatments)``, ``delta`` is ``(m, n_envs)``, ``mu_tilde``
    is ``(m, n_treatments)`` and ``tau`` is ``(m,)``.  Scalar ``x`` drops the
    leading axis.
    """

    x: np.ndarray
    pi: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    mu_tilde: np.ndarray

    def transformed_responses(self, e: int, j: int, side: str, support: Interval):
        """Oracle ``(r_e, r_j)``: conditional means of the transformed outcome in env e and env j."""
        s_obs, s_cf = (support.hi, support.lo) if side == "+" else (support.lo, support.hi)
        r_e = self.pi[..., e, 1] * self.mu[..., e, 1] + self.pi[..., e, 0] * s_obs
        r_j = self.pi[..., j, 0] * self.mu[..., j, 0] + self.pi[..., j, 1] * s_cf
        return r_e, r_j

    def bounds(self, support: Interval) -> BoundMatrix:
        upper, lower = pair_bound_arrays(self.pi, self.mu, support)
        return BoundMatrix.from_arrays(upper, lower)


def oracle_nuisances(config: DgpConfig, x) -> OracleNuisances:
    """Exact nuisances at ``x`` (scalar or 1-d array) with the confounder integrated out."""
    x_arr = np.asarray(x, dtype=float)
    scalar = x_arr.ndim == 0
    xs = np.atleast_1d(x_arr)
    if xs.ndim != 1:
        raise ValueError("x must be a scalar or a 1-d array")
    if np.any(np.abs(xs) > 1.0) or not np.all(np.isfinite(xs)):
        raise ValueError("oracle nuisances are defined for x in [-1, 1]")
    u = _U_NODES[None, :]
    pi = np.empty((len(xs), 2, 2))
    mu = np.empty((len(xs), 2, 2))
    f = baseline_outcome(xs)
    tau = true_cate(xs)
    # bounded working memory: the quadrature matrix is (chunk, N_QUAD)
    for lo in range(0, len(xs), _ORACLE_CHUNK):
        sl = slice(lo, lo + _ORACLE_CHUNK)
        for e in (0, 1):
            p1 = treatment_probability(config, xs[sl, None], u, e)
            for a, pa in ((1, p1), (0, 1.0 - p1)):
                mass = pa @ _U_WEIGHTS
                if np.any(mass < _DENOM_FLOOR):
                    raise ArithmeticError(f"P(A={a} | x, E={e}) below {_DENOM_FLOOR}; conditional mean undefined")
                pi[sl, e, a] = mass
                mu[sl, e, a] = f[sl] + a * tau[sl] + (pa * u) @ _U_WEIGHTS / mass
    d1 = environment_probability(config, xs)
    delta = np.stack([1.0 - d1, d1], axis=-1)
    mu_tilde = np.stack([f + 0.5, f + tau + 0.5], axis=-1)
    out = OracleNuisances(x=xs, pi=pi, mu=mu, delta=delta, tau=tau, mu_tilde=mu_tilde)
    if scalar:
        out = OracleNuisances(*(getattr(out, k)[0] for k in ("x", "pi", "mu", "delta", "tau", "mu_tilde")))
    return out


@dataclass(frozen=True)
class OracleTable:
    grid: np.ndarray
    nuisances: OracleNuisances
    bounds: BoundMatrix
    support: Interval
    config: DgpConfig

    @property
    def tau(self) -> np.ndarray:
        return self.nuisances.tau

    def __len__(self) -> int:
        return len(self.grid)

    def columns(self) -> dict[str, np.ndarray]:
        nu, bm = self.nuisances, self.bounds
        k = nu.pi.shape[1]
        cols: dict[str, np.ndarray] = {"x": self.grid}
        for e in range(k):
            cols[f"delta_{e}"] = nu.delta[:, e]
        for e in range(k):
            for a in range(nu.pi.shape[2]):
                cols[f"pi_{e}_{a}"] = nu.pi[:, e, a]
        for e in range(k):
            for a in range(nu.mu.shape[2]):
                cols[f"mu_{e}_{a}"] = nu.mu[:, e, a]
        for a in range(nu.mu_tilde.shape[1]):
            cols[f"mu_tilde_{a}"] = nu.mu_tilde[:, a]
        cols["tau"] = nu.tau
        for e in range(k):
            for j in range(k):
                cols[f"upper_{e}_{j}"] = bm.upper[:, e, j]
                cols[f"lower_{e}_{j}"] = bm.lower[:, e, j]
        cols["combined_upper"] = bm.combined_upper
        cols["combined_lower"] = bm.combined_lower
        cols["argmin_e"], cols["argmin_j"] = bm.argmin_pair[:, 0], bm.argmin_pair[:, 1]
        cols["argmax_e"], cols["argmax_j"] = bm.argmax_pair[:, 0], bm.argmax_pair[:, 1]
        return cols

    def to_csv(self, path, **constants) -> Path:
        """Write one row per grid point; ``constants`` become extra constant columns."""
        path = Path(path)
        cols = self.columns()
        names = list(cols)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names + list(constants))
            for i in range(len(self.grid)):
                w.writerow([_fmt(cols[c][i]) for c in names] + [str(v) for v in constants.values()])
        return path


def _fmt(v) -> str:
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))


def oracle_table(config: DgpConfig, grid, support: Interval) -> OracleTable:
    """Oracle nuisances and bounds on a strictly increasing grid in [-1, 1].

    Raises
    ------
    ArithmeticError
        If some oracle bound fails to contain the true CATE, which happens only
        when ``support`` is narrower than the counterfactual means.
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    nu = oracle_nuisances(config, grid)
    bm = nu.bounds(support)
    bad = (bm.combined_lower > nu.tau + _VALIDITY_TOL) | (bm.combined_upper < nu.tau - _VALIDITY_TOL)
    if np.any(bad):
        x_bad = grid[np.flatnonzero(bad)[0]]
        raise ArithmeticError(
            f"oracle bounds exclude the true CATE at x={x_bad}; support [{support.lo}, {support.hi}] "
            "is narrower than the counterfactual means"
        )
    return OracleTable(grid=grid, nuisances=nu, bounds=bm, support=support, config=config)


def covariate_grid(n_points: int = 181, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, int(n_points))


__all__ += ["covariate_grid"]


class OracleModels:
    """Ground-truth nuisance provider with the ``NuisanceSet`` prediction interface.

    ``delta_override`` replaces the environment model with a constant vector
    (or callable of ``X``); ``r_override`` replaces every transformed response
    with a constant.  Both exist to corrupt exactly one nuisance when checking
    robustness properties.
    """

    def __init__(self, config: DgpConfig, support: Interval, clip_eps: float = 0.0,
                 delta_override=None, r_override: float | None = None):
        self.config = config
        self.support = support
        self.clip_eps = clip_eps
        self.num_envs = 2
        self.delta_override = delta_override
        self.r_override = r_override

    def _nu(self, X) -> OracleNuisances:
        return oracle_nuisances(self.config, np.asarray(X, dtype=float).reshape(len(X), -1)[:, 0])

    def predict_mu(self, X):
        return self._nu(X).mu

    def predict_pi(self, X):
        return self._nu(X).pi

    def predict_delta(self, X):
        if self.delta_override is None:
            delta = self._nu(X).delta
        elif callable(self.delta_override):
            delta = np.asarray(self.delta_override(X), dtype=float)
        else:
            delta = np.broadcast_to(np.asarray(self.delta_override, dtype=float), (len(X), self.num_envs))
        if self.clip_eps > 0:
            from .nuisance import clip_simplex

            delta = clip_simplex(delta, self.clip_eps)
        return np.array(delta)

    def predict_r(self, X, e: int, j: int, side: str):
        if self.r_override is not None:
            const = np.full(len(X), float(self.r_override))
            return const, const.copy()
        return self._nu(X).transformed_responses(e, j, side, self.support)


__all__ += ["OracleModels"]
