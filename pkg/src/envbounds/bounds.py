"""Closed-form bound algebra for CATE under multi-environment partial identification.

Every function here is pure and broadcasts over numpy arrays, so the same code
evaluates one covariate point or a whole batch.  Environment-pair arrays are
indexed ``[..., e, j]`` where ``e`` is the environment supplying the upper
Manski bound of the first treatment and ``j`` the environment supplying the
lower bound of the second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Interval",
    "NuisancePoint",
    "BoundPair",
    "BoundMatrix",
    "manski_response_bounds",
    "manski_cate_upper",
    "manski_cate_lower",
    "pair_bound_arrays",
    "pairwise_bound",
    "combine",
    "tightness_certificate",
    "SCOPES",
]

_PROB_TOL = 1e-8

SCOPES = ("all", "within", "cross")


@dataclass(frozen=True)
class Interval:
    """Closed outcome support ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError(f"support endpoints must be finite, got ({lo}, {hi})")
        if not lo < hi:
            raise ValueError(f"support requires lo < hi, got ({lo}, {hi})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def swapped(self) -> tuple[float, float]:
        """Endpoints in lower-bound order ``(hi, lo)``."""
        return self.hi, self.lo

    def contains(self, values) -> bool:
        values = np.asarray(values, dtype=float)
        return bool(np.all((values >= self.lo) & (values <= self.hi)))

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi}


def _check_prob(p, name="propensity"):
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p < -_PROB_TOL) or np.any(p > 1 + _PROB_TOL):
        raise ValueError(f"{name} must lie in [0, 1]")
    return np.clip(p, 0.0, 1.0)


def _scalar_or_array(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def manski_response_bounds(pi_a, mu_a, support: Interval):
    """Worst-case bounds on the confounding-free response surface.

    Returns ``(lower, upper)`` with ``lower = pi*mu + (1-pi)*lo`` and
    ``upper = pi*mu + (1-pi)*hi``.  The interval collapses when ``pi = 1``.
    """
    pi_a = _check_prob(pi_a)
    mu_a = np.asarray(mu_a, dtype=float)
    observed = pi_a * mu_a
    lower = observed + (1.0 - pi_a) * support.lo
    upper = observed + (1.0 - pi_a) * support.hi
    return _scalar_or_array(lower), _scalar_or_array(upper)


def manski_cate_upper(pi_a1, mu_a1, pi_a2, mu_a2, support: Interval):
    """Upper bound on ``tau_{a1,a2}``: upper response bound of a1 minus lower of a2."""
    _, up1 = manski_response_bounds(pi_a1, mu_a1, support)
    lo2, _ = manski_response_bounds(pi_a2, mu_a2, support)
    return _scalar_or_array(np.asarray(up1) - np.asarray(lo2))


def manski_cate_lower(pi_a1, mu_a1, pi_a2, mu_a2, support: Interval):
    """Lower bound on ``tau_{a1,a2}``, the endpoint-swapped twin of :func:`manski_cate_upper`."""
    lo1, _ = manski_response_bounds(pi_a1, mu_a1, support)
    _, up2 = manski_response_bounds(pi_a2, mu_a2, support)
    return _scalar_or_array(np.asarray(lo1) - np.asarray(up2))


def tightness_certificate(pi_e_a1, pi_j_a2, support: Interval):
    """Width ``(hi - lo) * (2 - pi^e_{a1} - pi^j_{a2})`` of the (e, j) pair bound."""
    pi_e_a1 = _check_prob(pi_e_a1)
    pi_j_a2 = _check_prob(pi_j_a2)
    return _scalar_or_array(support.width * (2.0 - pi_e_a1 - pi_j_a2))


@dataclass
class NuisancePoint:
    """Propensities and response surfaces at one covariate value (or a batch).

    ``pi`` and ``mu`` have shape ``(..., n_envs, n_treatments)``.  Response
    surfaces leaking outside the support are clamped and ``clamped`` is set.
    """

    pi: np.ndarray
    mu: np.ndarray
    support: Interval
    clamped: bool = field(default=False, init=False)

    def __post_init__(self):
        pi = _check_prob(self.pi, "pi")
        mu = np.asarray(self.mu, dtype=float)
        if pi.ndim < 2 or pi.shape != mu.shape:
            raise ValueError(
                f"pi and mu must share shape (..., n_envs, n_treatments); got {pi.shape} and {mu.shape}"
            )
        if np.any(np.abs(pi.sum(axis=-1) - 1.0) > _PROB_TOL):
            raise ValueError("each row of pi must sum to 1 over treatments")
        clipped = np.clip(mu, self.support.lo, self.support.hi)
        self.clamped = bool(np.any(clipped != mu))
        self.pi = pi
        self.mu = clipped

    @property
    def n_envs(self) -> int:
        return self.pi.shape[-2]

    @property
    def n_treatments(self) -> int:
        return self.pi.shape[-1]


def pair_bound_arrays(pi, mu, support: Interval, a1: int = 1, a2: int = 0):
    """All pair bounds at once.

    Parameters
    ----------
    pi, mu : ndarray of shape (..., n_envs, n_treatments)
    support : Interval
    a1, a2 : int
        Treatments compared, the target being ``mu_tilde[a1] - mu_tilde[a2]``.

    Returns
    -------
    upper, lower : ndarray of shape (..., n_envs, n_envs)
    """
    pi = np.asarray(pi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    p1, m1 = pi[..., :, a1], mu[..., :, a1]
    p2, m2 = pi[..., :, a2], mu[..., :, a2]
    s1, s2 = support.lo, support.hi
    # leg for treatment a1 lives in env e (axis -2), leg for a2 in env j (axis -1)
    up1 = (p1 * m1 + (1.0 - p1) * s2)[..., :, None]
    lo1 = (p1 * m1 + (1.0 - p1) * s1)[..., :, None]
    up2 = (p2 * m2 + (1.0 - p2) * s2)[..., None, :]
    lo2 = (p2 * m2 + (1.0 - p2) * s1)[..., None, :]
    return up1 - lo2, lo1 - up2


@dataclass(frozen=True)
class BoundPair:
    e: int
    j: int
    upper: float
    lower: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


def pairwise_bound(point: NuisancePoint, e: int, j: int, a1: int = 1, a2: int = 0) -> BoundPair:
    """Bound on ``tau_{a1,a2}`` combining env ``e`` for ``a1`` and env ``j`` for ``a2``."""
    if point.pi.ndim != 2:
        raise ValueError("pairwise_bound expects a single covariate point")
    k, t = point.pi.shape
    for name, idx, size in (("e", e, k), ("j", j, k), ("a1", a1, t), ("a2", a2, t)):
        if not 0 <= idx < size:
            raise IndexError(f"{name}={idx} out of range [0, {size})")
    up1 = point.pi[e, a1] * point.mu[e, a1] + (1 - point.pi[e, a1]) * point.support.hi
    lo1 = point.pi[e, a1] * point.mu[e, a1] + (1 - point.pi[e, a1]) * point.support.lo
    up2 = point.pi[j, a2] * point.mu[j, a2] + (1 - point.pi[j, a2]) * point.support.hi
    lo2 = point.pi[j, a2] * point.mu[j, a2] + (1 - point.pi[j, a2]) * point.support.lo
    return BoundPair(e=e, j=j, upper=float(up1 - lo2), lower=float(lo1 - up2))


def scope_mask(n_envs: int, scope: str = "all") -> np.ndarray:
    """Boolean ``(n_envs, n_envs)`` mask selecting within (e == j) or cross (e != j) pairs."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    eye = np.eye(n_envs, dtype=bool)
    if scope == "within":
        return eye
    if scope == "cross":
        return ~eye
    return np.ones((n_envs, n_envs), dtype=bool)


@dataclass(frozen=True)
class BoundMatrix:
    """Pair bounds plus their min/max combination.

    ``upper``/``lower`` have shape ``(..., n_envs, n_envs)``; the combined
    fields drop the last two axes.  ``argmin_pair``/``argmax_pair`` carry a
    trailing axis of length 2 holding ``(e, j)``; ties resolve to the
    lexicographically smallest pair.  ``crossed`` marks points where the
    combined lower bound exceeds the combined upper bound; values are never
    clamped.
    """

    upper: np.ndarray
    lower: np.ndarray
    combined_upper: np.ndarray
    combined_lower: np.ndarray
    argmin_pair: np.ndarray
    argmax_pair: np.ndarray
    crossed: np.ndarray
    scope: str = "all"

    @classmethod
    def from_arrays(cls, upper, lower, scope: str = "all") -> "BoundMatrix":
        upper = np.asarray(upper, dtype=float)
        lower = np.asarray(lower, dtype=float)
        if upper.shape != lower.shape or upper.ndim < 2 or upper.shape[-1] != upper.shape[-2]:
            raise ValueError(f"expected matching (..., k, k) arrays, got {upper.shape} and {lower.shape}")
        k = upper.shape[-1]
        mask = scope_mask(k, scope)
        if not mask.any():
            raise ValueError(f"scope {scope!r} selects no pairs for {k} environment(s)")
        flat_up = np.where(mask, upper, np.inf).reshape(upper.shape[:-2] + (k * k,))
        flat_lo = np.where(mask, lower, -np.inf).reshape(lower.shape[:-2] + (k * k,))
        imin = np.argmin(flat_up, axis=-1)
        imax = np.argmax(flat_lo, axis=-1)
        cu = np.take_along_axis(flat_up, imin[..., None], axis=-1)[..., 0]
        cl = np.take_along_axis(flat_lo, imax[..., None], axis=-1)[..., 0]
        return cls(
            upper=upper,
            lower=lower,
            combined_upper=cu,
            combined_lower=cl,
            argmin_pair=np.stack(np.divmod(imin, k), axis=-1),
            argmax_pair=np.stack(np.divmod(imax, k), axis=-1),
            crossed=cl > cu,
            scope=scope,
        )

    @property
    def n_envs(self) -> int:
        return self.upper.shape[-1]

    @property
    def width(self) -> np.ndarray:
        return self.combined_upper - self.combined_lower

    def restrict(self, scope: str) -> "BoundMatrix":
        """Recombine over the pairs in ``scope`` only."""
        return BoundMatrix.from_arrays(self.upper, self.lower, scope=scope)

    def pairs(self) -> list[BoundPair]:
        if self.upper.ndim != 2:
            raise ValueError("pairs() is only defined for a single covariate point")
        k = self.n_envs
        return [
            BoundPair(e, j, float(self.upper[e, j]), float(self.lower[e, j]))
            for e in range(k)
            for j in range(k)
        ]

    def __getitem__(self, idx) -> "BoundMatrix":
        """Select covariate points from a batched matrix."""
        return BoundMatrix(
            upper=self.upper[idx],
            lower=self.lower[idx],
            combined_upper=self.combined_upper[idx],
            combined_lower=self.combined_lower[idx],
            argmin_pair=self.argmin_pair[idx],
            argmax_pair=self.argmax_pair[idx],
            crossed=self.crossed[idx],
            scope=self.scope,
        )

    def __len__(self) -> int:
        if self.upper.ndim == 2:
            raise TypeError("unbatched BoundMatrix has no length")
        return self.upper.shape[0]


def combine(pairs: Iterable[BoundPair] | Sequence[BoundPair]) -> BoundMatrix:
    """Combine a full set of pair bounds into a :class:`BoundMatrix`.

    Raises
    ------
    ValueError
        If some ``(e, j)`` pair is missing or duplicated.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to combine")
    k = max(max(p.e, p.j) for p in pairs) + 1
    upper = np.full((k, k), np.nan)
    lower = np.full((k, k), np.nan)
    for p in pairs:
        if not np.isnan(upper[p.e, p.j]):
            raise ValueError(f"duplicate pair ({p.e}, {p.j})")
        upper[p.e, p.j] = p.upper
        lower[p.e, p.j] = p.lower
    missing = np.argwhere(np.isnan(upper))
    if missing.size:
        e, j = missing[0]
        raise ValueError(f"missing pair ({e}, {j}); combine needs all {k * k} pairs")
    return BoundMatrix.from_arrays(upper, lower)


def bounds_from_nuisances(point: NuisancePoint, a1: int = 1, a2: int = 0) -> BoundMatrix:
    """Population bounds for every pair, combined."""
    upper, lower = pair_bound_arrays(point.pi, point.mu, point.support, a1, a2)
    return BoundMatrix.from_arrays(upper, lower)


__all__ += ["scope_mask", "bounds_from_nuisances"]
