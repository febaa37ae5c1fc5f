"""Data model and probability evaluations for the instantaneous-failure
proportional hazards mixture.

Conditionally on ``T > 0`` the event time follows a proportional hazards
model with cumulative baseline hazard ``Lambda0``; the instantaneous failure
probability is ``1 - exp(-alpha * exp(x'beta))`` so that the baseline
probability is ``p = 1 - exp(-alpha)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from icmix.splines import Basis

INF = math.inf


class DataError(ValueError):
    """Raised for observations outside the supported data model."""


class ZeroProbabilityWarning(RuntimeWarning):
    """An observed interval has zero probability under the given parameters."""


def classify_observation(L: float, R: float) -> tuple[int, int, int, int]:
    """Return ``(psi, delta1, delta2, delta3)`` for the interval ``(L, R]``.

    >>> classify_observation(0, 0)
    (0, 0, 0, 0)
    >>> classify_observation(3.1, math.inf)
    (1, 0, 0, 1)
    """
    if math.isnan(L) or math.isnan(R):
        raise DataError("interval endpoints must not be NaN")
    if L < 0:
        raise DataError(f"L must be >= 0, got {L}")
    if L > R:
        raise DataError(f"L > R ({L} > {R})")
    if L == R:
        if L == 0:
            return 0, 0, 0, 0
        raise DataError("exact failure times unsupported (L == R > 0)")
    if math.isinf(L):
        raise DataError("L must be finite")
    if L == 0:
        if math.isinf(R):
            raise DataError("interval (0, inf) carries no information")
        return 1, 1, 0, 0
    if math.isinf(R):
        return 1, 0, 0, 1
    return 1, 0, 1, 0


@dataclass(frozen=True)
class Observation:
    L: float
    R: float
    x: tuple[float, ...]
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        classify_observation(self.L, self.R)

    @property
    def indicators(self) -> tuple[int, int, int, int]:
        return classify_observation(self.L, self.R)

    @property
    def psi(self) -> int:
        return self.indicators[0]

    @property
    def delta1(self) -> int:
        return self.indicators[1]

    @property
    def delta2(self) -> int:
        return self.indicators[2]

    @property
    def delta3(self) -> int:
        return self.indicators[3]

    @property
    def t1(self) -> float:
        return self.R if self.delta1 else self.L

    @property
    def t2(self) -> float:
        if self.delta2:
            return self.R
        if self.delta3:
            return self.L
        return 0.0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Array-backed collection of observations.

    ``L`` and ``R`` are length-``n`` arrays (``R`` may hold ``inf``) and ``X``
    is the ``(n, r)`` covariate matrix.
    """

    L: np.ndarray
    R: np.ndarray
    X: np.ndarray
    ids: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float).reshape(-1)
        R = np.asarray(self.R, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = L.size
        if n < 1:
            raise DataError("dataset must contain at least one observation")
        if R.size != n or X.shape[0] != n:
            raise DataError("L, R and X must have the same number of rows")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates must be finite")
        ids = tuple(self.ids) or tuple(str(i + 1) for i in range(n))
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(ids) != n or len(names) != X.shape[1]:
            raise DataError("ids / covariate_names length mismatch")
        for a in (L, R, X):
            a.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "covariate_names", names)
        _ = self.indicators

    @classmethod
    def from_observations(cls, observations, covariate_names=()):
        obs = list(observations)
        if not obs:
            raise DataError("dataset must contain at least one observation")
        r = len(obs[0].x)
        if any(len(o.x) != r for o in obs):
            raise DataError("all covariate vectors must share the same length")
        return cls(
            L=[o.L for o in obs],
            R=[o.R for o in obs],
            X=np.array([o.x for o in obs], dtype=float).reshape(len(obs), r),
            ids=tuple(o.id or str(i + 1) for i, o in enumerate(obs)),
            covariate_names=covariate_names,
        )

    def __len__(self):
        return self.L.size

    @property
    def n(self) -> int:
        return self.L.size

    @property
    def r(self) -> int:
        return self.X.shape[1]

    @cached_property
    def indicators(self) -> np.ndarray:
        """``(n, 4)`` integer array of ``(psi, delta1, delta2, delta3)``."""
        rows = []
        for i, (lo, hi) in enumerate(zip(self.L, self.R)):
            try:
                rows.append(classify_observation(float(lo), float(hi)))
            except DataError as exc:
                raise DataError(f"observation {self.ids[i] if self.ids else i + 1}: {exc}") from None
        return np.array(rows, dtype=int)

    @property
    def psi(self):
        return self.indicators[:, 0]

    @property
    def delta1(self):
        return self.indicators[:, 1]

    @property
    def delta2(self):
        return self.indicators[:, 2]

    @property
    def delta3(self):
        return self.indicators[:, 3]

    @cached_property
    def t1(self) -> np.ndarray:
        return np.where(self.delta1 == 1, self.R, self.L)

    @cached_property
    def t2(self) -> np.ndarray:
        return np.where(self.delta2 == 1, self.R, np.where(self.delta3 == 1, self.L, 0.0))

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(float(lo), float(hi), tuple(x), ident)
            for lo, hi, x, ident in zip(self.L, self.R, self.X, self.ids)
        ]


@dataclass
class ParameterVector:
    """Model parameters ``theta = (beta, gamma, alpha)``."""

    beta: np.ndarray
    gamma: np.ndarray
    alpha: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float)).copy()
        self.alpha = float(self.alpha)
        if np.any(self.gamma < 0) or not np.all(np.isfinite(self.gamma)):
            raise ValueError("gamma entries must be finite and >= 0")
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite and >= 0")

    @property
    def p(self) -> float:
        return -math.expm1(-self.alpha)

    @property
    def r(self) -> int:
        return self.beta.size

    @property
    def k(self) -> int:
        return self.gamma.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma, [self.alpha]])

    @classmethod
    def from_array(cls, values, r: int, k: int) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.size != r + k + 1:
            raise ValueError(f"expected {r + k + 1} values, got {values.size}")
        return cls(values[:r], values[r:r + k], values[r + k])

    @classmethod
    def from_p(cls, beta, gamma, p: float) -> "ParameterVector":
        return cls(beta, gamma, -math.log1p(-p))

    def names(self, covariate_names=None) -> list[str]:
        cov = list(covariate_names or [f"beta{j + 1}" for j in range(self.r)])
        return cov + [f"gamma{l + 1}" for l in range(self.k)] + ["alpha"]


@dataclass(frozen=True)
class Design:
    """Per-(dataset, basis) quantities reused across likelihood, E-step and
    score evaluations.

    ``B1`` and ``B2`` hold the basis at the examination times ``t1`` and
    ``t2``; ``G`` is the exposure matrix
    ``psi * {(delta1 + delta2) b(R) + delta3 b(L)}``.
    """

    X: np.ndarray
    psi: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    G: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.X.shape[0]

    @cached_property
    def D(self) -> np.ndarray:
        """``B2 - B1``: nonzero only on interval-censored rows."""
        return self.B2 - self.B1

    @cached_property
    def masks(self):
        """Boolean row masks ``(psi == 0, delta1, delta2, delta3)``."""
        return self.psi == 0, self.d1 == 1, self.d2 == 1, self.d3 == 1

    @property
    def k(self):
        return self.B1.shape[1]


def make_design(data: Dataset, basis: Basis) -> Design:
    ind = data.indicators.astype(float)
    psi, d1, d2, d3 = ind.T
    B1 = basis(data.t1)
    B2 = basis(data.t2)
    # only interval-censored rows have a W term; elsewhere make its rate zero
    B2 = np.where(d2[:, None] == 1, B2, B1)
    G = psi[:, None] * (d1[:, None] * B1 + d2[:, None] * B2 + d3[:, None] * B1)
    return Design(data.X, psi, d1, d2, d3, B1, B2, G)


def log1mexp(z):
    """Stable ``log(1 - exp(-z))`` for ``z >= 0``."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(z > math.log(2), np.log1p(-np.exp(-z)), np.log(-np.expm1(-z)))


def conditional_cdf(t, x, theta: ParameterVector, basis: Basis):
    """``F(t|x) = 1 - exp(-Lambda0(t) exp(x'beta))`` for ``T > 0``."""
    risk = math.exp(float(np.dot(x, theta.beta)))
    lam = basis.cumulative_hazard(t, theta.gamma)
    return -np.expm1(-lam * risk)


def mixture_cdf(t, x, theta: ParameterVector, basis: Basis):
    """Distribution function ``H(t|x)`` of the mixture, including the atom at
    zero."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("t must be >= 0")
    risk = math.exp(float(np.dot(x, theta.beta)))
    stay = math.exp(-theta.alpha * risk)
    lam = basis.cumulative_hazard(t_arr, theta.gamma)
    out = 1.0 - stay * np.exp(-lam * risk)
    return float(out) if np.ndim(out) == 0 else out


def baseline_survival(t, theta: ParameterVector, basis: Basis):
    """``S0(t) = 1 - H(t | x = 0)``; equals ``1 - p`` as ``t -> 0+``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("t must be >= 0")
    lam = basis.cumulative_hazard(t_arr, theta.gamma)
    out = np.exp(-theta.alpha - lam)
    return float(out) if np.ndim(out) == 0 else out


def loglik_contributions(design: Design, theta: ParameterVector) -> np.ndarray:
    """Per-subject log-likelihood ``l_i(theta)``."""
    e = np.exp(design.X @ theta.beta)
    return contributions_from_rates(design, theta.alpha, e, design.B1 @ theta.gamma, design.D @ theta.gamma)


def contributions_from_rates(design: Design, alpha, e, lam1, dlam) -> np.ndarray:
    """``l_i`` given ``e = exp(x'beta)``, ``lam1 = Lambda0(t1)`` and
    ``dlam = Lambda0(t2) - Lambda0(t1)``."""
    inst, m1, m2, _ = design.masks
    ae = alpha * e
    out = -lam1 * e - ae
    with np.errstate(divide="ignore"):
        out[m1] = log1mexp(lam1[m1] * e[m1]) - ae[m1]
        out[m2] += log1mexp(dlam[m2] * e[m2])
        out[inst] = log1mexp(ae[inst])
    return out


def observed_loglik(data: Dataset, theta: ParameterVector, basis: Basis, *, warn: bool = True) -> float:
    """Observed-data log-likelihood.

    Returns ``-inf`` (with a :class:`ZeroProbabilityWarning`) when some
    interval has zero probability, e.g. when ``gamma`` vanishes on its
    support.
    """
    design = data if isinstance(data, Design) else make_design(data, basis)
    total = float(np.sum(loglik_contributions(design, theta)))
    if warn and total == -math.inf:
        warnings.warn("zero-probability interval", ZeroProbabilityWarning, stacklevel=2)
    return total
