"""EM algorithm built on a two-stage latent Poisson augmentation.

Each non-instantaneous subject receives latent counts ``Z_i`` and ``W_i``
(split further into per-basis counts ``Z_il`` and ``W_il``) and every subject
a latent count ``Y_i`` governing the instantaneous failure.  All conditional
expectations are closed form, ``gamma`` and ``alpha`` have closed-form
profile solutions given ``beta``, and ``beta`` solves a low-dimensional
profiled score equation by damped Newton-Raphson.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from icmix.model import (
    DataError,
    Dataset,
    Design,
    ParameterVector,
    contributions_from_rates,
    make_design,
)
from icmix.splines import Basis

logger = logging.getLogger(__name__)

_SERIES_CUTOFF = 1e-8


class UnsupportedBasisError(DataError):
    """A basis function has zero exposure in the data."""


class NewtonError(RuntimeError):
    """The profiled beta equation could not be solved."""

    def __init__(self, message, beta, residual_norm):
        super().__init__(f"{message} (residual sup-norm {residual_norm:.3g})")
        self.beta = beta
        self.residual_norm = residual_norm


def ztp_mean(rate):
    """Mean ``rate / (1 - exp(-rate))`` of a zero-truncated Poisson variable.

    The limit 1 is returned at rate 0; below ``1e-8`` the two-term series
    ``1 + rate / 2`` is used.
    """
    rate = np.asarray(rate, dtype=float)
    small = rate < _SERIES_CUTOFF
    safe = np.where(small, 1.0, rate)
    return np.where(small, 1.0 + 0.5 * rate, safe / -np.expm1(-safe))


@dataclass
class LatentExpectations:
    EZ: np.ndarray
    EW: np.ndarray
    EY: np.ndarray
    EZl: np.ndarray
    EWl: np.ndarray


@dataclass
class FitConfig:
    tol: float = 1e-5
    max_iter: int = 5000
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    theta0: ParameterVector | None = None
    covariance: bool = True

    def __post_init__(self):
        if not (self.tol > 0 and self.newton_tol > 0):
            raise ValueError("tol and newton_tol must be > 0")
        if self.max_iter < 1 or self.newton_max_iter < 1:
            raise ValueError("iteration limits must be >= 1")


@dataclass
class FitResult:
    theta_hat: ParameterVector
    loglik_trace: np.ndarray
    n_iter: int
    converged: bool
    basis: Basis = field(repr=False)
    covariance: object = None
    warnings: list[str] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def ascent_violations(self, slack: float = 1e-8) -> int:
        """Number of iterations at which the log-likelihood dropped by more
        than ``slack``."""
        return int(np.sum(np.diff(self.loglik_trace) < -slack))


def default_theta0(r: int, k: int) -> ParameterVector:
    return ParameterVector(np.zeros(r), np.ones(k), 0.1)


def _as_design(data, basis) -> Design:
    if isinstance(data, Design):
        return data
    return make_design(data, basis)


def _split(total, gamma, B, lam):
    """Binomial-thinning means ``total * gamma_l b_l / lam``; rows with a zero
    rate fall back to the limiting proportions ``b_l / sum(b)``."""
    pos = lam > 0
    out = (B * gamma) * (total / np.where(pos, lam, 1.0))[:, None]
    bad = ~pos & (total > 0)
    if np.any(bad):
        Bz = B[bad]
        rs = Bz.sum(axis=1, keepdims=True)
        share = np.where(rs > 0, Bz / np.where(rs > 0, rs, 1.0), 1.0 / B.shape[1])
        out[bad] = total[bad, None] * share
    return out


def e_step(data, theta: ParameterVector, basis: Basis | None = None) -> LatentExpectations:
    """Conditional expectations of the latent Poisson counts at ``theta``."""
    d = _as_design(data, basis)
    e = np.exp(d.X @ theta.beta)
    return _e_step_from_rates(d, theta, e, d.B1 @ theta.gamma, d.D @ theta.gamma)


def _e_step_from_rates(d: Design, theta: ParameterVector, e, lam1, dlam) -> LatentExpectations:
    inst, m1, m2, _ = d.masks
    EZ = np.where(m1, ztp_mean(lam1 * e), 0.0)
    EW = np.where(m2, ztp_mean(dlam * e), 0.0)
    EY = np.where(inst, ztp_mean(theta.alpha * e), 0.0)
    EZl = _split(EZ, theta.gamma, d.B1, lam1)
    EWl = _split(EW, theta.gamma, d.D, dlam)
    return LatentExpectations(EZ, EW, EY, EZl, EWl)


def _gamma_numerators(lat: LatentExpectations, d: Design) -> np.ndarray:
    return (d.psi[:, None] * (lat.EZl + d.d2[:, None] * lat.EWl)).sum(axis=0)


def profile_gamma(beta, lat: LatentExpectations, data, basis: Basis | None = None) -> np.ndarray:
    """All ``gamma_l*(beta)`` at once."""
    d = _as_design(data, basis)
    num = _gamma_numerators(lat, d)
    den = d.G.T @ np.exp(d.X @ np.asarray(beta, dtype=float))
    if np.any(den <= 0):
        bad = [int(l) + 1 for l in np.flatnonzero(den <= 0)]
        raise UnsupportedBasisError(
            f"basis function unsupported by data: {bad}; respecify the knots"
        )
    return num / den


def gamma_star(l: int, beta, lat: LatentExpectations, data, basis: Basis | None = None) -> float:
    """Closed-form maximiser of the expected complete-data log-likelihood in
    ``gamma_l`` for fixed ``beta`` (``l`` is zero-based)."""
    d = _as_design(data, basis)
    num = float(_gamma_numerators(lat, d)[l])
    den = float(d.G[:, l] @ np.exp(d.X @ np.asarray(beta, dtype=float)))
    if den <= 0:
        raise UnsupportedBasisError(
            f"basis function unsupported by data: {l + 1}; respecify the knots"
        )
    return num / den


def alpha_star(beta, lat: LatentExpectations, data) -> float:
    X = data.X
    return float(np.sum(lat.EY) / np.sum(np.exp(X @ np.asarray(beta, dtype=float))))


def _weights(d: Design) -> np.ndarray:
    W = d.__dict__.get("_profile_weights")
    if W is None:
        W = np.column_stack([np.ones(d.n), d.G])
        d.__dict__["_profile_weights"] = W
    return W


class _Profile:
    """Profiled beta equation
    ``U(beta) = X'c - sum_g a_g * m_g(beta)`` where ``m_g`` is the mean of
    ``x`` under weights ``w_g * exp(x'beta)`` and group 0 is the
    instantaneous-failure term.  The weight totals ``s`` are the
    denominators of ``alpha*`` and ``gamma*``."""

    def __init__(self, lat: LatentExpectations, d: Design):
        self.X = d.X
        self.XT = d.X.T
        c = d.psi * (lat.EZ + d.d2 * lat.EW) + lat.EY
        self.Xc = self.XT @ c
        self.a = np.concatenate([[lat.EY.sum()], _gamma_numerators(lat, d)])
        self.W = _weights(d)

    def residual(self, beta):
        e = np.exp(self.X @ beta)
        WE = self.W * e[:, None]
        s = WE.sum(axis=0)
        if (s <= 0).any():
            bad = [int(l) for l in np.flatnonzero(s[1:] <= 0) + 1]
            raise UnsupportedBasisError(f"basis function unsupported by data: {bad}; respecify the knots")
        M = (self.XT @ WE) / s
        return self.Xc - M @ self.a, (WE, s, M)

    def jacobian(self, parts):
        WE, s, M = parts
        w = WE @ (self.a / s)
        return -(self.XT * w) @ self.X + (M * self.a) @ M.T

    def profile(self, parts):
        """``(alpha*, gamma*)`` at the beta that produced ``parts``."""
        s = parts[1]
        return self.a[0] / s[0], self.a[1:] / s[1:]


def _newton(prof: _Profile, beta, config: FitConfig):
    U, parts = prof.residual(beta)
    norm = np.abs(U).max() if U.size else 0.0
    for _ in range(config.newton_max_iter):
        if norm <= config.newton_tol:
            return beta, parts
        J = prof.jacobian(parts)
        try:
            step = np.linalg.solve(J, -U)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -U, rcond=None)[0]
        t = 1.0
        for _ in range(31):
            cand = beta + t * step
            U_c, parts_c = prof.residual(cand)
            norm_c = np.abs(U_c).max()
            if norm_c < norm:
                break
            t *= 0.5
        else:
            raise NewtonError("step halving exhausted", beta, norm)
        beta, U, parts, norm = cand, U_c, parts_c, norm_c
    if norm <= config.newton_tol:
        return beta, parts
    raise NewtonError("Newton-Raphson did not converge", beta, norm)


def beta_update(
    lat: LatentExpectations,
    data,
    basis: Basis | None = None,
    beta_init=None,
    config: FitConfig | None = None,
) -> np.ndarray:
    """Solve the profiled beta score equation by damped Newton-Raphson."""
    config = config or FitConfig()
    d = _as_design(data, basis)
    beta = np.zeros(d.X.shape[1]) if beta_init is None else np.array(beta_init, dtype=float)
    return _newton(_Profile(lat, d), beta, config)[0]


def _rates(d: Design, theta: ParameterVector):
    return np.exp(d.X @ theta.beta), d.B1 @ theta.gamma, d.D @ theta.gamma


def fit(data: Dataset, basis: Basis, config: FitConfig | None = None) -> FitResult:
    """Fit the mixture model by EM.

    Iterates E-step, beta update and closed-form gamma/alpha updates until
    the largest absolute change in ``theta`` drops below ``config.tol``.
    """
    config = config or FitConfig()
    d = _as_design(data, basis)
    if np.all(d.psi == 0):
        raise DataError("all observations are instantaneous failures; beta and gamma are unidentifiable")
    r, k = d.X.shape[1], d.k
    theta = config.theta0 or default_theta0(r, k)
    if theta.r != r or theta.k != k:
        raise ValueError(f"theta0 has shape (r={theta.r}, k={theta.k}); expected ({r}, {k})")

    # the rates at theta serve both the log-likelihood and the next E-step
    rates = _rates(d, theta)
    trace = [float(np.sum(contributions_from_rates(d, theta.alpha, *rates)))]
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        lat = _e_step_from_rates(d, theta, *rates)
        prof = _Profile(lat, d)
        beta, parts = _newton(prof, theta.beta, config)
        alpha, gamma = prof.profile(parts)
        new = ParameterVector(beta, gamma, alpha)
        rates = _rates(d, new)
        trace.append(float(np.sum(contributions_from_rates(d, new.alpha, *rates))))
        change = np.max(np.abs(new.as_array() - theta.as_array()))
        theta = new
        if change < config.tol:
            converged = True
            break

    result = FitResult(theta, np.array(trace), n_iter, converged, basis)
    if not converged:
        result.warnings.append(f"EM did not converge in {config.max_iter} iterations")
    if theta.alpha == 0.0:
        result.warnings.append("alpha at boundary (no instantaneous failures): p_hat = 0")
    if np.any(theta.gamma < 1e-12):
        result.warnings.append("some gamma at boundary 0")
    if config.covariance:
        from icmix.variance import opg_covariance, score_rows

        result.covariance = opg_covariance(score_rows(d, theta))
        if result.covariance.singular:
            result.warnings.append(
                f"OPG matrix singular (condition {result.covariance.condition:.3g})"
            )
    for w in result.warnings:
        logger.info(w)
    return result


def poisson_pmf(count, rate):
    """Poisson probabilities; broadcasts over ``count`` and ``rate``."""
    count = np.asarray(count, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0):
        raise ValueError("negative Poisson rate")
    safe = np.where(rate > 0, rate, 1.0)
    logp = count * np.log(safe) - rate - gammaln(count + 1.0)
    out = np.where(rate > 0, np.exp(logp), (count == 0).astype(float))
    return float(out) if out.ndim == 0 else out


def augmented_likelihood(obs, z, w, y, theta: ParameterVector, basis: Basis):
    """Complete-data likelihood of one subject at the second augmentation
    stage, for per-basis counts ``z``, ``w`` (last axis of length ``k``)
    and instantaneous count ``y``; leading axes broadcast.

    Summing over all latent counts recovers the subject's observed-data
    likelihood.  ``w`` is ignored for left-censored subjects, and ``z`` and
    ``w`` are ignored for instantaneous failures.
    """
    psi, d1, d2, d3 = obs.indicators
    risk = math.exp(float(np.dot(obs.x, theta.beta)))
    y = np.asarray(y)
    py = poisson_pmf(y, theta.alpha * risk)
    if psi == 0:
        out = py * (y > 0)
        return float(out) if np.ndim(out) == 0 else out
    z = np.asarray(z)
    b1 = basis(obs.t1)
    out = py * (y == 0) * np.prod(poisson_pmf(z, theta.gamma * b1 * risk), axis=-1)
    zsum = z.sum(axis=-1)
    if d1:
        out = out * (zsum > 0)
    else:
        w = np.asarray(w)
        b2 = basis(obs.t2)
        out = out * np.prod(poisson_pmf(w, theta.gamma * (b2 - b1) * risk), axis=-1)
        wsum = w.sum(axis=-1)
        out = out * ((zsum == 0) & ((wsum > 0) if d2 else (wsum == 0)))
    return float(out) if np.ndim(out) == 0 else out
