"""Outer-product-of-gradients covariance and Wald intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from icmix.model import Design, ParameterVector, make_design

CONDITION_LIMIT = 1e12


@dataclass
class ScoreMatrix:
    """Per-subject score rows ``d l_i / d theta`` ordered as
    ``(beta, gamma, alpha)``."""

    scores: np.ndarray
    boundary: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class CovarianceEstimate:
    """``V`` is the inverse of the averaged outer product ``S'S / n``; the
    covariance of ``theta_hat`` is ``V / n``."""

    V: np.ndarray | None
    singular: bool
    condition: float
    n: int

    def standard_errors(self) -> np.ndarray:
        if self.singular:
            raise np.linalg.LinAlgError("OPG matrix is singular")
        return np.sqrt(np.clip(np.diag(self.V), 0.0, None) / self.n)

    def cov(self) -> np.ndarray:
        if self.singular:
            raise np.linalg.LinAlgError("OPG matrix is singular")
        return self.V / self.n


def _inv_expm1(z):
    """``1 / (exp(z) - 1)``, which is ``d/dz log(1 - exp(-z))``."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        return 1.0 / np.expm1(z)


def _x_over_expm1(x):
    x = np.asarray(x, dtype=float)
    small = x < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - 0.5 * x, safe / np.expm1(safe))


def score_rows(data, theta: ParameterVector, basis=None) -> ScoreMatrix:
    d = data if isinstance(data, Design) else make_design(data, basis)
    e = np.exp(d.X @ theta.beta)
    lam1 = d.B1 @ theta.gamma
    D = d.B2 - d.B1
    dlam = D @ theta.gamma
    mu = lam1 * e
    nu = dlam * e
    kappa = theta.alpha * e
    g_mu = _inv_expm1(mu)
    g_nu = _inv_expm1(nu)
    g_kappa = _inv_expm1(kappa)

    psi, d1, d2 = d.psi, d.d1, d.d2
    # derivative of each subject's contribution with respect to eta = x'beta
    with np.errstate(invalid="ignore"):
        deta = np.where(
            psi == 1,
            np.where(d1 == 1, _x_over_expm1(mu), np.where(d2 == 1, -mu + _x_over_expm1(nu), -mu)) - kappa,
            _x_over_expm1(kappa),
        )
        dgamma = np.where(
            (d1 == 1)[:, None],
            (g_mu * e)[:, None] * d.B1,
            np.where((d2 == 1)[:, None], -e[:, None] * d.B1 + (g_nu * e)[:, None] * D, -e[:, None] * d.B1),
        )
    dgamma = dgamma * psi[:, None]
    dalpha = np.where(psi == 1, -e, e * g_kappa)
    S = np.column_stack([deta[:, None] * d.X, dgamma, dalpha])

    boundary = []
    if theta.alpha <= 0:
        boundary.append("alpha")
    boundary += [f"gamma{l + 1}" for l in np.flatnonzero(theta.gamma <= 0)]
    return ScoreMatrix(S, boundary)


def opg_covariance(scores: ScoreMatrix | np.ndarray) -> CovarianceEstimate:
    S = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=float)
    n = S.shape[0]
    if not np.all(np.isfinite(S)):
        return CovarianceEstimate(None, True, math.inf, n)
    gram = S.T @ S / n
    gram = 0.5 * (gram + gram.T)
    eig = np.linalg.eigvalsh(gram)
    top = eig[-1]
    cond = math.inf if eig[0] <= 0 or top <= 0 else float(top / eig[0])
    if cond > CONDITION_LIMIT:
        return CovarianceEstimate(None, True, cond, n)
    chol = np.linalg.cholesky(gram)
    inv_chol = np.linalg.solve(chol, np.eye(gram.shape[0]))
    V = inv_chol.T @ inv_chol
    return CovarianceEstimate(0.5 * (V + V.T), False, cond, n)


def normal_quantile(level: float) -> float:
    """Two-sided critical value ``z_{1 - (1 - level)/2}``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return float(ndtri(1.0 - (1.0 - level) / 2.0))


def wald_interval(theta_hat: ParameterVector, V: CovarianceEstimate, j, level: float = 0.95):
    """Wald interval for parameter ``j`` of ``(beta, gamma, alpha)``.

    ``j == "p"`` gives the delta-method interval for ``p = 1 - exp(-alpha)``
    clipped to ``[0, 1]``.
    """
    if V.singular:
        raise np.linalg.LinAlgError("cannot form Wald interval: OPG matrix is singular")
    se = V.standard_errors()
    z = normal_quantile(level)
    if j == "p":
        se_p = math.exp(-theta_hat.alpha) * se[-1]
        p = theta_hat.p
        return max(0.0, p - z * se_p), min(1.0, p + z * se_p)
    est = theta_hat.as_array()[j]
    return est - z * se[j], est + z * se[j]


def p_standard_error(theta_hat: ParameterVector, V: CovarianceEstimate) -> float:
    return math.exp(-theta_hat.alpha) * float(V.standard_errors()[-1])
