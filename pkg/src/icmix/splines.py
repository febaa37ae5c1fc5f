"""Basis functions for the cumulative baseline hazard.

The cumulative baseline hazard is represented as a nonnegative combination
``Lambda0(t) = sum_l gamma_l * b_l(t)`` of monotone increasing functions with
``b_l(0) = 0``.  Three parametric families (log, linear, quadratic) are
available, together with Ramsay's monotone I-splines.

I-splines of degree ``d`` are computed as tail sums of the B-splines of order
``d + 1`` on a knot sequence whose boundary knots are repeated ``d + 1``
times.  The first tail sum is identically one on the knot range and is
dropped, leaving ``k = m + d - 2`` basis functions for ``m`` knots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class BasisKind(str, enum.Enum):
    LOG = "log"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    ISPLINE = "ispline"


class KnotError(ValueError):
    """Raised for an invalid knot sequence or degree."""


@dataclass(frozen=True)
class BasisSpec:
    """Description of a basis family.

    ``degree``, ``interior_knots`` and ``boundary_knots`` are only used by
    :attr:`BasisKind.ISPLINE`.
    """

    kind: BasisKind
    degree: int = 2
    interior_knots: tuple[float, ...] = ()
    boundary_knots: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))
        object.__setattr__(
            self, "interior_knots", tuple(float(v) for v in self.interior_knots)
        )
        if self.boundary_knots is not None:
            lo, hi = self.boundary_knots
            object.__setattr__(self, "boundary_knots", (float(lo), float(hi)))

    @property
    def n_basis(self) -> int:
        if self.kind is BasisKind.QUADRATIC:
            return 2
        if self.kind is BasisKind.ISPLINE:
            return len(self.interior_knots) + self.degree
        return 1

    def validate(self) -> None:
        if self.kind is not BasisKind.ISPLINE:
            return
        if int(self.degree) != self.degree or self.degree < 1:
            raise KnotError(f"degree must be an integer >= 1, got {self.degree!r}")
        if self.boundary_knots is None:
            raise KnotError("I-spline basis requires boundary knots")
        lo, hi = self.boundary_knots
        if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
            raise KnotError(f"boundary knots must satisfy lo < hi, got {self.boundary_knots}")
        inner = np.asarray(self.interior_knots, dtype=float)
        if inner.size:
            if np.any(np.diff(inner) <= 0):
                raise KnotError("interior knots must be strictly increasing (no duplicates)")
            if inner[0] <= lo or inner[-1] >= hi:
                raise KnotError("interior knots must lie strictly inside the boundary knots")

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is BasisKind.ISPLINE:
            out.update(
                degree=self.degree,
                interior_knots=list(self.interior_knots),
                boundary_knots=list(self.boundary_knots),
            )
        return out


@dataclass(frozen=True)
class Basis:
    """Evaluator for ``(b_1(t), ..., b_k(t))``.

    Calling the object on a scalar returns a length-``k`` vector; calling it
    on an array of shape ``(n,)`` returns an ``(n, k)`` matrix.
    """

    spec: BasisSpec
    _knots: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def kind(self) -> BasisKind:
        return self.spec.kind

    @property
    def k(self) -> int:
        return self.spec.n_basis

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        scalar = t_arr.ndim == 0
        t_arr = np.atleast_1d(t_arr)
        if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
            raise ValueError("basis evaluated at negative or NaN time")
        kind = self.spec.kind
        if kind is BasisKind.LOG:
            out = np.log1p(t_arr)[:, None]
        elif kind is BasisKind.LINEAR:
            out = t_arr[:, None].copy()
        elif kind is BasisKind.QUADRATIC:
            out = np.column_stack([t_arr, t_arr * t_arr])
        else:
            out = _ispline_matrix(t_arr, self._knots, self.spec.degree, self.spec.boundary_knots)
        return out[0] if scalar else out

    def cumulative_hazard(self, t, gamma):
        """``Lambda0(t) = B(t) @ gamma``."""
        return self(t) @ np.asarray(gamma, dtype=float)


def build_basis(spec: BasisSpec) -> Basis:
    spec.validate()
    knots = None
    if spec.kind is BasisKind.ISPLINE:
        knots = extended_knots(spec)
    return Basis(spec, knots)


def extended_knots(spec: BasisSpec) -> np.ndarray:
    """Knot vector with both boundary knots repeated ``degree + 1`` times."""
    lo, hi = spec.boundary_knots
    order = spec.degree + 1
    return np.concatenate([np.full(order, lo), spec.interior_knots, np.full(order, hi)])


def bspline_matrix(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """Cox-de Boor evaluation of all B-splines of ``order`` at ``x``.

    Intervals are half open, so every B-spline vanishes at the last knot;
    callers handle the right boundary.
    """
    x = np.asarray(x, dtype=float)[:, None]
    lo_knots = knots[:-1]
    hi_knots = knots[1:]
    basis = ((x >= lo_knots) & (x < hi_knots)).astype(float)
    for q in range(2, order + 1):
        n_funcs = len(knots) - q
        left_den = knots[q - 1:q - 1 + n_funcs] - knots[:n_funcs]
        right_den = knots[q:q + n_funcs] - knots[1:1 + n_funcs]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x - knots[:n_funcs]) / left_den, 0.0)
            right = np.where(right_den > 0, (knots[q:q + n_funcs] - x) / right_den, 0.0)
        basis = left * basis[:, :n_funcs] + right * basis[:, 1:n_funcs + 1]
    return basis


def _ispline_matrix(t, knots, degree, boundary):
    lo, hi = boundary
    B = bspline_matrix(t, knots, degree + 1)
    # tail sums I_l = sum_{j >= l} B_j, dropping the constant first one
    tails = np.cumsum(B[:, ::-1], axis=1)[:, ::-1][:, 1:]
    # near saturation 1 - (leading sum) keeps rounding monotone in t
    heads = np.cumsum(B, axis=1)[:, :-1]
    out = np.where(tails > 0.5, 1.0 - heads, tails)
    out[t >= hi] = 1.0
    out[t < lo] = 0.0
    return np.clip(out, 0.0, 1.0)


def _type7_quantiles(values: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return np.quantile(values, probs, method="linear")


def default_knots(
    data,
    n_interior: int = 1,
    degree: int = 2,
    *,
    anchor_origin: bool = False,
    resolve_ties: bool = True,
) -> BasisSpec:
    """Place I-spline knots from the finite nonzero interval endpoints.

    Boundary knots sit at the minimum and maximum of the endpoint set and the
    interior knots at its equally spaced quantiles (a single interior knot is
    the median).  With ``anchor_origin`` the lower boundary knot is moved to
    zero so the fitted hazard can place mass before the first endpoint; a
    left-censored subject whose right endpoint is the smallest endpoint
    otherwise has zero likelihood.

    ``data`` is a :class:`~icmix.model.Dataset` or any iterable of objects
    with ``L`` and ``R`` attributes.
    """
    if hasattr(data, "L") and hasattr(data, "R") and np.ndim(data.L) == 1:
        L = np.asarray(data.L, dtype=float)
        R = np.asarray(data.R, dtype=float)
    else:
        obs = list(data)
        L = np.array([o.L for o in obs], dtype=float)
        R = np.array([o.R for o in obs], dtype=float)
    ends = np.concatenate([L[L > 0], R[np.isfinite(R) & (R > 0)]])
    if np.unique(ends).size < 2:
        raise KnotError("degenerate endpoint set")
    lo, hi = float(ends.min()), float(ends.max())
    if anchor_origin:
        lo = 0.0
    if n_interior < 0:
        raise KnotError("n_interior must be >= 0")
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = [float(v) for v in _type7_quantiles(ends, probs)]
    if resolve_ties:
        interior = _separate_knots(lo, interior, hi)
    return BasisSpec(BasisKind.ISPLINE, degree, tuple(interior), (lo, hi))


def _separate_knots(lo: float, interior: list[float], hi: float) -> list[float]:
    """Move knots that coincide with a predecessor to the midpoint of their
    nearest distinct neighbours."""
    out: list[float] = []
    prev = lo
    for i, cand in enumerate(interior):
        if cand <= prev or cand >= hi:
            later = [v for v in interior[i + 1:] if prev < v < hi] + [hi]
            cand = 0.5 * (prev + min(later))
        out.append(cand)
        prev = cand
    return out
