"""Replication study: data-generating mechanisms, model fitting across
replicates and Bias / SD / ESE / CP95 summaries."""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from icmix.em import FitConfig, fit
from icmix.model import Dataset, baseline_survival
from icmix.splines import BasisKind, BasisSpec, build_basis, default_knots
from icmix.variance import normal_quantile

BASELINES = ("log", "linear")
OBS_PROCESSES = ("exp", "unif")
MODELS = ("M1", "M2", "M3", "M4")
PARAMETERS = ("beta1", "beta2", "p")
GRID_POINTS = 101
_TINY = 2.0 ** -60


def true_cumhaz(baseline: str, t):
    t = np.asarray(t, dtype=float)
    if baseline == "log":
        return np.log1p(t) / math.log(11.0)
    if baseline == "linear":
        return 0.1 * t
    raise ValueError(f"unknown baseline {baseline!r}")


def inverse_cumhaz(baseline: str, s):
    s = np.asarray(s, dtype=float)
    if baseline == "log":
        return np.expm1(s * math.log(11.0))
    if baseline == "linear":
        return 10.0 * s
    raise ValueError(f"unknown baseline {baseline!r}")


@dataclass(frozen=True)
class GenConfig:
    baseline: str = "log"
    obs_process: str = "exp"
    beta: tuple[float, float] = (-0.5, -0.5)
    p: float = 0.3
    n: int = 100
    reps: int = 500
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.obs_process not in OBS_PROCESSES:
            raise ValueError(f"obs_process must be one of {OBS_PROCESSES}, got {self.obs_process!r}")
        if len(self.beta) != 2:
            raise ValueError("beta must have two entries")
        if not 0 <= self.p < 1:
            raise ValueError("p must lie in [0, 1)")
        if self.n < 1 or self.reps < 1:
            raise ValueError("n and reps must be >= 1")

    @property
    def label(self) -> str:
        b1, b2 = self.beta
        return f"{self.baseline}/{self.obs_process}/b1={b1:+g}/b2={b2:+g}"

    @property
    def alpha(self) -> float:
        return -math.log1p(-self.p)


def replicate_rng(seed: int, rep_index: int) -> np.random.Generator:
    """Counter-based stream for one replicate; subject ``i`` consumes row
    ``i`` of the uniform draws, so results do not depend on scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep_index)])))


@dataclass
class LatentDraws:
    """Unobserved quantities behind one simulated data set."""

    X: np.ndarray
    instantaneous: np.ndarray
    T: np.ndarray
    O: np.ndarray


def draw_latent(config: GenConfig, rep_index: int) -> LatentDraws:
    U = replicate_rng(config.seed, rep_index).random((config.n, 5))
    U = np.clip(U, _TINY, 1.0 - _TINY)
    x1 = ndtri(U[:, 0])
    x2 = (U[:, 1] < 0.5).astype(float)
    X = np.column_stack([x1, x2])
    risk = np.exp(X @ np.asarray(config.beta))
    # P(instantaneous | x) = 1 - (1 - p)^exp(x'beta)
    instantaneous = U[:, 2] < -np.expm1(risk * math.log1p(-config.p))
    T = inverse_cumhaz(config.baseline, -np.log1p(-U[:, 3]) / risk)
    if config.obs_process == "exp":
        O = -10.0 * np.log1p(-U[:, 4])
    else:
        O = np.floor(17.0 * U[:, 4]) + 1.0
    T = np.where(instantaneous, 0.0, T)
    return LatentDraws(X, instantaneous, T, O)


def generate_dataset(config: GenConfig, rep_index: int) -> Dataset:
    """Current status data: ``(0, O]`` if the event precedes the single
    examination time ``O`` and ``(O, inf)`` otherwise."""
    z = draw_latent(config, rep_index)
    L = np.where(z.T <= z.O, 0.0, z.O)
    R = np.where(z.T <= z.O, z.O, np.inf)
    L = np.where(z.instantaneous, 0.0, L)
    R = np.where(z.instantaneous, 0.0, R)
    ids = tuple(str(i + 1) for i in range(config.n))
    return Dataset(L, R, z.X, ids=ids, covariate_names=("x1", "x2"))


def model_basis(model: str, data: Dataset):
    """Basis for M1 (log), M2 (linear), M3 (quadratic) or M4 (quadratic
    I-spline with one interior knot at the endpoint median)."""
    if model == "M1":
        return build_basis(BasisSpec(BasisKind.LOG))
    if model == "M2":
        return build_basis(BasisSpec(BasisKind.LINEAR))
    if model == "M3":
        return build_basis(BasisSpec(BasisKind.QUADRATIC))
    if model == "M4":
        return build_basis(default_knots(data, n_interior=1, degree=2, anchor_origin=True))
    raise ValueError(f"unknown model {model!r}")


def survival_grid(config: GenConfig, points: int = GRID_POINTS) -> np.ndarray:
    """Equally spaced grid from 0 to the 95th percentile of the observation
    time distribution (the range supported by the data)."""
    if config.obs_process == "unif":
        upper = float(math.ceil(0.95 * 17))
    else:
        upper = -10.0 * math.log(0.05)
    return np.linspace(0.0, upper, points)


def true_baseline_survival(config: GenConfig, t) -> np.ndarray:
    return (1.0 - config.p) * np.exp(-true_cumhaz(config.baseline, t))


@dataclass
class ReplicateFit:
    rep: int
    model: str
    ok: bool
    error: str = ""
    estimates: list[float] = field(default_factory=list)
    ses: list[float] = field(default_factory=list)
    covered: list[bool] = field(default_factory=list)
    curve: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    ascent_violations: int = 0
    seconds: float = 0.0


def fit_replicate(config: GenConfig, rep: int, models, fit_config: FitConfig, level=0.95):
    """Fit every requested model to replicate ``rep``."""
    data = generate_dataset(config, rep)
    grid = survival_grid(config)
    z = normal_quantile(level)
    truth = np.array([config.beta[0], config.beta[1], config.p])
    out = []
    for model in models:
        start = time.perf_counter()
        try:
            basis = model_basis(model, data)
            res = fit(data, basis, fit_config)
        except Exception as exc:  # recorded, never silently dropped
            out.append(ReplicateFit(rep, model, False, error=f"{type(exc).__name__}: {exc}"))
            continue
        rec = ReplicateFit(
            rep,
            model,
            ok=True,
            n_iter=res.n_iter,
            converged=res.converged,
            ascent_violations=res.ascent_violations(),
            seconds=time.perf_counter() - start,
        )
        theta = res.theta_hat
        est = np.array([theta.beta[0], theta.beta[1], theta.p])
        rec.estimates = est.tolist()
        rec.curve = baseline_survival(grid, theta, basis).tolist()
        if not res.converged:
            rec.ok = False
            rec.error = "EM did not converge"
        elif res.covariance is None or res.covariance.singular:
            rec.ok = False
            rec.error = "singular OPG matrix"
        else:
            se = res.covariance.standard_errors()
            ses = np.array([se[0], se[1], math.exp(-theta.alpha) * se[-1]])
            lo = est - z * ses
            hi = est + z * ses
            lo[2], hi[2] = max(0.0, lo[2]), min(1.0, hi[2])
            rec.ses = ses.tolist()
            rec.covered = ((lo <= truth) & (truth <= hi)).tolist()
        out.append(rec)
    return out


@dataclass
class StudySummary:
    """Aggregated replication results.

    ``table`` rows hold scenario, model, parameter, Bias, SD, ESE, CP95 and
    the number of replicates used; ``curves`` rows hold the pointwise mean and
    2.5 / 97.5 percent quantiles of the estimated baseline survival."""

    config: GenConfig
    models: tuple[str, ...]
    table: list[dict]
    curves: list[dict]
    fits: list[ReplicateFit]

    @property
    def failures(self) -> list[ReplicateFit]:
        return [f for f in self.fits if not f.ok]

    def row(self, model: str, parameter: str) -> dict:
        for r in self.table:
            if r["model"] == model and r["parameter"] == parameter:
                return r
        raise KeyError((model, parameter))

    def fit_fraction(self) -> float:
        return sum(f.ok for f in self.fits) / max(1, len(self.fits))

    def curve(self, model: str) -> dict:
        rows = [c for c in self.curves if c["model"] == model]
        return {key: np.array([c[key] for c in rows]) for key in ("t", "mean", "q025", "q975", "truth")}


def _worker(args):
    config, rep, models, fit_config = args
    return fit_replicate(config, rep, models, fit_config)


def run_study(
    config: GenConfig,
    models=MODELS,
    fit_config: FitConfig | None = None,
    jobs: int = 1,
    rep_indices=None,
) -> StudySummary:
    fit_config = fit_config or FitConfig()
    models = tuple(models)
    for m in models:
        if m not in MODELS:
            raise ValueError(f"unknown model {m!r}")
    reps = list(range(config.reps)) if rep_indices is None else list(rep_indices)
    tasks = [(config, rep, models, fit_config) for rep in reps]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_worker, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        chunks = [_worker(t) for t in tasks]
    fits = sorted(itertools.chain.from_iterable(chunks), key=lambda f: (f.rep, models.index(f.model)))
    return summarize(config, models, fits)


def summarize(config: GenConfig, models, fits) -> StudySummary:
    truth = np.array([config.beta[0], config.beta[1], config.p])
    grid = survival_grid(config)
    true_curve = true_baseline_survival(config, grid)
    table, curves = [], []
    for model in models:
        good = sorted((f for f in fits if f.model == model and f.ok), key=lambda f: f.rep)
        est = np.array([f.estimates for f in good]).reshape(-1, 3)
        ses = np.array([f.ses for f in good]).reshape(-1, 3)
        cov = np.array([f.covered for f in good], dtype=float).reshape(-1, 3)
        m = est.shape[0]
        for j, name in enumerate(PARAMETERS):
            table.append(
                {
                    "scenario": config.label,
                    "model": model,
                    "parameter": name,
                    "Bias": float(est[:, j].mean() - truth[j]) if m else None,
                    "SD": float(est[:, j].std(ddof=1)) if m > 1 else None,
                    "ESE": float(ses[:, j].mean()) if m else None,
                    "CP95": float(cov[:, j].mean()) if m else None,
                    "n": m,
                }
            )
        curve_fits = [f for f in fits if f.model == model and f.ok]
        if curve_fits:
            C = np.array([f.curve for f in sorted(curve_fits, key=lambda f: f.rep)])
            mean = C.mean(axis=0)
            q025, q975 = np.quantile(C, [0.025, 0.975], axis=0)
            for t, a, lo, hi, tr in zip(grid, mean, q025, q975, true_curve):
                curves.append(
                    {
                        "scenario": config.label,
                        "model": model,
                        "t": float(t),
                        "mean": float(a),
                        "q025": float(lo),
                        "q975": float(hi),
                        "truth": float(tr),
                    }
                )
    return StudySummary(config, tuple(models), table, curves, list(fits))


def scenario_grid(baselines=BASELINES, obs_processes=("exp", "unif"), beta1=(-0.5, 0.5), beta2=(-0.5, 0.5), **common):
    """All combinations of the scenario factors (sixteen by default), ordered
    by observation process, baseline, beta1, beta2."""
    return [
        GenConfig(baseline=b, obs_process=o, beta=(b1, b2), **common)
        for o, b, b1, b2 in itertools.product(obs_processes, baselines, beta1, beta2)
    ]


def config_dict(config: GenConfig) -> dict:
    d = asdict(config)
    d["beta"] = list(config.beta)
    return d
