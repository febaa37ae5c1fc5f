import math

import numpy as np
import pytest
from scipy import stats

from icmix.em import FitConfig
from icmix.simulation import (
    GenConfig,
    draw_latent,
    generate_dataset,
    model_basis,
    run_study,
    scenario_grid,
    survival_grid,
    true_baseline_survival,
    true_cumhaz,
)

BIG = 1_000_000


def test_linear_hazard_cdf_at_ten():
    z = draw_latent(GenConfig(baseline="linear", beta=(0.0, 0.0), p=0.0, n=BIG, reps=1, seed=1), 0)
    hit = (z.T <= 10.0).astype(float)
    target = 1 - math.exp(-1)
    se = math.sqrt(target * (1 - target) / BIG)
    assert abs(hit.mean() - target) < 3 * se


@pytest.mark.parametrize("baseline", ["log", "linear"])
def test_event_time_ks_distance(baseline):
    z = draw_latent(GenConfig(baseline=baseline, beta=(0.0, 0.0), p=0.3, n=BIG, reps=1, seed=2), 0)
    T = z.T[~z.instantaneous]
    ks = stats.kstest(T, lambda t: -np.expm1(-true_cumhaz(baseline, t))).statistic
    assert ks < 0.002


def test_instantaneous_fraction_at_zero_covariate_effect():
    z = draw_latent(GenConfig(beta=(0.0, 0.0), p=0.3, n=200_000, reps=1, seed=3), 0)
    se = math.sqrt(0.3 * 0.7 / z.instantaneous.size)
    assert abs(z.instantaneous.mean() - 0.3) < 4 * se


def test_covariate_distribution():
    z = draw_latent(GenConfig(n=200_000, reps=1, seed=4), 0)
    assert abs(z.X[:, 0].mean()) < 0.01 and abs(z.X[:, 0].std() - 1) < 0.01
    assert set(np.unique(z.X[:, 1])) == {0.0, 1.0}
    assert abs(z.X[:, 1].mean() - 0.5) < 0.01


def test_uniform_examination_times_are_integers():
    data = generate_dataset(GenConfig(obs_process="unif", n=2000, reps=1), 0)
    ends = np.concatenate([data.L, data.R])
    ends = ends[np.isfinite(ends) & (ends > 0)]
    assert set(np.unique(ends)) <= set(range(1, 18))
    assert set(np.unique(ends)) == set(range(1, 18))


def test_current_status_structure():
    data = generate_dataset(GenConfig(n=500, reps=1), 0)
    psi, d1, d2, d3 = data.indicators.T
    assert np.all(d2 == 0)
    assert np.all(np.isinf(data.R[d3 == 1]))
    assert np.all(data.L[d1 == 1] == 0)


def test_reproducible_and_rep_specific():
    c = GenConfig(reps=2, seed=99)
    a, b = generate_dataset(c, 0), generate_dataset(c, 0)
    np.testing.assert_array_equal(a.L, b.L)
    np.testing.assert_array_equal(a.R, b.R)
    np.testing.assert_array_equal(a.X, b.X)
    assert not np.array_equal(a.X, generate_dataset(c, 1).X)


def test_subject_rows_do_not_depend_on_n():
    small = draw_latent(GenConfig(n=10, reps=1), 0)
    large = draw_latent(GenConfig(n=50, reps=1), 0)
    np.testing.assert_array_equal(small.X, large.X[:10])


def test_model_bases():
    data = generate_dataset(GenConfig(reps=1), 0)
    assert [model_basis(m, data).k for m in ("M1", "M2", "M3", "M4")] == [1, 1, 2, 3]
    spec = model_basis("M4", data).spec
    assert spec.degree == 2 and len(spec.interior_knots) == 1
    assert spec.boundary_knots[0] == 0.0
    with pytest.raises(ValueError):
        model_basis("M9", data)


def test_survival_grid_and_truth():
    grid = survival_grid(GenConfig())
    assert grid.size == 101 and grid[0] == 0.0
    assert grid[-1] == pytest.approx(-10 * math.log(0.05))
    assert survival_grid(GenConfig(obs_process="unif"))[-1] == 17.0
    assert true_baseline_survival(GenConfig(baseline="linear"), 10.0) == pytest.approx(0.7 * math.exp(-1))


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(p=1.0)
    with pytest.raises(ValueError):
        GenConfig(baseline="weibull")
    with pytest.raises(ValueError):
        GenConfig(n=0)


def test_scenario_grid_has_sixteen_cells():
    grid = scenario_grid()
    assert len(grid) == 16
    assert len({c.label for c in grid}) == 16
    assert grid[0].label == "log/exp/b1=-0.5/b2=-0.5"


FAST = FitConfig(tol=1e-5)


def test_single_replicate_has_no_sd():
    s = run_study(GenConfig(reps=1), ("M1",), FAST)
    row = s.row("M1", "beta1")
    assert row["SD"] is None and row["n"] == 1
    assert row["Bias"] is not None


def test_summary_invariant_to_replicate_order():
    config = GenConfig(reps=20, seed=5)
    forward = run_study(config, ("M1", "M4"), FAST)
    perm = np.random.default_rng(0).permutation(20)
    shuffled = run_study(config, ("M1", "M4"), FAST, rep_indices=perm.tolist())
    assert forward.table == shuffled.table
    assert forward.curves == shuffled.curves


def test_summary_ranges_and_curves():
    s = run_study(GenConfig(reps=6, seed=6), ("M1", "M2"), FAST)
    for row in s.table:
        assert row["SD"] >= 0 and row["ESE"] >= 0 and 0 <= row["CP95"] <= 1
    curve = s.curve("M1")
    assert curve["t"].size == 101
    assert np.all(curve["q025"] <= curve["mean"] + 1e-12)
    assert np.all(curve["mean"] <= curve["q975"] + 1e-12)
    assert s.fit_fraction() == 1.0 and s.failures == []


def test_parallel_matches_serial():
    config = GenConfig(reps=4, seed=8)
    serial = run_study(config, ("M1",), FAST, jobs=1)
    parallel = run_study(config, ("M1",), FAST, jobs=2)
    assert serial.table == parallel.table


def test_failures_recorded(monkeypatch):
    import icmix.simulation as sim

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(sim, "fit", boom)
    s = run_study(GenConfig(reps=2), ("M1",), FAST)
    assert len(s.failures) == 2 and "boom" in s.failures[0].error
    assert s.row("M1", "beta1")["Bias"] is None
