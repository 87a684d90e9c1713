import math

import numpy as np
import pytest

from agestruct.model import Grid, ModelSpec, norm_e0, weighted_age_integral
from agestruct.transport import SimOptions, SimState, birth_boundary, simulate, step

from oracles import scalar_renewal


def _run(u, spec, grid, steps):
    s = SimState.initial(u, spec, grid)
    for _ in range(steps):
        s = step(s, spec, grid)
    return s


def test_zero_is_a_fixed_point(logistic, small_grid):
    s = _run(small_grid.zeros(), logistic, small_grid, 30)
    assert not s.u.any()


def test_pure_transport_exits(rng):
    g = Grid(1.0, 20, 8)
    spec = ModelSpec("0.3 + x", "0", "0")
    s = SimState.initial(rng.random(g.shape), spec, g)
    for k in range(g.n_age):
        s = step(s, spec, g)
        assert np.all(s.u[: k + 1] == 0)
    assert np.any(s.u[-1] != 0)
    s = step(s, spec, g)
    assert not s.u.any()


def test_state_caches_weighted_population(logistic_birth, small_grid, rng):
    s = _run(rng.random(small_grid.shape), logistic_birth, small_grid, 5)
    np.testing.assert_allclose(s.ubar, weighted_age_integral(s.u, logistic_birth, small_grid),
                               rtol=1e-12)
    assert s.t == pytest.approx(5 * small_grid.delta_t)
    with pytest.raises(ValueError):
        s.u[0, 0] = 1.0


def test_matches_scalar_renewal_oracle():
    a_max, n = 3.0, 60
    g = Grid(a_max, n, 10)
    spec = ModelSpec("0.2 + 0.1*sin(3*x) + 0.05*a", "0.1 + 0.05*a + 0.3*z", "2*a*exp(-a)/(1+z)",
                     weight="1 + 0.1*a")
    u0 = np.exp(-g.ages) * (1 + g.ages)
    ref = scalar_renewal(
        u0,
        lambda z, a: 0.1 + 0.05 * a + 0.3 * z,
        lambda z, a: 2 * a * math.exp(-a) / (1 + z),
        lambda a: 1 + 0.1 * a,
        a_max, n, 200,
    )
    s = SimState.initial(np.repeat(u0[:, None], g.n_space, axis=1), spec, g)
    for k in range(1, 201):
        s = step(s, spec, g)
        assert np.abs(s.u - ref[k][:, None]).max() <= 1e-10 * max(1.0, np.abs(ref[k]).max())


def test_spatial_constancy_persists():
    g = Grid(2.0, 40, 16)
    spec = ModelSpec("0.05 + x^2*(1+a)", "0.3 + z", "4*exp(-a)")
    s = SimState.initial(np.ones(g.shape), spec, g)
    for _ in range(1000):
        s = step(s, spec, g)
    assert np.ptp(s.u, axis=1).max() <= 1e-11


def test_linear_superposition(rng):
    g = Grid(2.0, 30, 12)
    spec = ModelSpec("0.1 + x", "0.2 + 0.1*a*x", "1.5*exp(-a)*(1+x)")
    u, v = rng.random(g.shape), rng.random(g.shape)
    su = _run(u, spec, g, 3).u
    sv = _run(v, spec, g, 3).u
    suv = _run(2.0 * u + 0.5 * v, spec, g, 3).u
    np.testing.assert_allclose(suv, 2.0 * su + 0.5 * sv, rtol=1e-11, atol=1e-14)


def test_positivity_linear_model(rng):
    g = Grid(2.0, 40, 10)
    spec = ModelSpec("0.02 + x", "0.1*a", "2*a*exp(-a)")
    u0 = rng.random(g.shape) * (rng.random(g.shape) > 0.7)
    traj = simulate(u0, spec, g, SimOptions(20.0, snapshot_stride=5))
    assert all(snap.min() >= -1e-12 for _, snap in traj.snapshots)


def test_logistic_death_converges(logistic):
    g = Grid(4.0, 200, 8)
    s = SimState.initial(np.ones(g.shape), logistic, g)
    prev = s
    for _ in range(4000):
        prev, s = s, step(s, logistic, g)
    change = norm_e0(s.u - prev.u, g) / g.delta_t
    assert change < 1e-8
    assert norm_e0(s.u, g) < 1e8


def test_supercritical_blowup_is_reported():
    g = Grid(1.0, 50, 4)
    spec = ModelSpec("0.1", "0", "10")
    traj = simulate(np.ones(g.shape), spec, g, SimOptions(100.0, snapshot_stride=0))
    assert not traj.completed
    assert 0 < traj.blowup.t < 100.0
    assert traj.blowup.norm > 1e8
    assert traj.times[-1] == pytest.approx(traj.blowup.t)
    assert np.all(np.isfinite(traj.boundary.values))


def test_newborn_weight_restriction():
    g = Grid(1.0, 2, 4)
    spec = ModelSpec("0.1", "0", "5")
    with pytest.raises(ValueError, match="too coarse"):
        step(SimState.initial(np.ones(g.shape), spec, g), spec, g)


def test_birth_boundary_examples():
    g = Grid(2.0, 10, 3)
    np.testing.assert_allclose(
        birth_boundary(np.ones(g.shape), np.zeros(3), ModelSpec("1", "0", "1"), g), 2.0)
    assert not birth_boundary(g.zeros(), np.zeros(3), ModelSpec("1", "0", "1"), g).any()
    g = Grid(1.0, 16, 3)
    b = birth_boundary(np.ones(g.shape), np.zeros(3), ModelSpec("1", "0", "exp(-a)"), g)
    np.testing.assert_allclose(b, 1 - math.exp(-1), atol=g.delta_a**2 / 12)


def test_simulate_records_and_is_deterministic(logistic_birth, small_grid, rng):
    u0 = rng.random(small_grid.shape)
    seen = []
    opts = SimOptions(1.0, snapshot_stride=4)
    a = simulate(u0, logistic_birth, small_grid, opts, sink=lambda t, u: seen.append(t))
    b = simulate(u0, logistic_birth, small_grid, opts)
    n = round(1.0 / small_grid.delta_t)
    assert len(a.times) == n + 1 and len(a.norms) == n + 1
    assert a.times[-1] == n * small_grid.delta_t
    np.testing.assert_array_equal(a.norms, b.norms)
    np.testing.assert_array_equal(a.final.u, b.final.u)
    assert seen[0] == 0.0 and len(seen) == len(a.snapshots)
    np.testing.assert_array_equal(a.boundary.values[-1], a.final.u[0])
    assert a.boundary.times[0] == 0.0 and len(a.boundary.times) == n + 1


def test_sim_options_validation():
    with pytest.raises(ValueError):
        SimOptions(0.0)
    with pytest.raises(ValueError):
        SimOptions(1.0, cap=-1)
