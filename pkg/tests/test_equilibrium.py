import math

import numpy as np
import pytest

from agestruct.equilibrium import (
    NoBracketError, equilibrium_residual, find_equilibrium_march, find_equilibrium_newton,
    renewal_number, scalar_equilibrium_oracle, seed_nontrivial,
)
from agestruct.model import Grid, ModelSpec, norm_e0, weighted_age_integral
from agestruct.transport import BlowUpError


@pytest.fixture(scope="module")
def grid():
    return Grid(4.0, 200, 8)


@pytest.fixture(scope="module")
def logistic():
    return ModelSpec("0.1 + 0.05*x", "0.2 + z", "2")


@pytest.fixture(scope="module")
def tight(logistic, grid):
    return find_equilibrium_march(seed_nontrivial(logistic, grid), logistic, grid, tol=1e-10)


def test_zero_residual_at_zero(logistic, grid):
    assert equilibrium_residual(grid.zeros(), logistic, grid) <= 1e-14


def test_single_cell_is_not_an_equilibrium(logistic, grid):
    u = grid.zeros()
    u[50, 3] = 1.0
    assert equilibrium_residual(u, logistic, grid) > 0.1


def test_march_residual_is_self_consistent(tight, logistic, grid):
    assert tight.converged and tight.method == "march"
    assert tight.residual <= 1e-10
    assert equilibrium_residual(tight.phi, logistic, grid) == pytest.approx(tight.residual,
                                                                          rel=1e-12)
    np.testing.assert_allclose(tight.phibar, weighted_age_integral(tight.values, logistic, grid))
    np.testing.assert_array_equal(tight.boundary, tight.values[0])


def test_march_matches_scalar_oracle_at_fine_age_grid(logistic):
    g = Grid(4.0, 400, 6)
    res = find_equilibrium_march(seed_nontrivial(logistic, g), logistic, g, tol=1e-10)
    z_star = scalar_equilibrium_oracle(logistic, g)
    assert np.ptp(res.phibar) <= 1e-10
    assert res.phibar.mean() == pytest.approx(z_star, rel=1e-4)


def test_subcritical_march_decays_to_zero(grid):
    spec = ModelSpec("0.1", "0.5", "0.4")
    res = find_equilibrium_march(np.ones(grid.shape), spec, grid, tol=1e-9)
    assert res.converged and res.residual <= 1e-9
    assert norm_e0(res.values, grid) < 1e-6


def test_zero_start_converges_immediately(logistic, grid):
    res = find_equilibrium_march(grid.zeros(), logistic, grid, tol=1e-12)
    assert res.converged and res.iterations == 0 and not res.values.any()


def test_march_non_convergence_flag(logistic, grid):
    res = find_equilibrium_march(np.ones(grid.shape), logistic, grid, tol=1e-12, max_steps=5)
    assert not res.converged and res.iterations == 5
    assert res.residual == pytest.approx(equilibrium_residual(res.phi, logistic, grid))


def test_march_blowup_passthrough():
    g = Grid(1.0, 50, 4)
    with pytest.raises(BlowUpError):
        find_equilibrium_march(np.ones(g.shape), ModelSpec("0.1", "0", "10"), g)


def test_march_rejects_bad_tolerance(logistic, grid):
    with pytest.raises(ValueError):
        find_equilibrium_march(grid.zeros(), logistic, grid, tol=0.0)


def test_newton_polishes_march_output(tight, logistic, grid):
    res = find_equilibrium_newton(tight.phi, logistic, grid)
    assert res.converged and res.iterations <= 3
    assert res.residual <= 1e-11
    assert equilibrium_residual(res.phi, logistic, grid) <= 1e-11


def test_newton_stays_at_zero(logistic, grid):
    res = find_equilibrium_newton(grid.zeros(), logistic, grid)
    assert res.converged and res.iterations == 0 and not res.values.any()


def test_newton_from_loose_march_agrees_with_tight_march(tight, logistic, grid):
    loose = find_equilibrium_march(seed_nontrivial(logistic, grid), logistic, grid, tol=1e-3)
    res = find_equilibrium_newton(loose.phi, logistic, grid)
    assert res.converged
    assert norm_e0(res.values - tight.values, grid) <= 1e-6
    assert res.residual <= 10 * 1e-11


def test_generator_jacobian_reaches_same_point(tight, logistic, grid):
    loose = find_equilibrium_march(seed_nontrivial(logistic, grid), logistic, grid, tol=1e-3)
    fd = find_equilibrium_newton(loose.phi, logistic, grid)
    gen = find_equilibrium_newton(loose.phi, logistic, grid, jacobian="generator", max_iters=60)
    assert gen.converged
    # the generator is only an O(delta) approximation of the step Jacobian,
    # so the quasi-Newton iteration needs more steps than the exact one
    assert gen.iterations >= fd.iterations
    assert norm_e0(gen.values - fd.values, grid) <= 1e-8


def test_newton_rejects_unknown_jacobian(logistic, grid):
    with pytest.raises(ValueError):
        find_equilibrium_newton(np.ones(grid.shape), logistic, grid, jacobian="exact")


def test_oracle_closed_form_case():
    spec = ModelSpec("0.1", "0.2 + z", "2")
    assert scalar_equilibrium_oracle(spec, Grid(30.0, 10, 2)) == pytest.approx(1.8, abs=1e-10)


def test_oracle_threshold_and_no_bracket():
    g = Grid(4.0, 10, 2)
    b0 = 0.5 / -math.expm1(-2.0)
    assert scalar_equilibrium_oracle(ModelSpec("1", "0.5", repr(b0)), g) == 0.0
    with pytest.raises(NoBracketError):
        scalar_equilibrium_oracle(ModelSpec("1", "0.5", "0"), g)
    with pytest.raises(ValueError):
        scalar_equilibrium_oracle(ModelSpec("1", "0.5 + x", "2"), g)


def test_renewal_number_constant_rates():
    spec = ModelSpec("1", "0.7", "1.3")
    assert renewal_number(spec, 0.0, 3.0) == pytest.approx(1.3 / 0.7 * -math.expm1(-2.1),
                                                          rel=1e-11)


def test_seed_sits_at_half_the_oracle(logistic, grid):
    u = seed_nontrivial(logistic, grid)
    z_star = scalar_equilibrium_oracle(logistic, grid)
    np.testing.assert_allclose(weighted_age_integral(u, logistic, grid), z_star / 2, rtol=1e-12)
    other = seed_nontrivial(ModelSpec("1", "0.5 + x", "2/(1+z)"), grid)
    np.testing.assert_allclose(weighted_age_integral(other, logistic, grid), 0.1, rtol=1e-12)
