"""Equilibria as fixed points of the one-step map of the simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .model import DensityField, norm_e0, weighted_age_integral
from .transport import BlowUpError, SimState, step


class EquilibriumError(RuntimeError):
    pass


class SingularJacobianError(EquilibriumError):
    pass


class NoBracketError(ValueError):
    pass


@dataclass(frozen=True)
class EquilibriumResult:
    phi: DensityField
    phibar: np.ndarray
    residual: float
    method: str
    iterations: int
    converged: bool

    @property
    def values(self):
        return self.phi.values

    @property
    def boundary(self):
        return self.phi.values[0]


def _advance(u, spec, grid, substeps=1):
    state = SimState.initial(u, spec, grid)
    return step(state, spec, grid, substeps).u


def equilibrium_residual(phi, spec, grid, substeps=1):
    """``norm_e0(step(phi) - phi) / delta``."""
    u = np.asarray(phi, dtype=float)
    grid.check(u, "equilibrium")
    return norm_e0(_advance(u, spec, grid, substeps) - u, grid, spec.norm_q) / grid.delta_t


def _result(u, spec, grid, method, iterations, converged, residual=None, substeps=1):
    if residual is None:
        residual = equilibrium_residual(u, spec, grid, substeps)
    return EquilibriumResult(
        DensityField(u), weighted_age_integral(u, spec, grid), float(residual),
        method, int(iterations), bool(converged),
    )


def find_equilibrium_march(u0, spec, grid, tol=1e-10, max_steps=200_000,
                           cap=1e8, substeps=1):
    """Step until ``norm_e0(u^{n+1} - u^n) / delta <= tol``.

    Returns ``u^n``, whose residual is exactly the last measured change.
    Blow-up past ``cap`` raises :class:`BlowUpError`.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    q = spec.norm_q
    dt = grid.delta_t
    state = SimState.initial(u0, spec, grid)
    change = math.inf
    for n in range(max_steps):
        new = step(state, spec, grid, substeps)
        change = norm_e0(new.u - state.u, grid, q) / dt
        if change <= tol:
            return _result(state.u, spec, grid, "march", n, True, change)
        nrm = norm_e0(new.u, grid, q)
        if not nrm <= cap:
            raise BlowUpError(new.t, nrm)
        state = new
    return _result(state.u, spec, grid, "march", max_steps, False, substeps=substeps)


def find_equilibrium_newton(init, spec, grid, tol=1e-11, max_iters=30,
                            jacobian="fd", substeps=1, max_halvings=8):
    """Newton's method on ``R(phi) = (step(phi) - phi) / delta``.

    ``jacobian="fd"`` solves with GMRES on directional finite differences of
    the step; ``"generator"`` uses the assembled linearised generator
    instead (a quasi-Newton iteration).  Each update is halved up to
    ``max_halvings`` times while the residual does not decrease.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    shape = grid.shape
    dt = grid.delta_t
    q = spec.norm_q

    def R(v):
        u = v.reshape(shape)
        return ((_advance(u, spec, grid, substeps) - u) / dt).ravel()

    def size(r):
        return norm_e0(r.reshape(shape), grid, q)

    u = np.array(grid.check(init, "initial guess"), dtype=float).ravel()
    r = R(u)
    res = size(r)
    for it in range(max_iters):
        if res <= tol:
            return _result(u.reshape(shape), spec, grid, "newton", it, True, res)
        delta = _newton_direction(u, r, R, spec, grid, jacobian)
        alpha = 1.0
        for _ in range(max_halvings + 1):
            trial = u + alpha * delta
            r_trial = R(trial)
            res_trial = size(r_trial)
            if res_trial < res:
                break
            alpha *= 0.5
        else:
            return _result(u.reshape(shape), spec, grid, "newton", it, False, res)
        u, r, res = trial, r_trial, res_trial
    return _result(u.reshape(shape), spec, grid, "newton", max_iters, res <= tol, res)


def _generator_preconditioner(u, spec, grid):
    """Sparse LU of the linearised generator, or None if it is singular."""
    from .spectral import assemble_generator

    L = assemble_generator(u.reshape(grid.shape), spec, grid).matrix.tocsc()
    try:
        lu = spla.splu(L)
    except RuntimeError:
        return None
    return spla.LinearOperator(L.shape, matvec=lu.solve, dtype=float)


def _newton_direction(u, r, R, spec, grid, jacobian):
    N = u.size
    if jacobian == "generator":
        from .spectral import assemble_generator

        L = assemble_generator(u.reshape(grid.shape), spec, grid).matrix.tocsc()
        try:
            delta = spla.spsolve(L, -r)
        except RuntimeError as exc:
            raise SingularJacobianError(str(exc)) from exc
    elif jacobian == "fd":
        scale = max(1.0, float(np.max(np.abs(u))))

        def jv(v):
            nv = np.linalg.norm(v)
            if nv == 0:
                return np.zeros_like(v)
            eps = 1e-7 * scale / nv
            return (R(u + eps * v) - r) / eps

        J = spla.LinearOperator((N, N), matvec=jv, dtype=float)
        delta, info = spla.gmres(J, -r, rtol=1e-8, atol=0.0, restart=min(N, 100),
                                 maxiter=5, M=_generator_preconditioner(u, spec, grid))
        if info < 0:
            raise SingularJacobianError("GMRES breakdown")
    else:
        raise ValueError(f"unknown jacobian {jacobian!r}")
    if not np.all(np.isfinite(delta)):
        raise SingularJacobianError("Newton direction is not finite (singular Jacobian)")
    return delta


# --------------------------------------------------------------------------
# Scalar renewal oracle


def _check_x_independent(spec):
    for name in ("death", "birth", "weight"):
        if getattr(spec, name).depends_on("x"):
            raise ValueError(f"{name} rate depends on x")


def renewal_number(spec, z, a_max):
    """``int_0^a_max b(z,a) exp(-int_0^a m(z,s) ds) da`` by adaptive ODE integration."""
    x0 = 0.0

    def rhs(a, y):
        return [-float(spec.death(z, a, x0)) * y[0], float(spec.birth(z, a, x0)) * y[0]]

    sol = solve_ivp(rhs, (0.0, a_max), [1.0, 0.0], method="DOP853",
                    rtol=1e-13, atol=1e-15)
    if not sol.success:
        raise EquilibriumError(sol.message)
    return float(sol.y[1, -1])


def scalar_equilibrium_oracle(spec, grid, tol=1e-12):
    """Weighted population ``z*`` of the nontrivial ``x``-independent equilibrium.

    Solves ``R(z*) = 1`` by bisection, ``R`` being :func:`renewal_number`.
    Returns 0 when ``R(0) = 1`` (threshold).
    """
    _check_x_independent(spec)
    a_max = grid.a_max

    def R(z):
        return renewal_number(spec, z, a_max)

    r0 = R(0.0)
    if abs(r0 - 1.0) <= 1e-10:
        return 0.0
    if r0 < 1.0:
        raise NoBracketError(f"R(0) = {r0:g} <= 1: no nontrivial equilibrium")
    hi = 1.0
    for _ in range(60):
        if R(hi) < 1.0:
            break
        hi *= 2.0
    else:
        raise NoBracketError("R(z) stays above 1")
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if R(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def seed_nontrivial(spec, grid):
    """Constant positive field whose weighted population is ``z*/2`` (or 0.1)."""
    target = 0.1
    try:
        target = 0.5 * scalar_equilibrium_oracle(spec, grid)
    except (ValueError, EquilibriumError):
        pass
    if target <= 0:
        target = 0.1
    unit = weighted_age_integral(np.ones(grid.shape), spec, grid)
    return np.ones(grid.shape) * (target / unit)[None, :]
