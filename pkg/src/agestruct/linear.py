"""Linear problems with frozen equilibrium rates and a nonlocal boundary.

The stepper mirrors :func:`agestruct.transport.step`: each step shifts the
age rows by one cell, applies the frozen survival factor and the diffusion
operator, then writes the newborn row from the linearised birth law

    B = sum_j q_j b(phibar, a_j) W_j + c(x) * sum_j q_j nu(a_j) W_j + h,

with ``c(x) = sum_j q_j d_z b(phibar, a_j) phi_j``.  The newborn row's own
quadrature weight is solved for exactly, so ``B == M_phi(W) + h`` holds
to rounding for every recorded state.

External forcing ``f`` is injected at the departure point of each
characteristic and integrated against ``exp(-gamma s)`` over the step.
The rank-one reaction term ``-d_z m(phibar) [Wbar] phi`` is applied with
weight ``dt`` outside the ``exp(-gamma dt)`` factor, so that for ``f = 0``
the shifted problem with forcing ``gamma W`` reproduces ``W`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import BoundaryTrace, norm_e0, weighted_age_integral
from .transport import BlowUpError, scheme_for


@dataclass(frozen=True)
class BoundaryOperator:
    """Tabulated linearised birth law ``M_phi``."""

    birth: np.ndarray  # b(phibar(x), a_j, x), shape (n_age+1, n_space)
    correction: np.ndarray  # sum_s q_s d_z b(phibar, a_s) phi(s), shape (n_space,)
    weight: np.ndarray  # nu(a_j, x)

    @classmethod
    def at(cls, phi, spec, grid):
        phi = grid.check(phi, "equilibrium")
        phibar = weighted_age_integral(phi, spec, grid)
        birth = spec.birth_on(phibar, grid)
        if spec.birth_depends_on_z:
            correction = grid.age_weights @ (spec.birth_dz_on(phibar, grid) * phi)
        else:
            correction = np.zeros(grid.n_space)
        return cls(birth, correction, spec.weight_on(grid))


def apply_boundary(v, op, grid):
    """``M_phi(v)`` for a given field ``v``."""
    v = grid.check(v)
    q = grid.age_weights
    return q @ (op.birth * v) + op.correction * (q @ (op.weight * v))


def linearized_reaction(v, phi, spec, grid):
    """``-m(phibar, a) v - d_z m(phibar, a) [vbar] phi``."""
    v = grid.check(v)
    phi = grid.check(phi, "equilibrium")
    phibar = weighted_age_integral(phi, spec, grid)
    out = -spec.death_on(phibar, grid) * v
    if spec.death_depends_on_z:
        vbar = weighted_age_integral(v, spec, grid)
        out = out - spec.death_dz_on(phibar, grid) * vbar * phi
    return out


Provider = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class LinearProblemData:
    """Data of ``W^{gamma,h}_{z,f}``: initial field, forcing, shift, boundary source.

    ``forcing(t)`` returns a field and ``source(t)`` a spatial vector; either
    may be None for zero.
    """

    initial: np.ndarray
    phi: np.ndarray
    forcing: Provider | None = None
    source: Provider | None = None
    gamma: float = 0.0


@dataclass
class LinearTrajectory:
    times: np.ndarray
    fields: list
    boundary: BoundaryTrace

    @property
    def final(self):
        return self.fields[-1]


class LinearStepper:
    """One-step map of the frozen-rate linear problem.

    ``fold_death`` keeps the frozen ``-m(phibar, a)`` term as part of the
    operator; ``reaction`` adds the rank-one ``d_z m`` term.
    """

    def __init__(self, phi, spec, grid, gamma=0.0, fold_death=True,
                 reaction=True, substeps=1):
        self.grid = grid
        self.spec = spec
        self.gamma = float(gamma)
        self.scheme = scheme_for(spec, grid, substeps)
        phi = np.array(grid.check(phi, "equilibrium"), dtype=float)
        self.phi = phi
        phibar = weighted_age_integral(phi, spec, grid)
        self.phibar = phibar
        self.op = BoundaryOperator.at(phi, spec, grid)
        if fold_death:
            self.survival = self.scheme.survival_from(spec.death_on(phibar, grid))
        else:
            self.survival = np.ones((grid.n_age, grid.n_space))
        self.dm = None
        if reaction and spec.death_depends_on_z:
            dm = spec.death_dz_on(phibar, grid) * phi
            if np.any(dm != 0):
                self.dm = dm
        q0 = grid.age_weights[0]
        self.denom = 1.0 - q0 * (self.op.birth[0] + self.op.correction * self.op.weight[0])
        if np.any(self.denom <= 0):
            raise ValueError("age step too coarse for the linearised birth law")
        dt = grid.delta_t
        self.decay = math.exp(-self.gamma * dt)
        self.forcing_weight = dt if self.gamma == 0 else -math.expm1(-self.gamma * dt) / self.gamma

    def boundary(self, rows, source=None):
        """Newborn row from rows ``1..n`` (row 0 of ``rows`` is ignored)."""
        q = self.grid.age_weights
        op = self.op
        total = q[1:] @ (op.birth[1:] * rows[1:])
        total = total + op.correction * (q[1:] @ (op.weight[1:] * rows[1:]))
        if source is not None:
            total = total + source
        return total / self.denom

    def __call__(self, w, forcing=None, source=None):
        dt = self.grid.delta_t
        dep = self.decay * w[:-1]
        if self.dm is not None:
            dep = dep - dt * self.dm[:-1] * self.scheme.ubar(w)
        if forcing is not None:
            dep = dep + self.forcing_weight * forcing[:-1]
        new = np.empty_like(w)
        new[1:] = self.scheme.propagate(self.survival * dep)
        new[0] = self.boundary(new, source)
        return new


def solve_linear(data, spec, grid, T, fold_death=True, reaction=True,
                 substeps=1, cap=None):
    """Integrate the linear problem to time ``T`` (a multiple of ``delta_t``).

    Returns every grid-time field and the boundary trace ``B(t) = W(t, 0)``.
    """
    stepper = LinearStepper(data.phi, spec, grid, data.gamma, fold_death,
                            reaction, substeps)
    steps = _steps(T, grid)
    w = np.array(grid.check(data.initial, "initial field"), dtype=float)
    fields = [w]
    times = [0.0]
    births = [w[0].copy()]
    dt = grid.delta_t
    for k in range(steps):
        t = k * dt
        f = None if data.forcing is None else grid.check(data.forcing(t), "forcing")
        h = None if data.source is None else np.asarray(data.source(t + dt), dtype=float)
        w = stepper(w, f, h)
        if cap is not None:
            nrm = norm_e0(w, grid, spec.norm_q)
            if not nrm <= cap:
                raise BlowUpError((k + 1) * dt, nrm)
        fields.append(w)
        times.append((k + 1) * dt)
        births.append(w[0].copy())
    return LinearTrajectory(np.array(times), fields,
                            BoundaryTrace(np.array(times), np.array(births)))


def _steps(T, grid):
    steps = round(T / grid.delta_t)
    if steps < 0 or abs(steps * grid.delta_t - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of the time step {grid.delta_t}")
    return steps


def _default_fold(spec, fold_death):
    return (not spec.death_depends_on_z) if fold_death is None else fold_death


def semigroup_S(t, z, phi, spec, grid, fold_death=None):
    """``S(t) z``: frozen-rate problem without the ``d_z m`` reaction.

    With ``fold_death`` (default when death is ``z``-independent) the frozen
    death rate is part of the operator; otherwise it is left out entirely.
    """
    data = LinearProblemData(z, phi)
    fold = _default_fold(spec, fold_death)
    return solve_linear(data, spec, grid, t, fold_death=fold, reaction=False).final


def semigroup_T(t, v0, phi, spec, grid):
    """``T_phi(t) v0``: the full linearisation at ``phi``."""
    data = LinearProblemData(v0, phi)
    return solve_linear(data, spec, grid, t, fold_death=True, reaction=True).final


def gamma_shift_check(data, spec, grid, T, fold_death=None, reaction=False):
    """Compare ``W^{0,h}_{z,f}`` with ``W^{gamma,h}_{z, f + gamma W}``.

    Returns the largest ``norm_e0`` deviation over all grid times.
    """
    fold = _default_fold(spec, fold_death)
    base = LinearProblemData(data.initial, data.phi, data.forcing, data.source, 0.0)
    ref = solve_linear(base, spec, grid, T, fold, reaction)
    if data.gamma == 0:
        return 0.0
    dt = grid.delta_t
    recorded = ref.fields
    gamma = data.gamma

    def forcing(t):
        w = recorded[round(t / dt)]
        extra = gamma * w
        return extra if data.forcing is None else data.forcing(t) + extra

    shifted = LinearProblemData(data.initial, data.phi, forcing, data.source, gamma)
    run = solve_linear(shifted, spec, grid, T, fold, reaction)
    return max(
        norm_e0(a - b, grid, spec.norm_q) for a, b in zip(ref.fields, run.fields)
    )


@dataclass
class DuhamelResult:
    deviation: float
    scale: float
    constant: float = field(default=0.0)


def duhamel_check(z, forcing, gamma, phi, spec, grid, T, fold_death=None):
    """Compare ``W^{gamma,0}_{z,f}(T)`` with its semigroup representation.

    The right side ``exp(-gamma T) S(T) z + sum_k dt exp(-gamma(T-t_k))
    S(T - t_k) f(t_k)`` is assembled from independent ``semigroup_S``
    calls.  ``constant`` is ``deviation / (dt * scale)``.
    """
    fold = _default_fold(spec, fold_death)
    data = LinearProblemData(z, phi, forcing, None, gamma)
    lhs = solve_linear(data, spec, grid, T, fold, reaction=False).final
    steps = _steps(T, grid)
    dt = grid.delta_t
    rhs = math.exp(-gamma * T) * semigroup_S(T, z, phi, spec, grid, fold)
    if forcing is not None:
        for k in range(steps):
            tk = k * dt
            rhs = rhs + dt * math.exp(-gamma * (T - tk)) * semigroup_S(
                T - tk, forcing(tk), phi, spec, grid, fold
            )
    q = spec.norm_q
    deviation = norm_e0(lhs - rhs, grid, q)
    scale = max(norm_e0(lhs, grid, q), norm_e0(rhs, grid, q))
    constant = deviation / (dt * scale) if scale > 0 else 0.0
    return DuhamelResult(deviation, scale, constant)
