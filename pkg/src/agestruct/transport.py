"""Nonlinear simulator: characteristics-aligned splitting with ``dt == da``.

One step moves every age row up by one cell.  Along the way each cohort
is thinned by the exact exponential of the death rate (averaged over the
cell, with the pre-step weighted population), then diffused by the
backward-Euler evolution operator.  The newborn row is the trapezoid birth
integral of the new field; its own quadrature weight is handled
implicitly, and the population argument of the birth rate is refreshed
once after the newborn row is written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .diffusion import implicit_factor
from .model import BoundaryTrace, norm_e0, weighted_age_integral


class BlowUpError(RuntimeError):
    def __init__(self, t, norm):
        super().__init__(f"norm {norm:g} exceeded the cap at t={t:g}")
        self.t = t
        self.norm = norm


class Scheme:
    """Grid-dependent pieces of the stepper, computed once per model/grid."""

    def __init__(self, spec, grid, substeps=1):
        self.spec = spec
        self.grid = grid
        self.substeps = int(substeps)
        self.q = grid.age_weights
        self.nu = spec.weight_on(grid)
        h = grid.delta_a / self.substeps
        mids = (np.arange(grid.n_age * self.substeps) + 0.5) * h
        flat = implicit_factor(spec, mids, h, grid)
        shape = (grid.n_age, self.substeps, grid.n_space)
        flat.lower = flat.lower.reshape(shape)
        flat.denom = flat.denom.reshape(shape)
        flat.cprime = flat.cprime.reshape(shape)
        self._cells = [flat[:, s] for s in range(self.substeps)]
        self._fixed_death = None
        if not spec.death_depends_on_z:
            self._fixed_death = self.survival_from(spec.death_on(0.0, grid))

    def survival_from(self, m):
        return np.exp(-0.5 * self.grid.delta_a * (m[:-1] + m[1:]))

    def ubar(self, u):
        return self.q @ (self.nu * u)

    def death_factor(self, zbar):
        """Survival over each age cell, shape ``(n_age, n_space)``.

        Row ``j`` carries a cohort from ``a_j`` to ``a_{j+1}``.
        """
        if self._fixed_death is not None:
            return self._fixed_death
        return self.survival_from(self.spec.death_on(zbar, self.grid))

    def propagate(self, rows):
        """Diffuse departure rows ``0..n-1`` across their age cells.

        ``rows`` has shape ``(n_age, n_space)`` or ``(n_age, n_space, k)``.
        """
        for cell in self._cells:
            rows = cell.solve(rows)
        return rows

    def newborn(self, shifted, birth):
        """Solve ``B = q_0 b_0 B + sum_{j>=1} q_j b_j u_j`` for ``B``."""
        q0 = self.q[0]
        denom = 1.0 - q0 * birth[0]
        if np.any(denom <= 0):
            raise ValueError(
                "age step too coarse for the birth rate (need delta_a * b / 2 < 1)"
            )
        return (self.q[1:] @ (birth[1:] * shifted[1:])) / denom


@lru_cache(maxsize=32)
def scheme_for(spec, grid, substeps=1):
    return Scheme(spec, grid, substeps)


@dataclass(frozen=True)
class SimState:
    """Time, field and its cached weighted population."""

    t: float
    u: np.ndarray
    ubar: np.ndarray

    @classmethod
    def initial(cls, u0, spec, grid, t=0.0):
        u = np.array(grid.check(u0, "initial field"), dtype=float)
        u.setflags(write=False)
        return cls(float(t), u, weighted_age_integral(u, spec, grid))


@dataclass(frozen=True)
class SimOptions:
    horizon: float
    cap: float = 1e8
    snapshot_stride: int = 1
    record_boundary: bool = True
    substeps: int = 1
    birth_sweeps: int = 1

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.cap > 0:
            raise ValueError("cap must be positive")
        if self.snapshot_stride < 0:
            raise ValueError("snapshot_stride must be >= 0")


def step(state, spec, grid, substeps=1, birth_sweeps=1):
    """Advance ``state`` by one time step ``delta_t = delta_a``."""
    sch = scheme_for(spec, grid, substeps)
    u = state.u
    new = np.empty_like(u)
    new[1:] = sch.propagate(sch.death_factor(state.ubar) * u[:-1])

    partial = sch.q[1:] @ (sch.nu[1:] * new[1:])
    zbar = partial
    sweeps = 1 + birth_sweeps if spec.birth_depends_on_z else 1
    for _ in range(sweeps):
        newborn = sch.newborn(new, spec.birth_on(zbar, grid))
        zbar = partial + sch.q[0] * sch.nu[0] * newborn
    new[0] = newborn
    new.setflags(write=False)
    return SimState(state.t + grid.delta_t, new, sch.ubar(new))


def birth_boundary(u, ubar, spec, grid):
    """Trapezoid birth integral ``sum_j q_j b(ubar, a_j) u_j`` of a given field."""
    u = grid.check(u)
    return grid.age_weights @ (spec.birth_on(ubar, grid) * u)


@dataclass
class BlowUpReport:
    t: float
    norm: float


@dataclass
class Trajectory:
    times: np.ndarray
    norms: np.ndarray
    snapshots: list = field(default_factory=list)
    boundary: BoundaryTrace | None = None
    final: SimState | None = None
    blowup: BlowUpReport | None = None

    @property
    def completed(self):
        return self.blowup is None


def n_steps(horizon, grid):
    return max(1, math.ceil(horizon / grid.delta_t - 1e-9))


def simulate(u0, spec, grid, opts, sink=None):
    """Run the stepper up to ``opts.horizon`` or until the norm cap trips.

    ``sink(t, field)`` is called for every recorded snapshot.  Blow-up is
    reported on the returned trajectory, not raised.
    """
    q = spec.norm_q
    state = SimState.initial(u0, spec, grid)
    times = [0.0]
    norms = [norm_e0(state.u, grid, q)]
    snapshots = []
    births_t, births = [0.0], [state.u[0].copy()]

    def snap(s):
        snapshots.append((s.t, s.u))
        if sink is not None:
            sink(s.t, s.u)

    stride = opts.snapshot_stride
    if stride:
        snap(state)
    blowup = None
    total = n_steps(opts.horizon, grid)
    for k in range(1, total + 1):
        try:
            state = step(state, spec, grid, opts.substeps, opts.birth_sweeps)
        except FloatingPointError:
            blowup = BlowUpReport(k * grid.delta_t, math.inf)
            break
        state = replace(state, t=k * grid.delta_t)
        nrm = norm_e0(state.u, grid, q) if np.all(np.isfinite(state.u)) else math.inf
        times.append(state.t)
        norms.append(nrm)
        if opts.record_boundary:
            births_t.append(state.t)
            births.append(state.u[0].copy())
        if not nrm <= opts.cap:
            blowup = BlowUpReport(state.t, nrm)
            break
        if stride and (k % stride == 0 or k == total):
            snap(state)
    boundary = None
    if opts.record_boundary:
        vals = np.array(births) if births else np.empty((0, grid.n_space))
        if blowup is not None and births:
            keep = np.all(np.isfinite(vals), axis=1)
            vals = vals[keep]
            births_t = list(np.asarray(births_t)[keep])
        boundary = BoundaryTrace(np.array(births_t), vals)
    return Trajectory(
        np.array(times), np.array(norms), snapshots, boundary, state, blowup
    )
