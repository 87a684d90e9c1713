"""Grids, fields, model specifications and the basic age quadratures."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .ratelang import RateExpr, RateExprError, parse


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Age/space grid with the characteristic alignment ``delta_t == delta_a``.

    Ages are nodal, ``a_j = j * delta_a`` for ``j = 0..n_age``; space is
    cell-centred on ``[x_min, x_max]``.
    """

    a_max: float
    n_age: int
    n_space: int
    x_min: float = 0.0
    x_max: float = 1.0

    def __post_init__(self):
        if not self.a_max > 0:
            raise ValueError("a_max must be positive")
        if self.n_age < 2 or self.n_space < 2:
            raise ValueError("need n_age >= 2 and n_space >= 2")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def delta_a(self):
        return self.a_max / self.n_age

    @property
    def delta_t(self):
        return self.delta_a

    @property
    def delta_x(self):
        return (self.x_max - self.x_min) / self.n_space

    @property
    def length(self):
        return self.x_max - self.x_min

    @property
    def shape(self):
        return (self.n_age + 1, self.n_space)

    @property
    def ages(self):
        return np.arange(self.n_age + 1) * self.delta_a

    @property
    def x(self):
        return self.x_min + (np.arange(self.n_space) + 0.5) * self.delta_x

    @property
    def faces(self):
        """Interior cell faces ``x_{i+1/2}``, ``i = 0..n_space-2``."""
        return self.x_min + np.arange(1, self.n_space) * self.delta_x

    @property
    def age_weights(self):
        """Composite trapezoid weights on the age nodes."""
        q = np.full(self.n_age + 1, self.delta_a)
        q[0] = q[-1] = 0.5 * self.delta_a
        return q

    def zeros(self):
        return np.zeros(self.shape)

    def check(self, u, what="field"):
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise ValueError(f"{what} has shape {u.shape}, grid expects {self.shape}")
        return u


@dataclass(frozen=True)
class DensityField:
    """A density sampled on a :class:`Grid`; row ``j`` is age ``a_j``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("a density field is a 2-D array (age x space)")
        if not np.all(np.isfinite(values)):
            raise ValueError("density field has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape

    @property
    def nonnegative(self):
        return bool(self.values.min() >= -1e-12)


@dataclass(frozen=True)
class BoundaryTrace:
    """Newborn densities ``B(t)(x)`` recorded at increasing times."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if len(times) != len(values):
            raise ValueError("times and values differ in length")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must increase")
        if not np.all(np.isfinite(values)):
            raise ValueError("boundary trace has non-finite entries")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)


def _as_expr(value, variables):
    if isinstance(value, RateExpr):
        extra = value.variables - set(variables)
        if extra:
            raise ModelError(f"{value} uses {sorted(extra)}, allowed {variables}")
        return value
    return parse(value, variables)


def _on_grid(expr, z, ages, x):
    """Evaluate ``expr`` at every ``(z_i, a_j, x_i)``, shape (len(ages), len(x))."""
    shape = (len(ages), len(x))
    zz = np.asarray(z, dtype=float)
    if zz.ndim == 1:
        zz = zz[None, :]
    value = expr(zz, ages[:, None], x[None, :])
    return np.array(np.broadcast_to(value, shape), dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """Rates of the model.

    ``diffusion`` and ``weight`` are functions of ``(a, x)``; ``death`` and
    ``birth`` of ``(z, a, x)`` where ``z`` is the weighted population.
    Strings are parsed on construction.
    """

    diffusion: RateExpr
    death: RateExpr
    birth: RateExpr
    weight: RateExpr = field(default_factory=lambda: parse("1"))
    norm_q: float = 2

    def __post_init__(self):
        object.__setattr__(self, "diffusion", _as_expr(self.diffusion, ("a", "x")))
        object.__setattr__(self, "weight", _as_expr(self.weight, ("a", "x")))
        object.__setattr__(self, "death", _as_expr(self.death, ("z", "a", "x")))
        object.__setattr__(self, "birth", _as_expr(self.birth, ("z", "a", "x")))
        if self.norm_q not in (1, 2, np.inf):
            raise ModelError(f"unsupported norm exponent {self.norm_q}")

    @cached_property
    def death_dz(self):
        return self.death.diff_z()

    @cached_property
    def birth_dz(self):
        return self.birth.diff_z()

    @property
    def death_depends_on_z(self):
        return self.death.depends_on("z")

    @property
    def birth_depends_on_z(self):
        return self.birth.depends_on("z")

    @property
    def is_linear(self):
        return not (self.death_depends_on_z or self.birth_depends_on_z)

    @property
    def x_independent(self):
        return not any(
            e.depends_on("x") for e in (self.death, self.birth, self.weight)
        )

    # -- sampling on the grid ------------------------------------------------
    def death_on(self, z, grid):
        return _on_grid(self.death, z, grid.ages, grid.x)

    def birth_on(self, z, grid):
        return _on_grid(self.birth, z, grid.ages, grid.x)

    def death_dz_on(self, z, grid):
        return _on_grid(self.death_dz, z, grid.ages, grid.x)

    def birth_dz_on(self, z, grid):
        return _on_grid(self.birth_dz, z, grid.ages, grid.x)

    def weight_on(self, grid):
        return _on_grid(self.weight, 0.0, grid.ages, grid.x)

    def diffusion_at(self, a, x):
        return np.array(
            np.broadcast_to(self.diffusion(0.0, a, np.asarray(x, dtype=float)), np.shape(x)),
            dtype=float,
        )


def weighted_age_integral(u, spec, grid):
    """Weighted population ``sum_j q_j nu(a_j, x) u(a_j, x)`` per cell."""
    u = grid.check(u)
    return grid.age_weights @ (spec.weight_on(grid) * u)


def _spatial_norms(u, grid, q):
    u = np.abs(u)
    if q == 1:
        return u.sum(axis=-1) * grid.delta_x
    if q == 2:
        return np.sqrt((u * u).sum(axis=-1) * grid.delta_x)
    if q == np.inf or q == "inf":
        return u.max(axis=-1)
    raise ValueError(f"unsupported norm exponent {q!r}")


def norm_e0(u, grid, q=2):
    """Discrete ``L1(age; Lq(space))`` norm."""
    u = grid.check(u)
    return float(grid.age_weights @ _spatial_norms(u, grid, q))


@dataclass(frozen=True)
class Violation:
    rate: str
    node: tuple
    value: float

    def __str__(self):
        return f"{self.rate} = {self.value:g} at {self.node}"


def _pointwise_failure(name, expr, zs, grid):
    """Locate the first node where ``expr`` cannot be evaluated."""
    for z in zs:
        for a in grid.ages:
            for x in grid.x:
                try:
                    expr(z, a, x)
                except RateExprError as exc:
                    return ModelError(f"{name} ({expr}) fails at z={z:g}, a={a:g}, x={x:g}: {exc}")
    return None


def validate_model(spec, grid, z_range=(0.0, 10.0)):
    """Check the sign conditions on all grid nodes.

    ``d`` must be positive; ``m``, ``b`` and ``nu`` non-negative, the latter
    two for 17 equispaced ``z`` in ``z_range``.  Returns the list of
    violations (empty when the model is valid).
    """
    lo, hi = (float(v) for v in z_range)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ValueError(f"bad z range {z_range}")
    zs = np.linspace(lo, hi, 17)
    ages, x = grid.ages, grid.x
    violations = []

    def sample(name, expr, z):
        try:
            return _on_grid(expr, np.full(len(x), z), ages, x)
        except RateExprError:
            raise _pointwise_failure(name, expr, [z], grid) from None

    def record(name, values, bad, z=None):
        for j, i in zip(*np.nonzero(bad)):
            node = (float(ages[j]), float(x[i])) if z is None else (float(z), float(ages[j]), float(x[i]))
            violations.append(Violation(name, node, float(values[j, i])))

    d = sample("diffusion", spec.diffusion, 0.0)
    record("diffusion", d, d <= 0)
    nu = sample("weight", spec.weight, 0.0)
    record("weight", nu, nu < 0)
    for name, expr in (("death", spec.death), ("birth", spec.birth)):
        for z in zs if expr.depends_on("z") else zs[:1]:
            values = sample(name, expr, z)
            record(name, values, values < 0, z)
    return violations
