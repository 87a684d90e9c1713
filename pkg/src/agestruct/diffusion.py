"""Variable-coefficient Neumann diffusion advanced in the age variable.

The spatial operator is the flux-form three-point stencil

    (A w)_i = [d_{i+1/2} (w_{i+1} - w_i) - d_{i-1/2} (w_i - w_{i-1})] / dx^2

with ``d_{-1/2} = d_{n-1/2} = 0`` (no flux through the boundary).  It is
advanced with backward Euler substeps, the coefficient frozen at each
substep's midpoint age.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TridiagonalFactor:
    """Thomas-algorithm factorisation of a batch of tridiagonal matrices.

    ``lower``, ``diag``, ``upper`` have shape ``(..., n)``; ``lower[..., 0]``
    and ``upper[..., -1]`` are ignored.  ``solve`` accepts right-hand sides
    of shape ``(..., n)`` or ``(..., n, k)``.
    """

    def __init__(self, lower, diag, upper):
        lower = np.asarray(lower, dtype=float)
        diag = np.asarray(diag, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = diag.shape[-1]
        denom = np.empty_like(diag)
        cprime = np.zeros_like(diag)
        denom[..., 0] = diag[..., 0]
        for i in range(1, n):
            cprime[..., i - 1] = upper[..., i - 1] / denom[..., i - 1]
            denom[..., i] = diag[..., i] - lower[..., i] * cprime[..., i - 1]
        if np.any(denom == 0) or not np.all(np.isfinite(denom)):
            raise np.linalg.LinAlgError("singular tridiagonal system")
        self.lower = lower
        self.denom = denom
        self.cprime = cprime
        self.n = n

    def __getitem__(self, index):
        sub = TridiagonalFactor.__new__(TridiagonalFactor)
        sub.lower = self.lower[index]
        sub.denom = self.denom[index]
        sub.cprime = self.cprime[index]
        sub.n = self.n
        return sub

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        lower, denom, cprime = self.lower, self.denom, self.cprime
        cols = rhs.ndim == denom.ndim + 1
        if cols:
            rhs = np.swapaxes(rhs, -1, -2)
            lower, denom, cprime = lower[..., None, :], denom[..., None, :], cprime[..., None, :]
        out = np.empty(np.broadcast_shapes(rhs.shape, denom.shape))
        prev = out[..., 0] = rhs[..., 0] / denom[..., 0]
        for i in range(1, self.n):
            prev = out[..., i] = (rhs[..., i] - lower[..., i] * prev) / denom[..., i]
        nxt = out[..., -1]
        for i in range(self.n - 2, -1, -1):
            nxt = out[..., i] = out[..., i] - cprime[..., i] * nxt
        return np.swapaxes(out, -1, -2) if cols else out


@dataclass(frozen=True)
class DiffusionOperator:
    """Tridiagonal Neumann diffusion matrix ``A_h`` at a fixed age."""

    age: float
    lower: np.ndarray  # lower[i] couples w_{i-1} into row i; lower[0] == 0
    upper: np.ndarray  # upper[i] couples w_{i+1} into row i; upper[-1] == 0
    face_coefficients: np.ndarray

    @property
    def diag(self):
        return -(self.lower + self.upper)

    def matrix(self):
        n = len(self.lower)
        mat = np.diag(self.diag)
        mat[np.arange(1, n), np.arange(n - 1)] = self.lower[1:]
        mat[np.arange(n - 1), np.arange(1, n)] = self.upper[:-1]
        return mat

    def apply(self, w):
        w = np.asarray(w, dtype=float)
        out = self.diag * w
        out[..., 1:] += self.lower[1:] * w[..., :-1]
        out[..., :-1] += self.upper[:-1] * w[..., 1:]
        return out


def _stencil(d_faces, dx):
    """Lower/upper stencil coefficients from face samples, shape (..., n-1)."""
    d_faces = np.asarray(d_faces, dtype=float)
    shape = d_faces.shape[:-1] + (d_faces.shape[-1] + 1,)
    lower = np.zeros(shape)
    upper = np.zeros(shape)
    lower[..., 1:] = d_faces / dx**2
    upper[..., :-1] = d_faces / dx**2
    return lower, upper


def _face_samples(spec, ages, grid):
    ages = np.atleast_1d(np.asarray(ages, dtype=float))
    d = np.broadcast_to(
        spec.diffusion(0.0, ages[:, None], grid.faces[None, :]),
        (len(ages), grid.n_space - 1),
    )
    if np.any(d <= 0):
        j, i = np.argwhere(d <= 0)[0]
        raise ValueError(
            f"non-positive diffusion {d[j, i]:g} at a={ages[j]:g}, x={grid.faces[i]:g}"
        )
    return np.array(d, dtype=float)


def assemble(spec, a, grid):
    d = _face_samples(spec, a, grid)[0]
    lower, upper = _stencil(d, grid.delta_x)
    return DiffusionOperator(float(a), lower, upper, d)


def implicit_factor(spec, ages, h, grid):
    """Factorise ``I - h A_h(a)`` for every age in ``ages`` (batched)."""
    d = _face_samples(spec, ages, grid)
    lower, upper = _stencil(d, grid.delta_x)
    return TridiagonalFactor(-h * lower, 1.0 + h * (lower + upper), -h * upper)


@dataclass(frozen=True)
class EvolutionStepPlan:
    """Substeps per age cell and the exponential shift ``gamma``."""

    substeps: int = 1
    gamma: float = 0.0

    def __post_init__(self):
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be a positive integer")


def _aligned_index(a, h):
    k = round(a / h)
    return k if abs(k * h - a) <= 1e-9 * max(h, abs(a)) else None


def substep_partition(a_from, a_to, plan, grid):
    """Midpoint ages and length of the backward-Euler substeps.

    Substep boundaries sit on the global lattice ``k * delta_a / substeps``
    whenever both ends lie on it, so that adjacent intervals share factors.
    """
    h = grid.delta_a / plan.substeps
    length = a_to - a_from
    if length <= 0:
        return np.empty(0), 0.0
    k0, k1 = _aligned_index(a_from, h), _aligned_index(a_to, h)
    if k0 is not None and k1 is not None and k1 > k0:
        return (np.arange(k0, k1) + 0.5) * h, h
    count = max(1, math.ceil(length / h - 1e-9))
    step = length / count
    return a_from + (np.arange(count) + 0.5) * step, step


def evolve(w, a_from, a_to, plan, spec, grid):
    """Approximate ``exp(-gamma (a_to - a_from)) Pi(a_to, a_from) w``.

    ``w`` may carry leading batch dimensions; the last axis is space.
    """
    if a_from > a_to:
        raise ValueError("need a_from <= a_to")
    if a_from < -1e-12 or a_to > grid.a_max * (1 + 1e-12):
        raise ValueError("ages outside [0, a_max]")
    w = np.array(w, dtype=float)
    mids, h = substep_partition(a_from, a_to, plan, grid)
    if len(mids):
        factors = implicit_factor(spec, mids, h, grid)
        for k in range(len(mids)):
            w = factors[k].solve(w)
    if plan.gamma:
        w = w * math.exp(-plan.gamma * (a_to - a_from))
    return w


def compose_check(w, a_s, a_sigma, a_t, plan, spec, grid):
    """Max-norm defect of ``Pi(t,s) w`` against ``Pi(t,sigma) Pi(sigma,s) w``."""
    if not a_s <= a_sigma <= a_t:
        raise ValueError("need a_s <= a_sigma <= a_t")
    h = grid.delta_a / plan.substeps
    if any(_aligned_index(v, h) is None for v in (a_s, a_sigma, a_t)):
        raise ValueError("split point is not on a substep boundary")
    direct = evolve(w, a_s, a_t, plan, spec, grid)
    split = evolve(evolve(w, a_s, a_sigma, plan, spec, grid), a_sigma, a_t, plan, spec, grid)
    return float(np.max(np.abs(direct - split), initial=0.0))
