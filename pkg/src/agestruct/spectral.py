"""Linearised generator, spectral bounds and net-reproduction operators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .diffusion import _face_samples, _stencil
from .linear import BoundaryOperator, LinearStepper, _steps
from .model import norm_e0, weighted_age_integral
from .transport import scheme_for


class ConvergenceError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class BracketError(ValueError):
    pass


class XDependenceError(ValueError):
    pass


# --------------------------------------------------------------------------
# Linearised generator


@dataclass(frozen=True)
class LinearizedGenerator:
    """Sparse upwind discretisation of the linearisation at ``phi``.

    State index of ``(a_j, x_i)`` is ``j * n_space + i``.  Row block ``j = 0``
    relaxes the newborn row towards the linearised birth law at rate
    ``1 / delta_a``.
    """

    matrix: sp.csr_matrix
    phi: np.ndarray
    grid: object

    @property
    def size(self):
        return self.matrix.shape[0]

    def __matmul__(self, v):
        v = np.asarray(v)
        if v.shape == self.grid.shape:
            return (self.matrix @ v.ravel()).reshape(self.grid.shape)
        return self.matrix @ v


def assemble_generator(phi, spec, grid):
    phi = np.array(grid.check(phi, "equilibrium"), dtype=float)
    n, ns = grid.n_age, grid.n_space
    N = (n + 1) * ns
    dt = grid.delta_a
    q = grid.age_weights
    phibar = weighted_age_integral(phi, spec, grid)
    idx = np.arange(N).reshape(n + 1, ns)
    rows, cols, vals = [], [], []

    def put(r, c, v):
        r, c, v = np.broadcast_arrays(r, c, v)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.asarray(v, dtype=float).ravel())

    body = idx[1:]
    # age transport, first-order upwind
    put(body, body, -1.0 / dt)
    put(body, idx[:-1], 1.0 / dt)
    # diffusion at the row's own age
    lower, upper = _stencil(_face_samples(spec, grid.ages[1:], grid), grid.delta_x)
    put(body, body, -(lower + upper))
    put(body[:, 1:], body[:, :-1], lower[:, 1:])
    put(body[:, :-1], body[:, 1:], upper[:, :-1])
    # frozen death
    put(body, body, -spec.death_on(phibar, grid)[1:])
    nu = spec.weight_on(grid)
    if spec.death_depends_on_z:
        coef = spec.death_dz_on(phibar, grid)[1:] * phi[1:]  # (n, ns)
        # row (j, i) couples to (k, i) with weight -coef[j, i] * q_k nu[k, i]
        put(body[:, None, :], idx[None, :, :], -coef[:, None, :] * (q[:, None] * nu)[None])
    # newborn row
    op = BoundaryOperator.at(phi, spec, grid)
    kernel = q[:, None] * (op.birth + op.correction[None, :] * nu)  # (n+1, ns)
    put(idx[0][None, :], idx, kernel / dt)
    put(idx[0], idx[0], -1.0 / dt)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N),
    ).tocsr()
    mat.sum_duplicates()
    return LinearizedGenerator(mat, phi, grid)


def _as_matrix(L):
    return L.matrix if isinstance(L, LinearizedGenerator) else L


def spectral_bound(L, dense_threshold=4000):
    """Largest real part over the spectrum and an attaining eigenvector.

    Dense ``eig`` up to ``dense_threshold`` unknowns; beyond that ARPACK in
    shift-invert mode around a Gershgorin bound, then around the first
    estimate.
    """
    mat = _as_matrix(L)
    N = mat.shape[0]
    if N <= dense_threshold:
        dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
        vals, vecs = np.linalg.eig(dense)
        k = int(np.argmax(vals.real))
        return float(vals[k].real), _realify(vecs[:, k], vals[k])
    return _rightmost_sparse(sp.csc_matrix(mat))


def _realify(vec, val):
    if abs(val.imag) <= 1e-12 * max(1.0, abs(val.real)):
        vec = vec.real
        k = np.argmax(np.abs(vec))
        return vec / (np.sign(vec[k]) * np.linalg.norm(vec))
    return vec / np.linalg.norm(vec)


def _rightmost_sparse(mat, k=10):
    absrow = abs(mat).sum(axis=1).A1
    diag = mat.diagonal()
    sigma = float(np.max(diag + (absrow - np.abs(diag)))) + 1.0
    best = None
    for _ in range(3):
        try:
            vals, vecs = spla.eigs(mat, k=k, sigma=sigma, which="LM", tol=1e-12)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError("shift-invert Arnoldi did not converge") from exc
        j = int(np.argmax(vals.real))
        s0 = float(vals[j].real)
        if best is not None and abs(s0 - best[0]) <= 1e-12 * max(1.0, abs(s0)):
            best = (s0, vals[j], vecs[:, j])
            break
        best = (s0, vals[j], vecs[:, j])
        sigma = s0 + max(1e-2, 0.05 * abs(s0))
    return best[0], _realify(best[2], best[1])


# --------------------------------------------------------------------------
# Growth bound from the propagated linearisation


@dataclass
class GrowthEstimate:
    omega: float
    iterate: np.ndarray
    converged: bool
    history: list = field(default_factory=list)


def growth_bound_via_propagation(phi, spec, grid, T=None, iters=60, tol=1e-8,
                                 block=4):
    """``log(rho(T_phi(T))) / T`` by subspace iteration on the propagator.

    A block of ``block`` vectors is propagated and re-orthonormalised each
    round; the spectral radius estimate is the largest Ritz value modulus,
    which also settles for a dominant complex pair.
    """
    T = grid.a_max if T is None else T
    steps = _steps(T, grid)
    if T < grid.a_max * (1 - 1e-12):
        raise ValueError("T must cover at least one maximal age")
    stepper = LinearStepper(phi, spec, grid)
    N = (grid.n_age + 1) * grid.n_space
    block = min(block, N)
    rng = np.random.default_rng(0)
    V = np.empty((N, block))
    V[:, 0] = 1.0
    V[:, 1:] = rng.uniform(0.0, 1.0, size=(N, block - 1))
    V, _ = np.linalg.qr(V)

    def apply(V):
        out = np.empty_like(V)
        for k in range(V.shape[1]):
            w = V[:, k].reshape(grid.shape)
            for _ in range(steps):
                w = stepper(w)
            out[:, k] = w.ravel()
        return out

    history = []
    omega = None
    for _ in range(iters):
        W = apply(V)
        ritz = np.linalg.eigvals(V.T @ W)
        rho = float(np.max(np.abs(ritz)))
        if not rho > 1e-300 or not np.any(W):
            return GrowthEstimate(-math.inf, W[:, 0].reshape(grid.shape), True,
                                  history + [-math.inf])
        new = math.log(rho) / T
        history.append(new)
        V, _ = np.linalg.qr(W)
        if omega is not None and abs(new - omega) <= tol * max(1.0, abs(new)):
            lead = V[:, 0]
            return GrowthEstimate(new, (lead / np.linalg.norm(lead)).reshape(grid.shape),
                                  True, history)
        omega = new
    raise ConvergenceError(
        f"growth-rate estimates did not settle: last two {history[-2:]}", history
    )


# --------------------------------------------------------------------------
# Net reproduction operators


@lru_cache(maxsize=16)
def _propagated_basis(spec, grid, substeps=1):
    """``Pi_0(a_j, 0)`` applied to the unit basis, shape ``(n+1, ns, ns)``.

    ``Pi_0`` is the diffusion evolution with the death rate at ``z = 0``
    folded in as per-cell survival factors.
    """
    sch = scheme_for(spec, grid, substeps)
    survival = sch.survival_from(spec.death_on(0.0, grid))
    ns = grid.n_space
    out = np.empty((grid.n_age + 1, ns, ns))
    y = np.eye(ns)
    out[0] = y
    for j in range(1, grid.n_age + 1):
        y = survival[j - 1][:, None] * y
        for cell in sch._cells:
            y = cell[j - 1].solve(y)
        out[j] = y
    out.setflags(write=False)
    return out


def _shift_weights(lam, grid):
    with np.errstate(over="ignore"):
        return grid.age_weights * np.exp(-lam * grid.ages)


def q_lambda(lam, spec, grid):
    """Matrix of ``Q_lambda = int b(0, a) Pi_{0,lambda}(a, 0) da``."""
    Y = _propagated_basis(spec, grid)
    birth = spec.birth_on(0.0, grid)
    w = _shift_weights(lam, grid)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.einsum("j,ji,jik->ik", w, birth, Y)


def q_phi_lambda(phi, lam, spec, grid):
    """``Q_{phi,lambda}`` for a model whose death rate ignores ``z``.

    Frozen birth at ``phibar`` plus the rank-structured correction
    ``(sum_s q_s d_z b(phibar, a_s) phi_s) * int nu Pi_lambda(a, 0) da``.
    """
    if spec.death_depends_on_z:
        raise ValueError("Q_{phi,lambda} needs a death rate independent of z")
    phi = grid.check(phi, "equilibrium")
    Y = _propagated_basis(spec, grid)
    op = BoundaryOperator.at(phi, spec, grid)
    w = _shift_weights(lam, grid)
    frozen = np.einsum("j,ji,jik->ik", w, op.birth, Y)
    weighted = np.einsum("j,ji,jik->ik", w, op.weight, Y)
    return frozen + op.correction[:, None] * weighted


def spectral_radius(Q, tol=1e-12, max_iter=10000, allow_signed=False):
    """Spectral radius of an entrywise non-negative matrix.

    Power iteration from the positive constant vector; the ratio of
    successive norms is the estimate.  If an iterate vanishes the matrix is
    nilpotent and the radius is 0.  ``allow_signed`` falls back to a dense
    eigen-solve for matrices with negative entries.
    """
    Q = np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(Q)):
        return math.inf
    scale = np.abs(Q).max(initial=0.0)
    if np.any(Q < -1e-14 * scale):
        if not allow_signed:
            raise ValueError("matrix has negative entries")
        return float(np.max(np.abs(np.linalg.eigvals(Q))))
    x = np.ones(Q.shape[0])
    x /= np.linalg.norm(x)
    history = []
    ratio = None
    for _ in range(max_iter):
        y = Q @ x
        nrm = np.linalg.norm(y)
        if nrm < 1e-300:
            return 0.0
        new = float(nrm)
        history.append(new)
        x = y / nrm
        if ratio is not None and abs(new - ratio) <= tol * max(new, 1e-300):
            return new
        ratio = new
    raise ConvergenceError("power iteration did not converge", history[-10:])


def _x_independent(values, what):
    spread = np.ptp(values, axis=1)
    if np.any(spread > 1e-12 * max(1.0, np.abs(values).max())):
        raise XDependenceError(f"{what} depends on x")
    return values[:, 0]


@dataclass
class R0Result:
    value: float
    exact: float | None

    @property
    def stable(self):
        return self.value < 1


def closed_form_r0(spec, grid):
    """``int b(0,a) exp(-int_0^a m(0,s) ds) da`` for ``x``-independent rates.

    Nested trapezoid quadrature on the age grid; ``exact`` holds the
    elementary value when both rates are constant.
    """
    b = _x_independent(spec.birth_on(0.0, grid), "birth rate")
    m = _x_independent(spec.death_on(0.0, grid), "death rate")
    dt = grid.delta_a
    cum = np.concatenate(([0.0], np.cumsum(0.5 * dt * (m[:-1] + m[1:]))))
    value = float(grid.age_weights @ (b * np.exp(-cum)))
    exact = None
    if np.ptp(b) == 0 and np.ptp(m) == 0:
        b0, m0, a = float(b[0]), float(m[0]), grid.a_max
        exact = b0 * a if m0 == 0 else b0 / m0 * -math.expm1(-m0 * a)
    return R0Result(value, exact)


@dataclass
class Lambda0Result:
    value: float
    bracket: tuple
    iterations: int


def lambda0_bisect(spec, grid, bracket=(-1.0, 1.0), tol=1e-10):
    """The rate with ``r(Q_lambda) == 1``, by bisection.

    The bracket is widened by doubling (up to 60 times per side) until it
    straddles the threshold.
    """
    if not np.any(spec.birth_on(0.0, grid)):
        raise BracketError("r(Q_lambda) vanishes identically (zero birth rate)")

    def r(lam):
        return spectral_radius(q_lambda(lam, spec, grid))

    lo, hi = (float(v) for v in bracket)
    width = max(hi - lo, 1.0)
    for _ in range(60):
        if r(lo) > 1:
            break
        lo -= width
        width *= 2
    else:
        raise BracketError("no lower end with r(Q_lambda) > 1")
    width = max(hi - lo, 1.0)
    for _ in range(60):
        if r(hi) < 1:
            break
        hi += width
        width *= 2
    else:
        raise BracketError("no upper end with r(Q_lambda) < 1")
    found = (lo, hi)
    iterations = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if r(mid) > 1:
            lo = mid
        else:
            hi = mid
        iterations += 1
    return Lambda0Result(0.5 * (lo + hi), found, iterations)


@dataclass
class CriterionResult:
    radius: float
    stable: bool


def nontrivial_criterion(phi, spec, grid):
    """``r(Q_{phi,0})`` and whether it is below one."""
    r = spectral_radius(q_phi_lambda(phi, 0.0, spec, grid), allow_signed=True)
    return CriterionResult(r, r < 1)


# --------------------------------------------------------------------------


def verdict_for(s0, grid):
    margin = 1e-3 / grid.a_max
    if abs(s0) <= margin:
        return "marginal"
    return "stable" if s0 < 0 else "unstable"


@dataclass
class SpectralReport:
    spectral_bound: float
    eigenvector: np.ndarray
    growth_bound_estimate: float | None
    r_Q0: float | None
    lambda0: float | None
    verdict: str
    r_Q_phi0: float | None = None


def spectral_report(phi, spec, grid, T=None, dense_threshold=4000,
                    with_growth=True):
    """Collect the spectral diagnostics of the equilibrium ``phi``."""
    L = assemble_generator(phi, spec, grid)
    s0, vec = spectral_bound(L, dense_threshold)
    omega = None
    if with_growth:
        try:
            omega = growth_bound_via_propagation(phi, spec, grid, T).omega
        except ConvergenceError:
            omega = None
    r_q0 = spectral_radius(q_lambda(0.0, spec, grid))
    try:
        lam0 = lambda0_bisect(spec, grid).value
    except BracketError:
        lam0 = None
    r_phi = None
    if not spec.death_depends_on_z and np.any(np.asarray(phi) != 0):
        r_phi = nontrivial_criterion(phi, spec, grid).radius
    return SpectralReport(s0, vec.reshape(grid.shape), omega, r_q0, lam0,
                          verdict_for(s0, grid), r_phi)
