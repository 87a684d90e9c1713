"""Perturb an equilibrium, simulate, and fit the exponential decay rate."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import norm_e0
from .transport import SimState, step


@dataclass(frozen=True)
class DecayFit:
    omega: float
    r2: float
    window: tuple
    truncated: bool = False


def fit_decay_rate(times, norms, window=None):
    """Least-squares fit of ``log(norm) = c - omega t`` on ``window``.

    A non-positive norm inside the window truncates the fit just before it
    (``truncated`` is set); at least two points must remain.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(norms, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("times and norms must be 1-D of equal length")
    lo, hi = (t[0], t[-1]) if window is None else window
    if lo > hi or lo < t[0] - 1e-12 or hi > t[-1] + 1e-12:
        raise ValueError(f"window {window} outside the data range")
    tol = 1e-9 * max(1.0, abs(hi))
    sel = (t >= lo - tol) & (t <= hi + tol)
    t, y = t[sel], y[sel]
    truncated = False
    bad = np.nonzero(~(y > 0))[0]
    if len(bad):
        t, y = t[: bad[0]], y[: bad[0]]
        truncated = True
    if len(t) < 2:
        raise ValueError("fewer than two positive norms in the fit window")
    logy = np.log(y)
    A = np.vstack([np.ones_like(t), t]).T
    coef, *_ = np.linalg.lstsq(A, logy, rcond=None)
    fitted = A @ coef
    ss_res = float(np.sum((logy - fitted) ** 2))
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(np.sum(logy**2))) else 1.0 - ss_res / ss_tot
    return DecayFit(float(-coef[1]), r2, (float(t[0]), float(t[-1])), truncated)


def worker_count(n_tasks):
    """Threads to use: ``AGESTRUCT_THREADS`` if set, else the CPU count."""
    env = os.environ.get("AGESTRUCT_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ValueError(f"AGESTRUCT_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, n_tasks))


@dataclass
class TrialResult:
    index: int
    eps: float
    times: np.ndarray
    deviations: np.ndarray
    fit: DecayFit | None
    decayed: bool
    monotone: bool
    blowup: float | None = None

    @property
    def omega(self):
        return None if self.fit is None else self.fit.omega

    @property
    def r2(self):
        return None if self.fit is None else self.fit.r2


@dataclass
class StabilityReport:
    phi: np.ndarray
    eps: float
    trials: list
    s0: float
    rate_tol: float
    rate_floor: float
    passed: bool
    growth: bool
    basin: object = None
    notes: list = field(default_factory=list)

    @property
    def verdict(self):
        return "pass" if self.passed else "fail"

    @property
    def rates(self):
        return [t.omega for t in self.trials]


def _perturbation(rng, eps, grid):
    return eps * rng.uniform(-1.0, 1.0, size=grid.shape)


def _run_trial(index, phi, u0, spec, grid, steps, cap, substeps):
    q = spec.norm_q
    dt = grid.delta_t
    state = SimState.initial(u0, spec, grid)
    times = [0.0]
    dev = [norm_e0(state.u - phi, grid, q)]
    blowup = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, steps + 1):
            state = step(state, spec, grid, substeps)
            d = norm_e0(state.u - phi, grid, q)
            if not np.isfinite(d) or norm_e0(state.u, grid, q) > cap:
                blowup = k * dt
                break
            times.append(k * dt)
            dev.append(d)
    return np.array(times), np.array(dev), blowup


def _envelope_decreasing(times, dev, a_max, t_lo):
    """Block maxima over consecutive ``a_max`` windows after ``t_lo`` decrease."""
    blocks = []
    start = t_lo
    while start < times[-1] - 1e-9:
        sel = (times >= start - 1e-9) & (times <= start + a_max + 1e-9)
        blocks.append(dev[sel].max())
        start += a_max
    return all(b2 < b1 for b1, b2 in zip(blocks, blocks[1:]))


def run_trials(phi, spec, grid, eps, trials, T, seed, signed=False, cap=1e8,
               substeps=1):
    """Simulate ``trials`` seeded perturbations of ``phi`` up to time ``T``.

    Returns a list of ``(times, deviations, blowup_time)``.
    """
    phi = np.array(grid.check(phi, "equilibrium"), dtype=float)
    steps = round(T / grid.delta_t)
    children = np.random.SeedSequence(seed).spawn(trials)
    starts = []
    for child in children:
        u0 = phi + _perturbation(np.random.default_rng(child), eps, grid)
        if not signed:
            u0 = np.maximum(u0, 0.0)
        starts.append(u0)

    def go(i):
        return _run_trial(i, phi, starts[i], spec, grid, steps, cap, substeps)

    workers = worker_count(trials)
    if workers == 1:
        return [go(i) for i in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(go, range(trials)))


def verify_stability(equilibrium, spec, grid, eps=1e-3, trials=5, T=None, seed=0,
                     s0=None, rate_tol=0.15, rate_floor=None, signed=False,
                     cap=1e8, substeps=1):
    """Compare fitted decay rates of perturbed runs with ``-s0``.

    ``equilibrium`` is an :class:`EquilibriumResult` or a plain field.
    The fit window is ``[a_max, T]``.  The report passes when every trial
    decays with a decreasing envelope and its rate is within
    ``rate_tol * max(|s0|, rate_floor)`` of ``-s0``.
    """
    phi = getattr(equilibrium, "values", equilibrium)
    if getattr(equilibrium, "converged", True) is False:
        raise ValueError("equilibrium did not converge")
    phi = np.asarray(phi, dtype=float)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    a_max = grid.a_max
    T = 5 * a_max if T is None else T
    if T < 3 * a_max * (1 - 1e-12):
        raise ValueError("T must be at least 3 * a_max")
    if rate_floor is None:
        rate_floor = 0.01 / a_max
    if s0 is None:
        from .spectral import assemble_generator, spectral_bound

        s0, _ = spectral_bound(assemble_generator(phi, spec, grid))
    runs = run_trials(phi, spec, grid, eps, trials, T, seed, signed, cap, substeps)
    results = []
    growth = False
    notes = []
    allowed = rate_tol * max(abs(s0), rate_floor)
    passed = True
    for i, (times, dev, blowup) in enumerate(runs):
        if blowup is not None:
            growth = True
            passed = False
            results.append(TrialResult(i, eps, times, dev, None, False, False, blowup))
            continue
        if dev.max() <= 1e-12:
            results.append(TrialResult(i, eps, times, dev, None, True, True))
            continue
        fit = fit_decay_rate(times, dev, (a_max, times[-1]))
        monotone = _envelope_decreasing(times, dev, a_max, a_max)
        decayed = dev[-1] < dev[0] and fit.omega > 0
        if fit.omega < 0:
            growth = True
        ok = decayed and monotone and abs(fit.omega + s0) <= allowed
        if not ok:
            passed = False
        results.append(TrialResult(i, eps, times, dev, fit, decayed, monotone))
    if growth:
        notes.append("perturbations grow")
    return StabilityReport(phi, float(eps), results, float(s0), rate_tol,
                           rate_floor, passed, growth, None, notes)


@dataclass
class BasinReport:
    largest: float | None
    eps: list
    decayed: list
    ratios: list


def basin_probe(equilibrium, spec, grid, eps_list, T=None, seed=0, cap=1e8):
    """Largest ``eps`` (in an increasing list) whose perturbation decays.

    A trial decays when ``norm_e0(u(T) - phi)`` is below half its initial
    value.  The report is monotone: the first failure ends the prefix of
    decaying sizes.  ``largest`` is None when nothing decays.
    """
    phi = np.asarray(getattr(equilibrium, "values", equilibrium), dtype=float)
    eps_list = [float(e) for e in eps_list]
    if any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be increasing")
    T = 5 * grid.a_max if T is None else T
    decayed, ratios = [], []
    for k, eps in enumerate(eps_list):
        (times, dev, blowup), = run_trials(phi, spec, grid, eps, 1, T,
                                           [seed, k], cap=cap)
        if blowup is not None or not dev[0] > 0:
            ratio = math.inf if blowup is not None else 0.0
        else:
            ratio = float(dev[-1] / dev[0])
        ratios.append(ratio)
        decayed.append(blowup is None and ratio <= 0.5)
    largest = None
    for eps, ok in zip(eps_list, decayed):
        if not ok:
            break
        largest = eps
    return BasinReport(largest, eps_list, decayed, ratios)
