"""Independent reference implementations used by several test modules."""

import math

import numpy as np


def trapezoid_weights(a_max, n):
    h = a_max / n
    q = [h] * (n + 1)
    q[0] = q[-1] = h / 2
    return np.array(q)


def scalar_renewal(u0, death, birth, weight, a_max, n, steps):
    """Age-only renewal stepper for x-independent rates.

    ``death(z, a)``, ``birth(z, a)``, ``weight(a)`` are plain callables.
    Each step moves a cohort one age cell along its characteristic with the
    cell-averaged survival exponential, then solves the renewal row with its
    own trapezoid weight handled implicitly, refreshing the population once.
    Returns the list of age profiles (initial one included).
    """
    h = a_max / n
    ages = [j * h for j in range(n + 1)]
    q = trapezoid_weights(a_max, n)
    nu = [weight(a) for a in ages]
    u = [float(v) for v in u0]
    out = [np.array(u)]
    for _ in range(steps):
        z = sum(q[j] * nu[j] * u[j] for j in range(n + 1))
        new = [0.0] * (n + 1)
        for j in range(1, n + 1):
            m = 0.5 * (death(z, ages[j - 1]) + death(z, ages[j]))
            new[j] = math.exp(-h * m) * u[j - 1]
        partial = sum(q[j] * nu[j] * new[j] for j in range(1, n + 1))
        zz = partial
        for _ in range(2):
            b = [birth(zz, a) for a in ages]
            births = sum(q[j] * b[j] * new[j] for j in range(1, n + 1)) / (1 - q[0] * b[0])
            zz = partial + q[0] * nu[0] * births
        new[0] = births
        u = new
        out.append(np.array(u))
    return out
