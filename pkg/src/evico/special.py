"""Digamma, trigamma and log-gamma for positive float64 arrays.

Arguments below ``_SHIFT_TO`` are pushed upward with the functional
recurrences, then an asymptotic series finishes the job.  Truncation error
of every series is below 1e-12 at the shift threshold.
"""
import math

import numpy as np

from .errors import DomainError

_SHIFT_TO = 6.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_2n / (2n), B_2n, B_2n / (2n (2n - 1)) for n = 1..7
_DIGAMMA_COEF = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132,
                 -691.0 / 32760, 1.0 / 12)
_TRIGAMMA_COEF = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66,
                  -691.0 / 2730, 7.0 / 6)
_LGAMMA_COEF = (1.0 / 12, -1.0 / 360, 1.0 / 1260, -1.0 / 1680, 1.0 / 1188,
                -691.0 / 360360, 1.0 / 156)


def _check_positive(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(x > 0):
        raise DomainError(f"{name} requires strictly positive finite input")
    return x


def _horner(coef, z):
    out = np.zeros_like(z)
    for c in reversed(coef):
        out = out * z + c
    return out


def _shift(x):
    """Offsets ``x + k`` for k = 0..5 below the threshold, and the shifted argument.

    Every positive x needs at most 6 unit steps to reach 6, so all shifts
    are done in one broadcast instead of a loop.
    """
    steps = x[..., None] + np.arange(int(_SHIFT_TO))
    below = steps < _SHIFT_TO
    return steps, below, x + below.sum(axis=-1)


def digamma(x):
    x = _check_positive(x, "digamma")
    steps, below, x = _shift(x)
    acc = -np.where(below, 1.0 / steps, 0.0).sum(axis=-1)
    inv2 = 1.0 / (x * x)
    # psi(x) = ln x - 1/(2x) - sum_n B_2n / (2n x^2n)
    series = inv2 * _horner(_DIGAMMA_COEF, inv2)
    return acc + np.log(x) - 0.5 / x - series


def trigamma(x):
    x = _check_positive(x, "trigamma")
    steps, below, x = _shift(x)
    acc = np.where(below, 1.0 / (steps * steps), 0.0).sum(axis=-1)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * inv2 * _horner(_TRIGAMMA_COEF, inv2)
    return acc + inv + 0.5 * inv2 + series


def lgamma(x):
    x = _check_positive(x, "lgamma")
    steps, below, x = _shift(x)
    log_prod = np.where(below, np.log(np.where(below, steps, 1.0)), 0.0).sum(axis=-1)
    inv = 1.0 / x
    series = inv * _horner(_LGAMMA_COEF, inv * inv)
    return (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + series - log_prod
