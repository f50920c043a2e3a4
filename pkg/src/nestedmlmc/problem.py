"""Nested sampling problems.

A problem supplies outer scenarios ``y`` and conditional inner draws of
``X | Y = y``. Everything above this layer only ever asks for the sample mean
and (biased) sample variance of ``n`` fresh inner draws per scenario, through
:meth:`NestedProblem.inner_stats` and :meth:`NestedProblem.inner_mean`. The
default implementations draw the samples in bounded-memory chunks; problems
that know the exact joint law of those statistics may override them.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np
from scipy.special import ndtr

# Upper bound on inner draws held in memory at once by the chunked paths.
DRAW_BUDGET = 1 << 21


def _row_batches(m: int, width: int):
    rows = max(1, DRAW_BUDGET // max(width, 1))
    for start in range(0, m, rows):
        yield slice(start, min(m, start + rows))


class NestedProblem(ABC):
    """Sampler for the nested expectation ``E[phi(E[X | Y])]``."""

    @abstractmethod
    def sample_outer(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``m`` outer scenarios; the first axis indexes scenarios."""

    @abstractmethod
    def sample_inner(self, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one ``X`` for each row of ``y``, independently."""

    def inner_stats(self, y, n: int, rng: np.random.Generator):
        """Mean and biased variance (divisor ``n``) of ``n`` fresh inner draws per row.

        Chunks are combined with the pairwise update of Chan et al., so memory
        stays bounded by ``DRAW_BUDGET`` draws regardless of ``n``.
        """
        y = np.asarray(y)
        m = len(y)
        mean = np.zeros(m)
        m2 = np.zeros(m)
        if m == 0:
            return mean, m2
        width = min(n, DRAW_BUDGET)
        for rows in _row_batches(m, width):
            yb = y[rows]
            k = len(yb)
            mu = np.zeros(k)
            acc = np.zeros(k)
            seen = 0
            for start in range(0, n, width):
                w = min(width, n - start)
                x = self.sample_inner(np.repeat(yb, w, axis=0), rng).reshape(k, w)
                cmu = x.mean(axis=1)
                cm2 = ((x - cmu[:, None]) ** 2).sum(axis=1)
                total = seen + w
                delta = cmu - mu
                mu = mu + delta * (w / total)
                acc = acc + cm2 + delta**2 * (seen * w / total)
                seen = total
            mean[rows] = mu
            m2[rows] = acc
        return mean, m2 / n

    def inner_mean(self, y, n: int, rng: np.random.Generator) -> np.ndarray:
        """Sample mean of ``n`` fresh inner draws per row."""
        return self.inner_stats(y, n, rng)[0]

    # Optional analytic hooks, used by tests and diagnostics only.
    def conditional_mean(self, y) -> np.ndarray:
        raise NotImplementedError

    def conditional_std(self, y) -> np.ndarray:
        raise NotImplementedError


class ShiftedProblem(NestedProblem):
    """``X - shift`` in place of ``X``; used to move a threshold to zero."""

    def __init__(self, base: NestedProblem, shift: float):
        self.base = base
        self.shift = float(shift)

    def sample_outer(self, m, rng):
        return self.base.sample_outer(m, rng)

    def sample_inner(self, y, rng):
        return self.base.sample_inner(y, rng) - self.shift

    def inner_stats(self, y, n, rng):
        mean, var = self.base.inner_stats(y, n, rng)
        return mean - self.shift, var

    def inner_mean(self, y, n, rng):
        return self.base.inner_mean(y, n, rng) - self.shift

    def conditional_mean(self, y):
        return self.base.conditional_mean(y) - self.shift

    def conditional_std(self, y):
        return self.base.conditional_std(y)


class CountingProblem(NestedProblem):
    """Wraps a problem and counts every inner and outer draw requested."""

    def __init__(self, base: NestedProblem):
        self.base = base
        self.inner_draws = 0
        self.outer_draws = 0

    def sample_outer(self, m, rng):
        self.outer_draws += m
        return self.base.sample_outer(m, rng)

    def sample_inner(self, y, rng):
        self.inner_draws += len(y)
        return self.base.sample_inner(y, rng)

    def inner_stats(self, y, n, rng):
        self.inner_draws += len(y) * n
        return self.base.inner_stats(y, n, rng)

    def inner_mean(self, y, n, rng):
        self.inner_draws += len(y) * n
        return self.base.inner_mean(y, n, rng)

    def conditional_mean(self, y):
        return self.base.conditional_mean(y)

    def conditional_std(self, y):
        return self.base.conditional_std(y)


class ConstantProblem(NestedProblem):
    """Degenerate inner law: ``X | Y = c`` for every scenario."""

    def __init__(self, value: float):
        self.value = float(value)

    def sample_outer(self, m, rng):
        return rng.standard_normal(m)

    def sample_inner(self, y, rng):
        return np.full(len(y), self.value)

    def inner_stats(self, y, n, rng):
        m = len(y)
        return np.full(m, self.value), np.zeros(m)

    def conditional_mean(self, y):
        return np.full(len(y), self.value)

    def conditional_std(self, y):
        return np.zeros(len(y))


class GaussianProblem(NestedProblem):
    """``Y ~ N(loc, scale^2)`` and ``X | Y ~ N(Y, inner_sd^2)``.

    With ``scale=0`` every scenario sits at ``loc``, which gives fixed-``delta``
    test cases. ``P(E[X|Y] >= 0) = Phi(loc / scale)``.
    """

    def __init__(self, loc=0.0, scale=1.0, inner_sd=1.0, exact=True):
        self.loc = float(loc)
        self.scale = float(scale)
        self.inner_sd = float(inner_sd)
        self.exact = exact

    def sample_outer(self, m, rng):
        return self.loc + self.scale * rng.standard_normal(m)

    def sample_inner(self, y, rng):
        return y + self.inner_sd * rng.standard_normal(len(y))

    def inner_stats(self, y, n, rng):
        if not self.exact:
            return super().inner_stats(y, n, rng)
        y = np.asarray(y, dtype=float)
        mean = y + self.inner_sd * rng.standard_normal(len(y)) / np.sqrt(n)
        var = self.inner_sd**2 * rng.chisquare(n - 1, len(y)) / n if n > 1 else np.zeros(len(y))
        return mean, var

    def inner_mean(self, y, n, rng):
        if not self.exact:
            return super().inner_mean(y, n, rng)
        y = np.asarray(y, dtype=float)
        return y + self.inner_sd * rng.standard_normal(len(y)) / np.sqrt(n)

    def conditional_mean(self, y):
        return np.asarray(y, dtype=float)

    def conditional_std(self, y):
        return np.full(len(y), self.inner_sd)

    def probability(self) -> float:
        if self.scale == 0:
            return 1.0 if self.loc >= 0 else 0.0
        return float(ndtr(self.loc / self.scale))
