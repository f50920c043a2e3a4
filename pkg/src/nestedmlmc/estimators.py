"""Payoffs, inner Monte Carlo estimates and MLMC level couplings."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import EmptySampleSet, IncompatibleLevelSizes
from .problem import NestedProblem
from .rng import as_generator


def heaviside(x):
    """Step function with ``H(0) = 1``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("heaviside: non-finite input")
    out = (x >= 0).astype(float)
    return out if out.ndim else float(out)


def positive_part(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("positive_part: non-finite input")
    out = np.maximum(x, 0.0)
    return out if out.ndim else float(out)


class Payoff(Enum):
    HEAVISIDE = "step"
    POSITIVE_PART = "max"

    def __call__(self, x):
        if self is Payoff.HEAVISIDE:
            return heaviside(x)
        return positive_part(x)


class Coupling(Enum):
    INDEPENDENT = "indep"
    ANTITHETIC = "anti"


@dataclass(frozen=True)
class InnerEstimate:
    mean: float
    var_biased: float
    n: int

    @property
    def d_hat(self) -> float:
        return abs(self.mean)


def inner_estimate(samples) -> InnerEstimate:
    """Sample mean and divisor-``N`` variance of a set of inner draws."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySampleSet("inner_estimate needs at least one sample")
    mean = x.mean()
    return InnerEstimate(float(mean), float(np.mean((x - mean) ** 2)), int(x.size))


@dataclass(frozen=True)
class LevelDiffSample:
    fine: float
    coarse: float
    diff: float
    inner_work: int


def _check_counts(n_fine, n_coarse):
    if np.any(n_fine < 1):
        raise ValueError("n_fine must be >= 1")
    if np.any(n_coarse < 0):
        raise ValueError("n_coarse must be >= 0")


def level_diffs(y, n_fine, n_coarse, payoff: Payoff, problem: NestedProblem,
                rng, coupling: Coupling = Coupling.ANTITHETIC):
    """Vectorised level-difference samples for a batch of outer scenarios.

    ``n_fine`` and ``n_coarse`` are per-scenario inner sample counts (scalars
    broadcast); ``n_coarse == 0`` marks a level whose coarse term is 0.

    Independent coupling estimates the fine and coarse inner means from
    disjoint fresh draws. Antithetic coupling draws ``max(n_fine, n_coarse)``
    samples once, in blocks of ``min(n_fine, n_coarse)``; the fine and coarse
    values average the payoff over consecutive blocks of their own size.

    Returns ``(fine, coarse, inner_work)`` arrays.
    """
    rng = as_generator(rng)
    y = np.asarray(y)
    m = len(y)
    n_fine = np.broadcast_to(np.asarray(n_fine, dtype=np.int64), (m,))
    n_coarse = np.broadcast_to(np.asarray(n_coarse, dtype=np.int64), (m,))
    _check_counts(n_fine, n_coarse)
    fine = np.empty(m)
    coarse = np.zeros(m)
    work = np.empty(m, dtype=np.int64)
    if m == 0:
        return fine, coarse, work

    pairs, inverse = np.unique(np.stack([n_fine, n_coarse], axis=1), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for g, (nf, nc) in enumerate(pairs.tolist()):
        idx = np.flatnonzero(inverse == g)
        yg = y[idx]
        if coupling is Coupling.INDEPENDENT or nc == 0:
            fine[idx] = payoff(problem.inner_mean(yg, nf, rng))
            if nc > 0:
                coarse[idx] = payoff(problem.inner_mean(yg, nc, rng))
            work[idx] = nf + nc
            continue
        big, small = max(nf, nc), min(nf, nc)
        if big % small:
            raise IncompatibleLevelSizes(f"{nf} and {nc}: neither divides the other")
        k = big // small
        block = problem.inner_mean(np.repeat(yg, k, axis=0), small, rng).reshape(len(idx), k)
        fine[idx] = _block_payoff(block, nf // small, k, payoff)
        coarse[idx] = _block_payoff(block, nc // small, k, payoff)
        work[idx] = big
    return fine, coarse, work


def _block_payoff(block_means, per_block, group, payoff):
    # Merge ``per_block`` consecutive base blocks, apply the payoff, then
    # average over the ``group`` base blocks of the larger size first. Both
    # sides of a level reduce in the same order, so when the payoff is linear
    # on every block the two values agree bit for bit.
    rows, k = block_means.shape
    merged = block_means.reshape(rows, k // per_block, per_block).mean(axis=2)
    vals = payoff(merged).reshape(rows, k // group, group // per_block)
    return vals.mean(axis=2).mean(axis=1)


def _single(y, n_fine, n_coarse, payoff, problem, rng, coupling):
    f, c, w = level_diffs(np.asarray(y)[None], n_fine, n_coarse, payoff, problem, rng, coupling)
    return LevelDiffSample(float(f[0]), float(c[0]), float(f[0] - c[0]), int(w[0]))


def level_diff_independent(y, n_fine: int, n_coarse: int, payoff: Payoff,
                           problem: NestedProblem, rng) -> LevelDiffSample:
    return _single(y, n_fine, n_coarse, payoff, problem, rng, Coupling.INDEPENDENT)


def level_diff_antithetic(y, n_fine: int, n_coarse: int, payoff: Payoff,
                          problem: NestedProblem, rng) -> LevelDiffSample:
    return _single(y, n_fine, n_coarse, payoff, problem, rng, Coupling.ANTITHETIC)


def nested_mc_estimate(M: int, N: int, payoff: Payoff, problem: NestedProblem,
                       rng, batch: int = 1 << 16):
    """Plain nested Monte Carlo: ``M`` outer scenarios, ``N`` inner draws each.

    Returns ``(estimate, stderr)``.
    """
    if M < 1 or N < 1:
        raise ValueError("M and N must be >= 1")
    rng = as_generator(rng)
    total = 0.0
    total_sq = 0.0
    for start in range(0, M, batch):
        m = min(batch, M - start)
        y = problem.sample_outer(m, rng)
        v = payoff(problem.inner_mean(y, N, rng))
        total += v.sum()
        total_sq += (v * v).sum()
    mean = total / M
    if M == 1:
        return float(mean), float("nan")
    var = max(total_sq - M * mean * mean, 0.0) / (M - 1)
    return float(mean), float(np.sqrt(var / M))
