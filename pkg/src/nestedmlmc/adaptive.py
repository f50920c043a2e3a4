"""Adaptive choice of the inner sample count per outer scenario.

Scenarios whose conditional mean sits far from the payoff's kink, measured in
conditional standard deviations (``delta = d / sigma``), need few inner
samples; those close to it get up to ``N0 * 4^level``. The count is found by
repeated doubling with fresh pilot draws at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import NestedProblem
from .rng import as_generator


@dataclass(frozen=True)
class AdaptiveConfig:
    """``n0`` base count, ``confidence`` the constant C, ``r`` the adaptivity exponent.

    The theory needs ``1 < r < 2 - (sqrt(4q + 1) - 1) / q`` where ``q`` bounds
    the normalised inner moments; only ``1 < r < 2`` is enforced here.
    """

    n0: int = 32
    confidence: float = 3.0
    r: float = 1.5

    def __post_init__(self):
        if int(self.n0) != self.n0 or self.n0 < 2:
            raise ValueError(f"n0 must be an integer >= 2, got {self.n0}")
        if not self.confidence >= 1.0:
            raise ValueError(f"confidence must be >= 1, got {self.confidence}")
        if not 1.0 < self.r < 2.0:
            raise ValueError(f"r must lie in (1, 2), got {self.r}")


@dataclass(frozen=True)
class AdaptiveOutcome:
    n_final: int
    pilot_work: int
    d_hat: float
    sigma_hat: float
    capped: bool


def target_samples(level, delta, cfg: AdaptiveConfig):
    """Ideal inner count for distance ratio ``delta``, in ``[N0 2^l, N0 4^l]``.

    ``delta = inf`` (zero variance) gives the lower end, ``delta = 0`` the upper.
    """
    level = np.asarray(level)
    if np.any(level < 0):
        raise ValueError("level must be >= 0")
    delta = np.asarray(delta, dtype=float)
    scale = 2.0**level
    nu = np.sqrt(cfg.n0) * scale * delta / cfg.confidence
    with np.errstate(divide="ignore", over="ignore"):
        shrink = np.minimum(1.0, nu ** (-cfg.r))
    out = cfg.n0 * scale * scale * np.maximum(1.0 / scale, shrink)
    return out if out.ndim else float(out)


def determine_inner_samples_batch(level: int, y, cfg: AdaptiveConfig,
                                  problem: NestedProblem, rng):
    """Run the doubling selector for every row of ``y`` in lockstep.

    Returns ``(n_final, pilot_work, d_hat, sigma_hat, capped)`` arrays.
    ``d_hat``/``sigma_hat`` are the last estimates made, NaN where the cap
    fired before any pilot draw.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    rng = as_generator(rng)
    y = np.asarray(y)
    m = len(y)
    cap = cfg.n0 * 4**level
    n = cfg.n0 * 2**level
    n_final = np.full(m, cap, dtype=np.int64)
    pilot = np.zeros(m, dtype=np.int64)
    d_hat = np.full(m, np.nan)
    sigma_hat = np.full(m, np.nan)
    capped = np.zeros(m, dtype=bool)
    active = np.arange(m)
    while active.size:
        if 2 * n >= cap:
            capped[active] = True
            break
        mean, var = problem.inner_stats(y[active], n, rng)
        pilot[active] += n
        d = np.abs(mean)
        s = np.sqrt(var)
        d_hat[active] = d
        sigma_hat[active] = s
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.where(s > 0, d / s, np.inf)
        done = n >= target_samples(level, delta, cfg)
        n_final[active[done]] = n
        active = active[~done]
        n *= 2
    return n_final, pilot, d_hat, sigma_hat, capped


def determine_inner_samples(level: int, y, cfg: AdaptiveConfig, problem: NestedProblem,
                            rng) -> AdaptiveOutcome:
    """Single-scenario form of :func:`determine_inner_samples_batch`."""
    n, w, d, s, c = determine_inner_samples_batch(level, np.asarray(y)[None], cfg, problem, rng)
    return AdaptiveOutcome(int(n[0]), int(w[0]), float(d[0]), float(s[0]), bool(c[0]))
