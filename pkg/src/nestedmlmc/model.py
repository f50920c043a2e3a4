"""Delta-hedged single option with a quadratic payoff.

Outer scenario ``y ~ N(0, 1)``. Given ``y``, one inner loss draw is

    X = tau * (y^2 - Yt^2) + 2 sqrt(tau (1 - tau)) * y * Z - l_eta

with fresh standard normals ``Yt, Z``. Its conditional mean is
``tau (y^2 - 1) - l_eta`` and the loss ``L = tau (Y^2 - 1)`` has a closed-form
law, which makes every quantity here checkable against exact values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

from .errors import BelowSupport
from .problem import DRAW_BUDGET, NestedProblem

DEFAULT_TAU = 0.02
DEFAULT_L_ETA = 0.080477723746297747
DEFAULT_ETA = 0.025

# E|Z|^4 and E|Yt^2 - 1|^4 for standard normals.
_Z4 = 3.0
_CHI4 = 60.0


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelParams:
    tau: float = DEFAULT_TAU
    l_eta: float = DEFAULT_L_ETA

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not np.isfinite(self.l_eta):
            raise ValueError("l_eta must be finite")

    @classmethod
    def from_eta(cls, eta: float, tau: float = DEFAULT_TAU) -> ModelParams:
        return cls(tau=tau, l_eta=l_eta_from_eta(eta, tau))

    @property
    def hedge(self) -> float:
        """Coefficient of ``y * Z`` in the inner draw."""
        return 2.0 * np.sqrt(self.tau * (1.0 - self.tau))


@dataclass(frozen=True)
class ModelScenario:
    y: float
    d: float
    sigma: float

    @classmethod
    def from_y(cls, y: float, params: ModelParams) -> ModelScenario:
        y = float(y)
        mean = params.tau * (y * y - 1.0) - params.l_eta
        return cls(y, abs(mean), float(conditional_sigma(y, params)))


def conditional_sigma(y, params: ModelParams):
    y = np.asarray(y, dtype=float)
    tau = params.tau
    return np.sqrt(2 * tau**2 + 4 * tau * (1 - tau) * y**2)


class ModelProblem(NestedProblem):
    """Nested sampler for the model portfolio.

    With ``aggregate=True`` the sample mean and biased variance of ``n`` inner
    draws come from their exact joint law rather than from ``n`` separate
    draws of ``X``; the work accounting of callers is unchanged, only the
    arithmetic is cheaper. ``aggregate=False`` always draws every sample.
    """

    def __init__(self, params: ModelParams | None = None, aggregate: bool = True):
        self.params = params or ModelParams()
        self.aggregate = aggregate

    def sample_outer(self, m, rng):
        return rng.standard_normal(m)

    def sample_inner(self, y, rng):
        p = self.params
        y = np.asarray(y, dtype=float)
        yt = rng.standard_normal(len(y))
        z = rng.standard_normal(len(y))
        return p.tau * (y * y - yt * yt) + p.hedge * y * z - p.l_eta

    def inner_mean(self, y, n, rng):
        if not self.aggregate:
            return super().inner_mean(y, n, rng)
        p = self.params
        y = np.asarray(y, dtype=float)
        m = len(y)
        # sum of n squared normals is chi^2_n; the Z part is Gaussian
        chi = rng.chisquare(n, m)
        z = rng.standard_normal(m)
        return p.tau * y * y - p.l_eta - p.tau * chi / n + p.hedge * y * z / np.sqrt(n)

    def inner_stats(self, y, n, rng):
        if not self.aggregate:
            return super().inner_stats(y, n, rng)
        p = self.params
        y = np.asarray(y, dtype=float)
        m = len(y)
        a = p.tau * y * y - p.l_eta
        b = p.hedge * y

        # U_i = Yt_i^2 - 1 must be drawn; the Z-dependent sums are then
        # Gaussian/chi-square given U: sum (U-Ubar) Z ~ sqrt(S_uu) G1 and
        # sum (Z-Zbar)^2 = G1^2 + chi^2_{n-2}, with Zbar independent of both.
        g2 = np.zeros(m)
        g4 = np.zeros(m)
        width = min(n, DRAW_BUDGET)
        rows = max(1, DRAW_BUDGET // width)
        for r0 in range(0, m, rows):
            r1 = min(m, r0 + rows)
            for c0 in range(0, n, width):
                g = rng.standard_normal((r1 - r0, min(width, n - c0)))
                np.square(g, out=g)
                g2[r0:r1] += g.sum(axis=1)
                g4[r0:r1] += np.einsum("ij,ij->i", g, g)
        s1 = g2 - n
        s_uu = np.maximum(g4 - 2.0 * g2 + n - s1 * s1 / n, 0.0)
        u_bar = s1 / n
        z_bar = rng.standard_normal(m) / np.sqrt(n)
        if n > 1:
            g1 = rng.standard_normal(m)
            rest = rng.chisquare(n - 2, m) if n > 2 else np.zeros(m)
            s_uz = np.sqrt(s_uu) * g1
            s_zz = g1 * g1 + rest
        else:
            s_uu = np.zeros(m)
            s_uz = np.zeros(m)
            s_zz = np.zeros(m)
        mean = a - p.tau * (u_bar + 1.0) + b * z_bar
        var = (p.tau**2 * s_uu - 2 * p.tau * b * s_uz + b * b * s_zz) / n
        return mean, np.maximum(var, 0.0)

    def conditional_mean(self, y):
        p = self.params
        y = np.asarray(y, dtype=float)
        return p.tau * (y * y - 1.0) - p.l_eta

    def conditional_std(self, y):
        return conditional_sigma(y, self.params)


def analytic_eta(params: ModelParams, strict: bool = True) -> float:
    """Exact ``P(E[X | Y] >= 0)``."""
    ratio = params.l_eta / params.tau
    if ratio < -1.0:
        if strict:
            raise BelowSupport(f"l_eta={params.l_eta} is below the loss support -tau={-params.tau}")
        return 1.0
    return float(2.0 * ndtr(-np.sqrt(1.0 + ratio)))


def l_eta_from_eta(eta: float, tau: float = DEFAULT_TAU) -> float:
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    q = ndtri(eta / 2.0)
    return float(tau * (q * q - 1.0))


def analytic_cdf(x, params: ModelParams):
    """CDF of ``E[X | Y]``; zero below the support edge ``-tau - l_eta``."""
    x = np.asarray(x, dtype=float)
    arg = 1.0 + (x + params.l_eta) / params.tau
    out = np.where(arg >= 0, 1.0 - 2.0 * ndtr(-np.sqrt(np.maximum(arg, 0.0))), 0.0)
    return out if out.ndim else float(out)


def _tail_point(l_eta: float, tau: float) -> float:
    if l_eta < -tau:
        raise BelowSupport(f"threshold {l_eta} is below the loss support -tau={-tau}")
    return float(np.sqrt(1.0 + l_eta / tau))


def analytic_cvar(params: ModelParams) -> float:
    """``E[L | L > l_eta]`` for the loss ``L = tau (Y^2 - 1)``.

    With ``a = sqrt(1 + l_eta / tau)``: ``E[L 1{|Y| > a}] = 2 tau a phi(a)`` and
    ``P(|Y| > a) = 2 (1 - Phi(a))``, so CVaR = ``tau a phi(a) / (1 - Phi(a))``.
    """
    a = _tail_point(params.l_eta, params.tau)
    return float(params.tau * a * _phi(a) / ndtr(-a))


def cvar_quadrature(params: ModelParams) -> float:
    """Independent numerical evaluation of :func:`analytic_cvar`."""
    a = _tail_point(params.l_eta, params.tau)
    tau = params.tau
    num, _ = integrate.quad(lambda y: tau * (y * y - 1.0) * _phi(y), a, np.inf,
                            epsabs=0.0, epsrel=1e-13, limit=200)
    den, _ = integrate.quad(_phi, a, np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return num / den


def analytic_expected_excess(x, tau: float = DEFAULT_TAU):
    """``E[max(L - x, 0)]`` for ``L = tau (Y^2 - 1)``."""
    x = np.asarray(x, dtype=float)
    c = np.sqrt(np.maximum(1.0 + x / tau, 0.0))
    inside = 2.0 * tau * c * _phi(c) - 2.0 * x * ndtr(-c)
    out = np.where(x >= -tau, inside, -x)
    return out if out.ndim else float(out)


def rockafellar_objective(x, eta: float, tau: float = DEFAULT_TAU):
    """``x + E[max(L - x, 0)] / eta``; minimised at the VaR with value CVaR."""
    return x + analytic_expected_excess(x, tau) / eta


def kappa4(y, tau: float = DEFAULT_TAU):
    """Normalised fourth central moment of ``X | Y = y``."""
    y = np.asarray(y, dtype=float)
    b2 = 4 * tau * (1 - tau) * y**2
    return (3 * b2**2 + 12 * b2 * tau**2 + _CHI4 * tau**4) / (b2 + 2 * tau**2) ** 2


def kappa_bound() -> float:
    """Uniform bound ``2^3 E|Z|^4 + 2 E|Yt^2 - 1|^4`` on :func:`kappa4`."""
    return 2**3 * _Z4 + 2 * _CHI4
