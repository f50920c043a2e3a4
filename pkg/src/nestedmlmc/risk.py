"""Value-at-risk by noisy bisection-like root finding, and CVaR.

The VaR search walks ``L`` with step ``h``, halving and reversing the step
whenever the estimated exceedance probability crosses the target, and halving
the RMS budget of the probability estimate once the estimate is within three
budgets of the target. CVaR uses ``f(x) = x + E[max(L - x, 0)] / eta`` at the
estimated VaR, whose error is second order in the VaR error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

from .errors import BudgetExceeded
from .estimators import Coupling, Payoff
from .mlmc import MlmcConfig, MlmcResult, estimate
from .problem import NestedProblem, ShiftedProblem
from .rng import as_stream


@dataclass(frozen=True)
class RootFindConfig:
    eta_target: float
    eps: float
    lambda0: float = 0.005
    l0: float = 0.0
    h0: float = 0.1
    max_work: float | None = None

    def __post_init__(self):
        if not 0.0 < self.eta_target < 1.0:
            raise ValueError(f"eta_target must lie in (0, 1), got {self.eta_target}")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be > 0")
        if not self.h0 >= self.eps / 2:
            raise ValueError("h0 must be >= eps / 2")


@dataclass(frozen=True)
class TraceEntry:
    l_hat: float
    eta_hat: float
    lam: float
    h: float


@dataclass
class VarResult:
    l_eta_hat: float
    iterations: int
    total_work: float
    trace: list[TraceEntry] = field(default_factory=list)


def _sign(x: float) -> float:
    # sign(0) taken as +1: an exact hit counts as "probability still too high"
    return 1.0 if x >= 0 else -1.0


def var_root_find(cfg: RootFindConfig, prob_estimator: Callable[[float, float], float],
                  work_counter: Callable[[], float] | None = None) -> VarResult:
    """Find ``L`` with ``P(loss > L) = cfg.eta_target``.

    ``prob_estimator(threshold, rms)`` returns an estimate of the exceedance
    probability with RMS error at most ``rms``. ``work_counter`` reports the
    cumulative work spent by the estimator; when given, it is recorded and
    checked against ``cfg.max_work``.
    """
    eta = cfg.eta_target

    def work():
        return work_counter() if work_counter is not None else 0.0

    def check():
        if cfg.max_work is not None and work() > cfg.max_work:
            raise BudgetExceeded(f"root finding used {work():.3g} > {cfg.max_work:.3g} work")

    lam = cfg.lambda0
    l_hat = cfg.l0
    eta_hat = prob_estimator(l_hat, lam)
    check()
    h = cfg.h0 * _sign(eta_hat - eta)
    trace = [TraceEntry(l_hat, eta_hat, lam, h)]
    it = 0
    while 2 * abs(h) > cfg.eps:
        l_hat += h
        eta_hat = prob_estimator(l_hat, lam)
        check()
        if h * _sign(eta_hat - eta) < 0:
            h = -h / 2
        if abs(eta_hat - eta) < 3 * lam:
            lam /= 2
        it += 1
        trace.append(TraceEntry(l_hat, eta_hat, lam, h))
    return VarResult(l_hat, it, work(), trace)


class MlmcProbabilityEstimator:
    """``(threshold, rms) -> P(E[X|Y] >= threshold)`` via the MLMC driver.

    Every probe runs on a fresh child stream and the shifted problem, with the
    step payoff. Work of all probes accumulates in ``total_inner_work``.
    """

    def __init__(self, problem: NestedProblem, cfg: MlmcConfig, rng):
        self.problem = problem
        self.cfg = replace(cfg, payoff=Payoff.HEAVISIDE)
        self.stream = as_stream(rng)
        self.total_inner_work = 0
        self.calls = 0
        self.results: list[MlmcResult] = []

    def __call__(self, threshold: float, rms: float) -> float:
        cfg = replace(self.cfg, tol=rms)
        res = estimate(cfg, ShiftedProblem(self.problem, threshold), self.stream.child(self.calls))
        self.calls += 1
        self.total_inner_work += res.total_inner_work
        self.results.append(res)
        return res.estimate

    def work(self) -> float:
        return float(self.total_inner_work)


def value_at_risk(cfg: RootFindConfig, problem: NestedProblem, mlmc: MlmcConfig, rng) -> VarResult:
    """VaR of the loss ``E[X | Y]`` of ``problem`` using MLMC probability probes."""
    est = MlmcProbabilityEstimator(problem, mlmc, rng)
    return var_root_find(cfg, est, est.work)


@dataclass
class CvarResult:
    value: float
    l_eta_hat: float
    mlmc: MlmcResult
    total_inner_work: int


def cvar_estimate(l_eta_hat: float, tol: float, eta: float, cfg: MlmcConfig,
                  problem: NestedProblem, rng) -> CvarResult:
    """CVaR of the loss ``E[X | Y]`` from a VaR estimate.

    The positive-part MLMC run targets RMS ``tol * eta`` so the value carries
    RMS ``tol`` after dividing by ``eta``. ``cfg.coupling`` is honoured, but the
    antithetic coupling is what makes the positive-part levels cheap.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    run = replace(cfg, tol=tol * eta, payoff=Payoff.POSITIVE_PART)
    res = estimate(run, ShiftedProblem(problem, l_eta_hat), as_stream(rng))
    return CvarResult(l_eta_hat + res.estimate / eta, l_eta_hat, res, res.total_inner_work)


def default_cvar_config(**kw) -> MlmcConfig:
    return MlmcConfig(payoff=Payoff.POSITIVE_PART, coupling=Coupling.ANTITHETIC, **kw)


def rms(values, truth: float) -> float:
    return math.sqrt(sum((v - truth) ** 2 for v in values) / len(values))
