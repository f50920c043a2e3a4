from __future__ import annotations

import numpy as np
import pytest

from nestedmlmc.errors import BudgetExceeded
from nestedmlmc.mlmc import MlmcConfig, Sampling
from nestedmlmc.model import (
    ModelParams,
    ModelProblem,
    analytic_cvar,
    analytic_eta,
    l_eta_from_eta,
    rockafellar_objective,
)
from nestedmlmc.problem import ConstantProblem
from nestedmlmc.risk import (
    MlmcProbabilityEstimator,
    RootFindConfig,
    cvar_estimate,
    var_root_find,
    value_at_risk,
)
from nestedmlmc.rng import RngStream

TAU = 0.02
L_ETA = 0.080477723746297747


def exact_probability(threshold, rms):
    return analytic_eta(ModelParams(TAU, threshold), strict=False)


def test_root_find_with_exact_probability():
    cfg = RootFindConfig(eta_target=0.025, eps=1e-4, lambda0=0.005, l0=0.0, h0=0.1)
    res = var_root_find(cfg, exact_probability)
    assert abs(res.l_eta_hat - L_ETA) <= 1e-4
    assert 2 * abs(res.trace[-1].h) <= cfg.eps


def test_root_find_linear_cdf():
    cfg = RootFindConfig(eta_target=0.3, eps=1e-3, l0=0.0, h0=0.25)
    res = var_root_find(cfg, lambda x, rms: 1.0 - x)
    assert abs(res.l_eta_hat - 0.7) <= cfg.eps


def test_root_find_guard_boundary():
    cfg = RootFindConfig(eta_target=0.025, eps=0.01, l0=L_ETA, h0=0.005)
    res = var_root_find(cfg, exact_probability)
    assert res.l_eta_hat == L_ETA and res.iterations == 0 and len(res.trace) == 1


def test_trace_invariants_under_noise():
    gen = np.random.default_rng(0)

    def noisy(x, rms):
        return exact_probability(x, rms) + gen.normal(0.0, rms)

    for _ in range(20):
        res = var_root_find(RootFindConfig(0.025, 0.002), noisy)
        lams = [t.lam for t in res.trace]
        assert all(b <= a for a, b in zip(lams, lams[1:]))
        for prev, cur in zip(res.trace, res.trace[1:]):
            assert abs(cur.h) in (abs(prev.h), abs(prev.h) / 2)
            if abs(cur.h) < abs(prev.h):
                assert np.sign(cur.h) != np.sign(prev.h)


def test_budget_exceeded():
    spent = [0.0]

    def est(x, rms):
        spent[0] += rms**-2
        return exact_probability(x, rms)

    cfg = RootFindConfig(0.025, 1e-4, max_work=1e6)
    with pytest.raises(BudgetExceeded):
        var_root_find(cfg, est, lambda: spent[0])


@pytest.mark.parametrize("kw", [dict(eta_target=0.0), dict(eta_target=1.0), dict(eps=0.0),
                                dict(lambda0=0.0), dict(h0=0.001, eps=0.01)])
def test_root_config_validation(kw):
    base = dict(eta_target=0.025, eps=0.005)
    with pytest.raises(ValueError):
        RootFindConfig(**{**base, **kw})


def test_probability_estimator_uses_fresh_streams():
    est = MlmcProbabilityEstimator(ModelProblem(ModelParams(TAU, 0.0)), MlmcConfig(sampling=Sampling.DET2), 3)
    a = est(L_ETA, 0.004)
    b = est(L_ETA, 0.004)
    assert a != b and est.calls == 2
    assert est.total_inner_work == sum(r.total_inner_work for r in est.results)


def test_var_with_mlmc_probes_det2():
    loss = ModelProblem(ModelParams(TAU, 0.0))
    res = value_at_risk(RootFindConfig(0.025, 0.01), loss, MlmcConfig(sampling=Sampling.DET2), RngStream(1))
    assert abs(res.l_eta_hat - L_ETA) <= 0.01
    assert res.total_work > 0


def test_cvar_degenerate_loss():
    # L = c always and eta = 1: f(x) = x + (c - x) = c
    res = cvar_estimate(0.1, 1e-3, 1.0, MlmcConfig(sampling=Sampling.DET2), ConstantProblem(0.5), RngStream(2))
    assert res.value == pytest.approx(0.5, rel=1e-12)


def test_cvar_matches_closed_form():
    loss = ModelProblem(ModelParams(TAU, 0.0))
    exact = analytic_cvar(ModelParams(TAU, L_ETA))
    tol = 0.02 * exact
    res = cvar_estimate(L_ETA, tol, 0.025, MlmcConfig(sampling=Sampling.DET2), loss, RngStream(3))
    assert abs(res.value - exact) < 3 * tol
    assert res.mlmc.stat_error <= tol * 0.025


def test_cvar_rejects_bad_arguments():
    with pytest.raises(ValueError):
        cvar_estimate(L_ETA, 0.0, 0.025, MlmcConfig(), ModelProblem(), RngStream(0))
    with pytest.raises(ValueError):
        cvar_estimate(L_ETA, 0.01, 1.5, MlmcConfig(), ModelProblem(), RngStream(0))


def test_threshold_error_enters_quadratically():
    eta = 0.025
    base = rockafellar_objective(L_ETA, eta, TAU)
    es = np.array([0.01, 0.02, 0.04])
    for sign in (1, -1):
        g = np.array([rockafellar_objective(L_ETA + sign * e, eta, TAU) - base for e in es])
        lin, quad = np.linalg.lstsq(np.column_stack([es, es**2]), g, rcond=None)[0]
        # a threshold error entering at first order would carry a slope of
        # order one; what is left here is third-order leakage into the fit
        assert abs(lin) < 0.2 and quad > 0
        order = np.log2(g[2] / g[0]) / 2
        assert 1.6 < order < 2.4
        assert np.all(g > 0)
    tiny = 1e-5
    slope = (rockafellar_objective(L_ETA + tiny, eta, TAU) - rockafellar_objective(L_ETA - tiny, eta, TAU)) / (2 * tiny)
    assert abs(slope) < 1e-3


def test_estimated_objective_is_convex():
    eta = 0.025
    loss = ModelProblem(ModelParams(TAU, 0.0))
    h = 0.02
    grid = L_ETA + h * np.arange(-2, 3)
    tol = 0.002
    vals = [cvar_estimate(x, tol, eta, MlmcConfig(sampling=Sampling.DET2), loss, RngStream(10 + i)).value
            for i, x in enumerate(grid)]
    second = np.diff(vals, 2)
    assert np.all(second >= -3 * np.sqrt(6) * tol)
    assert l_eta_from_eta(eta, TAU) == pytest.approx(L_ETA, abs=1e-15)
