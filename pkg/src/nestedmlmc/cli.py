"""Command-line front end: ``nestedmlmc {converge,estimate,complexity,var,cvar}``.

Tables go out as CSV behind a ``#`` line echoing the version and full config;
scalar results go out as JSON. Exit codes: 0 success, 2 bad configuration,
3 a level cap or work budget was hit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np
from scipy import stats

from . import __version__
from .adaptive import AdaptiveConfig
from .errors import BudgetExceeded, MaxLevelExceeded, NonconvergentBias
from .estimators import Coupling, Payoff
from .mlmc import MlmcConfig, Sampling, convergence_study, estimate, fit_rates, format_level_table
from .model import (
    DEFAULT_ETA,
    ModelParams,
    ModelProblem,
    analytic_cvar,
    analytic_eta,
    analytic_expected_excess,
    l_eta_from_eta,
)
from .risk import RootFindConfig, cvar_estimate, value_at_risk
from .rng import RngStream

THREADS_ENV = "NESTEDMLMC_THREADS"
DEFAULT_TOLS = "0.08,0.04,0.02,0.01,0.005"


class ConfigError(Exception):
    pass


def _levels(text: str) -> range:
    try:
        a, b = text.split("..")
        lo, hi = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must look like A..B, got {text!r}")
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"need 0 <= A <= B, got {text!r}")
    return range(lo, hi + 1)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _modes(text: str) -> list[str]:
    modes = [t.strip() for t in text.split(",") if t.strip()]
    bad = [m for m in modes if m not in {s.value for s in Sampling}]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"unknown mode(s) {bad or text!r}")
    return modes


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _add_common(p: argparse.ArgumentParser, multi_mode: bool = False):
    g = p.add_argument_group("problem")
    g.add_argument("--tau", type=float, default=0.02, help="risk horizon")
    ex = g.add_mutually_exclusive_group()
    ex.add_argument("--l-eta", type=float, default=None, help="loss threshold")
    ex.add_argument("--eta", type=float, default=None, help="target exceedance probability (default 0.025)")
    s = p.add_argument_group("sampling")
    if multi_mode:
        s.add_argument("--mode", type=_modes, default=["adaptive"], help="det2, det4, adaptive or a comma list")
    else:
        s.add_argument("--mode", choices=[m.value for m in Sampling], default="adaptive")
    s.add_argument("--r", type=float, default=1.5)
    s.add_argument("--n0", type=int, default=32)
    s.add_argument("--confidence", type=float, default=3.0)
    s.add_argument("--coupling", choices=[c.value for c in Coupling], default="anti")
    s.add_argument("--payoff", choices=[q.value for q in Payoff], default="step")
    s.add_argument("--m-pilot", type=int, default=1000)
    s.add_argument("--max-level", type=int, default=20)
    r = p.add_argument_group("run")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default from ${THREADS_ENV}, else 1)")
    r.add_argument("--out", default=None, help="output path (default stdout)")
    r.add_argument("--config", default=None, help="JSON file of defaults; flags override it")
    r.add_argument("--deterministic", action="store_true", help="write 0 for wall-clock columns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestedmlmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nestedmlmc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("converge", help="per-level convergence table")
    _add_common(p, multi_mode=True)
    p.add_argument("--levels", type=_levels, required=True, help="level range A..B")
    p.add_argument("--m", type=int, default=10000, help="outer samples per level")
    p.add_argument("--skip", type=int, default=2, help="levels below this are left out of the rate fit")

    p = sub.add_parser("estimate", help="one MLMC estimate at a relative tolerance")
    _add_common(p)
    p.add_argument("--tol-rel", type=float, default=0.02, help="RMS tolerance relative to the exact value")
    p.add_argument("--repeat", type=int, default=1)

    p = sub.add_parser("complexity", help="work and error over a tolerance sweep")
    _add_common(p)
    p.add_argument("--tol-rel", type=_floats, default=_floats(DEFAULT_TOLS))
    p.add_argument("--repeat", type=int, default=1)

    p = sub.add_parser("var", help="value-at-risk by stochastic root finding")
    _add_common(p)
    p.add_argument("--eps", type=float, default=0.005)
    p.add_argument("--lambda0", type=float, default=0.005)
    p.add_argument("--l0", type=float, default=0.0)
    p.add_argument("--h0", type=float, default=0.1)
    p.add_argument("--max-work", type=float, default=None)
    p.add_argument("--trace", action="store_true", help="include the full iteration trace")

    p = sub.add_parser("cvar", help="conditional value-at-risk")
    _add_common(p)
    p.add_argument("--tol-rel", type=float, default=0.02, help="RMS tolerance relative to the exact CVaR")
    p.add_argument("--l-eta-hat", type=float, default=None,
                   help="VaR to evaluate at; when absent it is found with the var command's settings")
    p.add_argument("--eps", type=float, default=0.005)
    p.add_argument("--lambda0", type=float, default=0.005)
    p.add_argument("--l0", type=float, default=0.0)
    p.add_argument("--h0", type=float, default=0.1)
    p.add_argument("--max-work", type=float, default=None)
    return parser


def _parse(argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        try:
            with open(known.config) as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        if not isinstance(defaults, dict):
            parser.error("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions}
        updates = {}
        for raw, val in defaults.items():
            key = raw.replace("-", "_")
            if key not in actions or key in ("config", "help"):
                parser.error(f"unknown config key: {raw}")
            action = actions[key]
            if isinstance(val, str) and callable(action.type):
                try:
                    val = action.type(val)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    parser.error(f"config key {raw}: {exc}")
            action.required = False
            updates[key] = val
        sub.set_defaults(**updates)
    return parser.parse_args(argv)


def _echo(args) -> dict:
    # the worker count never changes results, so it stays out of the echo
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "threads":
            continue
        if isinstance(v, range):
            v = f"{v.start}..{v.stop - 1}"
        out[k] = v
    return out


def _params(args) -> ModelParams:
    if args.l_eta is not None:
        return ModelParams(tau=args.tau, l_eta=args.l_eta)
    eta = DEFAULT_ETA if args.eta is None else args.eta
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    return ModelParams.from_eta(eta, args.tau)


def _target_eta(args) -> float:
    if args.eta is not None:
        if not 0.0 < args.eta < 1.0:
            raise ConfigError(f"eta must lie in (0, 1), got {args.eta}")
        return args.eta
    if args.l_eta is not None:
        return analytic_eta(ModelParams(args.tau, args.l_eta), strict=False)
    return DEFAULT_ETA


def _mlmc_config(args, mode: str, tol: float | None = None) -> MlmcConfig:
    return MlmcConfig(
        tol=tol,
        sampling=Sampling(mode),
        adaptive=AdaptiveConfig(n0=args.n0, confidence=args.confidence, r=args.r),
        coupling=Coupling(args.coupling),
        payoff=Payoff(args.payoff),
        m_pilot=args.m_pilot,
        max_level=args.max_level,
        threads=args.threads,
    )


def _exact_value(params: ModelParams, payoff: Payoff) -> float:
    if payoff is Payoff.HEAVISIDE:
        return analytic_eta(params, strict=False)
    # E[max(E[X|Y], 0)] with E[X|Y] = L - l_eta
    return float(analytic_expected_excess(params.l_eta, params.tau))


def _emit(text: str, args):
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _suffixed(path: str, mode: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_{mode}{ext or '.csv'}"


def cmd_converge(args) -> int:
    params = _params(args)
    problem = ModelProblem(params)
    echo = _echo(args)
    summaries = []
    for i, mode in enumerate(args.mode):
        cfg = _mlmc_config(args, mode)
        rows = convergence_study(args.levels, args.m, cfg, problem, RngStream(args.seed).child(i))
        text = format_level_table(rows, {**echo, "mode": mode}, __version__, args.deterministic)
        if args.out and len(args.mode) > 1:
            with open(_suffixed(args.out, mode), "w") as fh:
                fh.write(text)
        else:
            _emit(text, args)
        try:
            rates = asdict(fit_rates(rows, skip=args.skip))
        except Exception as exc:  # too few levels for a fit is not fatal for the table
            rates = {"error": str(exc)}
        summaries.append({"mode": mode, **rates})
    for s in summaries:
        sys.stderr.write(json.dumps(s, sort_keys=True) + "\n")
    return 0


def _run_estimates(args, tol_rel: float, repeats: int, stream: RngStream):
    params = _params(args)
    cfg0 = _mlmc_config(args, args.mode)
    exact = _exact_value(params, cfg0.payoff)
    problem = ModelProblem(params)
    rows = []
    for k in range(repeats):
        cfg = _mlmc_config(args, args.mode, tol=tol_rel * exact)
        t0 = time.perf_counter()
        res = estimate(cfg, problem, stream.child(k))
        wall = 0.0 if args.deterministic else time.perf_counter() - t0
        rows.append((cfg.tol, res, wall, exact))
    return rows


def cmd_estimate(args) -> int:
    rows = _run_estimates(args, args.tol_rel, args.repeat, RngStream(args.seed))
    out = []
    for tol, res, wall, exact in rows:
        out.append({
            "estimate": res.estimate,
            "exact": exact,
            "error": res.estimate - exact,
            "tol": tol,
            "stat_error": res.stat_error,
            "bias_estimate": res.bias_estimate,
            "first_level": res.first_level,
            "last_level": res.last_level,
            "samples": [r.m for r in res.levels],
            "total_inner_work": res.total_inner_work,
            "restarts": res.restarts,
            "wall_time": wall,
        })
    payload = {"version": __version__, "config": _echo(args), "runs": out}
    _emit(json.dumps(payload, sort_keys=True) + "\n", args)
    return 0


def cmd_complexity(args) -> int:
    buf = io.StringIO()
    buf.write(f"# nestedmlmc {__version__} {json.dumps(_echo(args), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tol", "total_work", "wall_time", "estimate", "error"])
    tols, works = [], []
    for j, rel in enumerate(args.tol_rel):
        if not rel > 0:
            raise ConfigError(f"tolerances must be > 0, got {rel}")
        for tol, res, wall, exact in _run_estimates(args, rel, args.repeat, RngStream(args.seed).child(j)):
            w.writerow([repr(tol), res.total_inner_work, repr(wall), repr(res.estimate), repr(res.estimate - exact)])
            tols.append(tol)
            works.append(res.total_inner_work)
    _emit(buf.getvalue(), args)
    if len(set(tols)) >= 2:
        slope = stats.linregress(np.log(tols), np.log(works)).slope
        sys.stderr.write(json.dumps({"work_vs_tol_slope": slope}) + "\n")
    return 0


def _loss_problem(args) -> ModelProblem:
    return ModelProblem(ModelParams(tau=args.tau, l_eta=0.0))


def _root_config(args, eta: float) -> RootFindConfig:
    return RootFindConfig(eta, args.eps, args.lambda0, args.l0, args.h0, args.max_work)


def cmd_var(args) -> int:
    eta = _target_eta(args)
    cfg = _mlmc_config(args, args.mode)
    t0 = time.perf_counter()
    res = value_at_risk(_root_config(args, eta), _loss_problem(args), cfg, RngStream(args.seed))
    wall = 0.0 if args.deterministic else time.perf_counter() - t0
    out = {
        "version": __version__,
        "config": _echo(args),
        "eta": eta,
        "l_eta_hat": res.l_eta_hat,
        "l_eta_exact": l_eta_from_eta(eta, args.tau),
        "iterations": res.iterations,
        "total_work": res.total_work,
        "trace_length": len(res.trace),
        "final_lambda": res.trace[-1].lam,
        "wall_time": wall,
    }
    if args.trace:
        out["trace"] = [asdict(t) for t in res.trace]
    _emit(json.dumps(out, sort_keys=True) + "\n", args)
    return 0


def cmd_cvar(args) -> int:
    eta = _target_eta(args)
    exact = analytic_cvar(ModelParams(args.tau, l_eta_from_eta(eta, args.tau)))
    if not args.tol_rel > 0:
        raise ConfigError("tol-rel must be > 0")
    cfg = _mlmc_config(args, args.mode)
    loss = _loss_problem(args)
    t0 = time.perf_counter()
    var_work = 0.0
    l_hat = args.l_eta_hat
    if l_hat is None:
        var = value_at_risk(_root_config(args, eta), loss, cfg, RngStream(args.seed).child(0))
        l_hat, var_work = var.l_eta_hat, var.total_work
    res = cvar_estimate(l_hat, args.tol_rel * exact, eta, cfg, loss, RngStream(args.seed).child(1))
    wall = 0.0 if args.deterministic else time.perf_counter() - t0
    out = {
        "version": __version__,
        "config": _echo(args),
        "eta": eta,
        "l_eta_hat": l_hat,
        "cvar": res.value,
        "cvar_exact": exact,
        "error": res.value - exact,
        "tol": args.tol_rel * exact,
        "cvar_work": res.total_inner_work,
        "var_work": var_work,
        "wall_time": wall,
    }
    _emit(json.dumps(out, sort_keys=True) + "\n", args)
    return 0


COMMANDS = {
    "converge": cmd_converge,
    "estimate": cmd_estimate,
    "complexity": cmd_complexity,
    "var": cmd_var,
    "cvar": cmd_cvar,
}


def main(argv=None) -> int:
    args = _parse(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        sys.stderr.write(f"nestedmlmc: error: {exc}\n")
        return 2
    except (MaxLevelExceeded, BudgetExceeded, NonconvergentBias) as exc:
        sys.stderr.write(f"nestedmlmc: {type(exc).__name__}: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
