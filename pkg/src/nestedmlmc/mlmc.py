"""Multilevel Monte Carlo over inner-sample hierarchies.

Level ``l`` refines the inner estimate from ``N_{l-1}`` to ``N_l`` samples.
The lowest active level (``l0``) contributes its fine value alone; every
level above contributes a coupled fine-minus-coarse difference.

Outer scenarios are processed in fixed-size chunks. Chunk ``c`` of level ``l``
draws from ``stream.child(l, c)`` and chunk records are merged in chunk order,
so a result depends only on the stream, never on the number of threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np
from scipy import stats

from .adaptive import AdaptiveConfig, determine_inner_samples_batch
from .errors import InsufficientLevels, MaxLevelExceeded, NonconvergentBias
from .estimators import Coupling, Payoff, level_diffs
from .problem import NestedProblem
from .rng import as_stream


class Sampling(Enum):
    DET2 = "det2"
    DET4 = "det4"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class MlmcConfig:
    tol: float | None = None
    sampling: Sampling = Sampling.ADAPTIVE
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    coupling: Coupling = Coupling.ANTITHETIC
    payoff: Payoff = Payoff.HEAVISIDE
    alpha_bias: float = 1.0
    error_split: float = 0.5
    m_pilot: int = 1000
    max_level: int = 20
    first_level: int = 0
    auto_start: bool = True
    min_samples: int = 32
    beta_floor: float = 1.0
    chunk_size: int = 2048
    threads: int = 1

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if not 0.0 < self.error_split < 1.0:
            raise ValueError("error_split must lie in (0, 1)")
        if self.alpha_bias <= 0:
            raise ValueError("alpha_bias must be > 0")
        if self.m_pilot < 2 or self.min_samples < 2:
            raise ValueError("m_pilot and min_samples must be >= 2")
        if not 0 <= self.first_level <= self.max_level:
            raise ValueError("need 0 <= first_level <= max_level")
        if self.chunk_size < 1 or self.threads < 1:
            raise ValueError("chunk_size and threads must be >= 1")

    @property
    def n0(self) -> int:
        return self.adaptive.n0

    def describe(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, AdaptiveConfig):
                v = asdict(v)
            out[f.name] = v
        return out


@dataclass
class LevelRecord:
    """Running sums for one level; ``merge`` is exact up to float reordering."""

    level: int
    m: int = 0
    sum_diff: float = 0.0
    sum_diff_sq: float = 0.0
    sum_abs_diff: float = 0.0
    sum_fine: float = 0.0
    sum_fine_sq: float = 0.0
    inner_work: int = 0
    fine_work: int = 0
    wall_time: float = 0.0

    def merge(self, other: LevelRecord) -> LevelRecord:
        if other.level != self.level:
            raise ValueError("cannot merge records of different levels")
        return LevelRecord(
            self.level,
            self.m + other.m,
            self.sum_diff + other.sum_diff,
            self.sum_diff_sq + other.sum_diff_sq,
            self.sum_abs_diff + other.sum_abs_diff,
            self.sum_fine + other.sum_fine,
            self.sum_fine_sq + other.sum_fine_sq,
            self.inner_work + other.inner_work,
            self.fine_work + other.fine_work,
            self.wall_time + other.wall_time,
        )

    @staticmethod
    def _var(s, s2, m):
        if m < 2:
            return float("nan")
        return max(s2 - s * s / m, 0.0) / (m - 1)

    @property
    def mean(self) -> float:
        return self.sum_diff / self.m

    @property
    def E(self) -> float:
        return abs(self.mean)

    @property
    def E_abs(self) -> float:
        return self.sum_abs_diff / self.m

    @property
    def second_moment(self) -> float:
        return self.sum_diff_sq / self.m

    @property
    def V(self) -> float:
        return self._var(self.sum_diff, self.sum_diff_sq, self.m)

    @property
    def Ef(self) -> float:
        return self.sum_fine / self.m

    @property
    def Vf(self) -> float:
        return self._var(self.sum_fine, self.sum_fine_sq, self.m)

    @property
    def W(self) -> float:
        return self.inner_work / self.m

    @property
    def Wf(self) -> float:
        return self.fine_work / self.m

    @property
    def stderr(self) -> float:
        return math.sqrt(self.V / self.m)


@dataclass(frozen=True)
class LevelRow:
    level: int
    M: int
    E: float
    V: float
    Ef: float
    Vf: float
    W: float
    R: float
    wall_time: float


@dataclass(frozen=True)
class Rates:
    alpha: float
    beta: float
    gamma: float
    alpha_se: float
    beta_se: float
    gamma_se: float


@dataclass
class MlmcResult:
    estimate: float
    levels: list[LevelRecord]
    first_level: int
    stat_error: float
    bias_estimate: float
    total_inner_work: int
    restarts: int = 0

    @property
    def last_level(self) -> int:
        return self.levels[-1].level


def inner_counts(level: int, m: int, cfg: MlmcConfig):
    """Deterministic per-scenario fine count for the non-adaptive modes."""
    if cfg.sampling is Sampling.DET2:
        return np.full(m, cfg.n0 * 2**level, dtype=np.int64)
    return np.full(m, cfg.n0 * 4**level, dtype=np.int64)


def _chunk_record(level: int, m: int, cfg: MlmcConfig, problem: NestedProblem,
                  gen: np.random.Generator, base: bool) -> LevelRecord:
    t0 = time.perf_counter()
    y = problem.sample_outer(m, gen)
    pilot = np.zeros(m, dtype=np.int64)
    pilot_fine = np.zeros(m, dtype=np.int64)
    coupled = not base and level > 0
    if cfg.sampling is Sampling.ADAPTIVE:
        nf, pilot_fine = determine_inner_samples_batch(level, y, cfg.adaptive, problem, gen)[:2]
        pilot = pilot + pilot_fine
        if coupled:
            nc, pc = determine_inner_samples_batch(level - 1, y, cfg.adaptive, problem, gen)[:2]
            pilot = pilot + pc
    else:
        nf = inner_counts(level, m, cfg)
        if coupled:
            nc = inner_counts(level - 1, m, cfg)
    if not coupled:
        nc = np.zeros(m, dtype=np.int64)
    fine, coarse, work = level_diffs(y, nf, nc, cfg.payoff, problem, gen, cfg.coupling)
    diff = fine - coarse
    return LevelRecord(
        level=level,
        m=m,
        sum_diff=float(diff.sum()),
        sum_diff_sq=float((diff * diff).sum()),
        sum_abs_diff=float(np.abs(diff).sum()),
        sum_fine=float(fine.sum()),
        sum_fine_sq=float((fine * fine).sum()),
        inner_work=int(work.sum() + pilot.sum()),
        fine_work=int(nf.sum() + pilot_fine.sum()),
        wall_time=time.perf_counter() - t0,
    )


def run_level(level: int, m: int, cfg: MlmcConfig, problem: NestedProblem, rng,
              base: bool | None = None) -> LevelRecord:
    """Sample ``m`` outer scenarios on ``level``.

    ``base`` marks the lowest active level, whose coarse term is dropped; it
    defaults to ``level == 0``. ``rng`` is an :class:`RngStream` (or int seed).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if level < 0:
        raise ValueError("level must be >= 0")
    stream = as_stream(rng)
    base = level == 0 if base is None else base
    size = cfg.chunk_size
    sizes = [min(size, m - start) for start in range(0, m, size)]

    def work(c):
        return _chunk_record(level, sizes[c], cfg, problem, stream.child(level, c).generator(), base)

    if cfg.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(c) for c in range(len(sizes))]
    rec = LevelRecord(level)
    for part in parts:
        rec = rec.merge(part)
    return rec


def start_ratio(lower: LevelRecord, upper: LevelRecord) -> float:
    """Gain ratio for keeping ``lower.level`` as the first MLMC level.

    ``(sqrt(Vf_l Wf_l) + sqrt(V_{l+1} W_{l+1})) / sqrt(Vf_{l+1} Wf_{l+1})``;
    a value ``<= 1`` means starting at ``l`` is no worse than at ``l + 1``.
    """
    num = math.sqrt(lower.Vf * lower.Wf) + math.sqrt(upper.V * upper.W)
    den = math.sqrt(upper.Vf * upper.Wf)
    if num == 0:
        return 0.0
    if den == 0:
        return math.inf
    return num / den


def select_start_level(cfg: MlmcConfig, problem: NestedProblem, m_probe: int, rng) -> int:
    """Smallest level ``l0 >= cfg.first_level`` with ``start_ratio <= 1``."""
    if m_probe < 2:
        raise ValueError("m_probe must be >= 2")
    stream = as_stream(rng)
    level = cfg.first_level
    lower = run_level(level, m_probe, cfg, problem, stream.child(0), base=False)
    while True:
        if level + 1 > cfg.max_level:
            raise MaxLevelExceeded(f"no start level up to max_level={cfg.max_level}")
        upper = run_level(level + 1, m_probe, cfg, problem, stream.child(0), base=False)
        if start_ratio(lower, upper) <= 1.0:
            return level
        level += 1
        lower = upper


def convergence_study(levels, m: int, cfg: MlmcConfig, problem: NestedProblem, rng) -> list[LevelRow]:
    """Per-level statistics with ``m`` outer samples each; level 0 is fine-only."""
    stream = as_stream(rng)
    recs = [run_level(l, m, cfg, problem, stream, base=(l == 0)) for l in levels]
    rows = []
    for i, rec in enumerate(recs):
        nxt = recs[i + 1] if i + 1 < len(recs) else None
        r = start_ratio(rec, nxt) if nxt is not None and nxt.level == rec.level + 1 else float("nan")
        rows.append(LevelRow(rec.level, rec.m, rec.E, rec.V, rec.Ef, rec.Vf, rec.W, r, rec.wall_time))
    return rows


def first_level_below_one(rows: list[LevelRow]) -> int | None:
    """First level whose ``R`` column is below 1, or None."""
    for row in rows:
        if row.R < 1.0:
            return row.level
    return None


def _slope(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(y)
    if ok.sum() < 2:
        return float("nan"), float("nan")
    fit = stats.linregress(x[ok], y[ok])
    return float(fit.slope), float(fit.stderr)


def fit_rates(rows, skip: int = 0) -> Rates:
    """Least-squares rates from a level table.

    ``alpha`` and ``beta`` are minus the slopes of ``log2 E`` and ``log2 V``,
    ``gamma`` the slope of ``log2 W``, all against the level. Rows with
    ``level < skip`` are ignored; non-positive entries are dropped per column.
    """
    rows = [r for r in rows if r.level >= skip]
    if len(rows) < 3:
        raise InsufficientLevels(f"need at least 3 levels, got {len(rows)}")
    lv = [r.level for r in rows]

    def log2(v):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.asarray(v, dtype=float) > 0, np.log2(np.asarray(v, dtype=float)), np.nan)

    a, ase = _slope(lv, log2([r.E for r in rows]))
    b, bse = _slope(lv, log2([r.V for r in rows]))
    g, gse = _slope(lv, log2([r.W for r in rows]))
    return Rates(-a, -b, g, ase, bse, gse)


def _allocation(recs: list[LevelRecord], cfg: MlmcConfig, tol: float) -> list[int]:
    var = []
    for i, rec in enumerate(recs):
        v = rec.V
        if i >= 2:
            # weak floor from the level below: stops a lucky all-zero batch on
            # a fine level from starving it of samples
            v = max(v, 0.5 * var[-1] / 2**cfg.beta_floor)
        var.append(v)
    var = np.asarray(var)
    work = np.asarray([rec.W for rec in recs])
    total = np.sum(np.sqrt(var * work))
    target = np.sqrt(var / work) * total / (cfg.error_split * tol**2)
    return [max(cfg.min_samples, int(math.ceil(t))) for t in target]


def _bias(recs: list[LevelRecord], cfg: MlmcConfig) -> float:
    tail = [rec.E for rec in recs[1:][-2:]]
    return max(tail) / (2**cfg.alpha_bias - 1)


def estimate(cfg: MlmcConfig, problem: NestedProblem, rng) -> MlmcResult:
    """Adaptive MLMC loop reaching RMS error ``cfg.tol``.

    Pilot ``m_pilot`` samples on ``l0 .. l0 + 2``; with ``auto_start`` the
    start-level ratio is checked on the pilot and the run restarts one level
    higher whenever it exceeds 1 (discarded work stays in the total). Samples
    are then allocated optimally for the variance share of ``tol^2`` and levels
    are added until the bias estimate meets its share.
    """
    if cfg.tol is None:
        raise ValueError("estimate needs cfg.tol")
    stream = as_stream(rng)
    tol = cfg.tol
    l0 = cfg.first_level
    attempt = 0
    discarded = 0
    bias_target = math.sqrt(1.0 - cfg.error_split) * tol

    while True:
        if l0 + 2 > cfg.max_level:
            raise MaxLevelExceeded(f"first level {l0} leaves no room below max_level={cfg.max_level}")
        rnd = 0
        draw = stream.child(attempt, rnd)
        recs = [run_level(l, cfg.m_pilot, cfg, problem, draw, base=(l == l0)) for l in range(l0, l0 + 3)]
        # the base record is fine-only, so its Vf/Wf are exactly what the ratio needs
        if cfg.auto_start and start_ratio(recs[0], recs[1]) > 1.0:
            discarded += sum(r.inner_work for r in recs)
            l0 += 1
            attempt += 1
            continue
        break

    stale = 0
    while True:
        while True:
            wanted = _allocation(recs, cfg, tol)
            extra = [max(0, w - r.m) for w, r in zip(wanted, recs)]
            if not any(extra):
                break
            rnd += 1
            draw = stream.child(attempt, rnd)
            for i, (rec, dm) in enumerate(zip(recs, extra)):
                if dm:
                    dm = max(dm, math.ceil(0.05 * rec.m))
                    recs[i] = rec.merge(run_level(rec.level, dm, cfg, problem, draw, base=(i == 0)))

        bias = _bias(recs, cfg)
        if bias <= bias_target:
            break
        new_level = recs[-1].level + 1
        if new_level > cfg.max_level:
            raise MaxLevelExceeded(f"bias {bias:.3g} still above {bias_target:.3g} at max_level={cfg.max_level}")
        last, prev = recs[-1], recs[-2]
        if len(recs) > 2 and last.E - 2 * last.stderr >= prev.E:
            stale += 1
            if stale >= 3:
                raise NonconvergentBias(f"level means stopped decreasing at level {last.level}")
        else:
            stale = 0
        rnd += 1
        recs.append(run_level(new_level, cfg.m_pilot, cfg, problem, stream.child(attempt, rnd)))

    est = sum(r.mean for r in recs)
    stat = math.sqrt(sum(r.V / r.m for r in recs))
    work = discarded + sum(r.inner_work for r in recs)
    return MlmcResult(est, recs, l0, stat, bias, work, attempt)


CSV_COLUMNS = ["level", "M", "E", "V", "Ef", "Vf", "W", "R", "wall_time"]


def format_level_table(rows: list[LevelRow], config: dict | None = None, version: str = "",
                       deterministic: bool = False) -> str:
    """CSV text for a level table, preceded by a ``#`` config echo line."""
    buf = io.StringIO()
    buf.write(f"# nestedmlmc {version} {json.dumps(config or {}, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        wall = 0.0 if deterministic else r.wall_time
        w.writerow([r.level, r.M, repr(r.E), repr(r.V), repr(r.Ef), repr(r.Vf), repr(r.W), repr(r.R), repr(wall)])
    return buf.getvalue()


def read_level_table(text: str) -> list[LevelRow]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append(LevelRow(int(rec["level"]), int(rec["M"]), *(float(rec[k]) for k in CSV_COLUMNS[2:])))
    return out


def with_tol(cfg: MlmcConfig, tol: float) -> MlmcConfig:
    return replace(cfg, tol=tol)


__all__ = [
    "CSV_COLUMNS", "LevelRecord", "LevelRow", "MlmcConfig", "MlmcResult", "Rates",
    "Sampling", "convergence_study", "estimate", "first_level_below_one", "fit_rates",
    "format_level_table", "read_level_table", "run_level", "select_start_level", "start_ratio",
    "with_tol",
]
