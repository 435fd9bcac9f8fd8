"""Moment Lyapunov exponents, noise-level sweeps and the Laplace probe."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AnalysisError, ValidationError
from .heatkernel import HeatKernelEvaluator
from .moments import EnergyCurve, MomentCurve, estimate_moments, solve_volterra
from .noise import make_sampler
from .sde import SimulationConfig, simulate_ensemble

log = logging.getLogger(__name__)

MIN_POINTS = 5
R2_FLOOR = 0.9


@dataclass(frozen=True)
class ExponentEstimate:
    rate: float
    stderr: float
    r2: float
    window: tuple
    p: float
    x: object
    n_points: int
    excluded: int = 0
    intercept: float = 0.0

    @property
    def status(self) -> str:
        return "unresolved" if self.r2 < R2_FLOOR else "ok"

    @property
    def resolved(self) -> bool:
        return self.status == "ok"

    def to_dict(self):
        return {"rate": self.rate, "stderr": self.stderr, "R2": self.r2, "window": list(self.window),
                "p": self.p, "x": self.x, "n_points": self.n_points, "excluded": self.excluded,
                "intercept": self.intercept, "status": self.status}


def _ols(t, y, sigma=None):
    """Slope, intercept, slope stderr and R^2 of ``y ~ a + b t``."""
    n = t.size
    tm = t.mean()
    dt = t - tm
    sxx = float(dt @ dt)
    if sxx <= 0:
        raise AnalysisError("fit window has no spread in time")
    slope = float(dt @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * tm)
    resid = y - (intercept + slope * t)
    ssr = float(resid @ resid)
    sst = float((y - y.mean()) @ (y - y.mean()))
    tiny = 1e-24 * n * max(1.0, float(np.max(np.abs(y))) ** 2)  # exact fit up to round-off
    r2 = 1.0 if ssr <= tiny or sst <= tiny else 1.0 - ssr / sst
    var = ssr / (n - 2) / sxx if n > 2 else 0.0
    if sigma is not None:
        w = dt / sxx
        var += float(np.sum((w * sigma) ** 2))
    return slope, intercept, math.sqrt(max(var, 0.0)), r2


def _window(times, window):
    times = np.asarray(times, dtype=float)
    if window is None:
        T = float(times[-1])
        return 0.5 * T, T
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValidationError(f"fit window must have t_lo < t_hi, got {window}")
    return lo, hi


def fit_series(times, values, window=None, stderr=None, p=2, x=None, extra_error=0.0) -> ExponentEstimate:
    """Least-squares slope of ``log values`` against ``t`` on a window."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = _window(times, window)
    sel = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    usable = sel & np.isfinite(values) & (values > 0)
    excluded = int(sel.sum() - usable.sum())
    if usable.sum() < MIN_POINTS:
        raise AnalysisError(f"fit window [{lo:g}, {hi:g}] has {int(usable.sum())} usable points; need {MIN_POINTS}")
    t = times[usable]
    y = np.log(values[usable])
    sig = None
    if stderr is not None:
        sig = np.asarray(stderr, dtype=float)[usable] / values[usable]
    slope, intercept, se, r2 = _ols(t, y, sig)
    se = math.hypot(se, extra_error)
    return ExponentEstimate(slope, se, r2, (lo, hi), p, x, int(usable.sum()), excluded, intercept)


def fit_exponent(curve, window=None, x=0.0) -> ExponentEstimate:
    """Growth rate of ``log E|u_t(x)|^p`` (or of ``log E_t`` for an energy curve).

    Oracle curves carry their quadrature error as an additive log error;
    Monte Carlo curves propagate the per-time standard errors through the
    regression weights.
    """
    if isinstance(curve, EnergyCurve):
        return fit_series(curve.times, curve.values, window, curve.stderr, 2, "energy")
    if not isinstance(curve, MomentCurve):
        raise ValidationError(f"cannot fit a {type(curve).__name__}")
    vals, se = curve.at(x)
    lo, hi = _window(curve.times, window)
    extra = 0.0
    if curve.quadrature_error:
        extra = 2.0 * curve.quadrature_error / (hi - lo)
    node = float(curve.nodes[int(np.argmin(np.abs(curve.nodes - x)))])
    return fit_series(curve.times, vals, (lo, hi), se, curve.p, node, extra)


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepProblem:
    """Everything but ``xi`` needed to produce a moment curve.

    For the oracle method ``sigma_slope`` is the slope of linear sigma and
    ``noise`` a correlation model; for Monte Carlo ``base`` is a simulation
    config whose ``xi`` is replaced at each sweep point.
    """

    evaluator: HeatKernelEvaluator | None = None
    u0: np.ndarray | None = None
    noise: object = None
    sigma_slope: float = 1.0
    dt: float = 1e-2
    T: float = 5.0
    n_records: int = 41
    window: tuple | None = None
    x: object = 0.0
    p: float = 2
    base: SimulationConfig | None = None
    epsilon: float = 0.2
    sampler: object = None

    def record_times(self):
        n = int(round(self.T / self.dt))
        k = max(1, n // (self.n_records - 1))
        steps = np.arange(0, n + 1, k)
        if steps[-1] != n:
            steps = np.append(steps, n)
        return [float(s * self.dt) for s in steps]


@dataclass
class PhaseDiagram:
    xis: list
    estimates: list
    bracket: tuple | None
    method: str
    p: float
    status: str
    curves: dict = field(default_factory=dict)

    @property
    def rates(self) -> np.ndarray:
        return np.array([e.rate for e in self.estimates])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([e.stderr for e in self.estimates])

    @property
    def bracket_width(self) -> float:
        return math.inf if self.bracket is None else self.bracket[1] - self.bracket[0]

    def monotone(self, k: float = 2.0) -> bool:
        """Rates nondecreasing in ``xi`` up to ``k`` combined standard errors."""
        r, s = self.rates, self.stderrs
        drops = r[:-1] - r[1:]
        return bool(np.all(drops <= k * np.hypot(s[:-1], s[1:]) + 1e-12))

    def to_dict(self):
        return {"xis": list(self.xis), "estimates": [e.to_dict() for e in self.estimates],
                "bracket": None if self.bracket is None else list(self.bracket),
                "bracket_width": self.bracket_width, "method": self.method, "p": self.p,
                "status": self.status, "monotone": self.monotone()}

    def csv_rows(self):
        for xi, e in zip(self.xis, self.estimates):
            yield (repr(float(xi)), repr(e.rate), repr(e.stderr), repr(e.r2), e.status)


def _oracle_curve(problem: SweepProblem, xi: float) -> MomentCurve:
    if problem.p != 2:
        raise ValidationError("the oracle method only provides second moments")
    noise = problem.sampler if problem.sampler is not None else problem.noise
    return solve_volterra(problem.evaluator, problem.u0, xi, problem.sigma_slope, noise,
                          problem.dt, problem.T, problem.record_times())


def _mc_curve(problem: SweepProblem, xi: float, threads: int) -> MomentCurve:
    cfg = replace(problem.base, xi=float(xi))
    summary = simulate_ensemble(cfg, threads=threads, evaluator=problem.evaluator, sampler=problem.sampler)
    curve, energy = estimate_moments(summary, problem.p, problem.epsilon)
    curve.energy_curve = energy
    return curve


def _rate(problem, curve):
    if problem.x == "energy":
        energy = getattr(curve, "energy_curve", None) or curve.energy()
        return fit_exponent(energy, problem.window)
    return fit_exponent(curve, problem.window, float(problem.x))


def xi_sweep(problem: SweepProblem, xis, method: str = "oracle", bisect: bool = True, tol: float = 0.1,
             threads: int = 1, max_rounds: int = 30) -> PhaseDiagram:
    """Rates over a ``xi`` grid, then bisection on the first sign change."""
    if method not in ("oracle", "monte-carlo"):
        raise ValidationError(f"unknown sweep method {method!r}")
    xis = sorted(float(x) for x in xis)
    if len(xis) < 2 or xis[0] < 0:
        raise ValidationError("need at least two non-negative xi values")
    if method == "monte-carlo":
        if problem.base is None:
            raise ValidationError("monte-carlo sweep needs a base simulation config")
        if problem.sampler is None:
            problem.sampler = make_sampler(problem.base.noise, problem.base.grid, problem.base.seed)
        threads_inner, threads_outer = threads, 1
    else:
        if problem.evaluator is None or problem.u0 is None:
            raise ValidationError("oracle sweep needs an evaluator and u0")
        if problem.noise is not None and getattr(problem.noise, "colored", False) and problem.sampler is None:
            problem.sampler = make_sampler(problem.noise, problem.evaluator.grid)
        threads_inner, threads_outer = 1, threads

    def evaluate(xi):
        curve = _oracle_curve(problem, xi) if method == "oracle" else _mc_curve(problem, xi, threads_inner)
        return curve, _rate(problem, curve)

    results = {}
    if threads_outer > 1:
        with ThreadPoolExecutor(max_workers=threads_outer) as pool:
            for xi, res in zip(xis, pool.map(evaluate, xis)):
                results[xi] = res
    else:
        for xi in xis:
            results[xi] = evaluate(xi)

    def bracket_of():
        keys = sorted(results)
        for a, b in zip(keys[:-1], keys[1:]):
            if results[a][1].rate < 0 < results[b][1].rate:
                return a, b
        return None

    br = bracket_of()
    status = "crossover bracketed" if br else "no crossover in range"
    if br and bisect:
        for _ in range(max_rounds):
            lo, hi = br
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            results[mid] = evaluate(mid)
            est = results[mid][1]
            if method == "monte-carlo" and abs(est.rate) < 2 * est.stderr:
                status = "crossover within noise at midpoint"
                break
            br = (lo, mid) if est.rate > 0 else (mid, hi)
        else:
            status = "bisection round limit reached"
    keys = sorted(results)
    return PhaseDiagram(keys, [results[k][1] for k in keys], br, method, problem.p, status,
                        {k: results[k][0] for k in keys})


# --------------------------------------------------------------------------
# Laplace probe


@dataclass(frozen=True)
class LaplaceProbe:
    beta: float
    value: float
    quadrature_part: float
    tail: float
    tail_rate: float
    tail_r2: float
    verdict: str

    def to_dict(self):
        return {k: getattr(self, k) for k in ("beta", "value", "quadrature_part", "tail", "tail_rate",
                                              "tail_r2", "verdict")}


def _exp_linear_integral(t, f, beta):
    """Exact ``int e^(-beta t) f(t) dt`` for piecewise-linear ``f``."""
    total = 0.0
    for a, b, fa, fb in zip(t[:-1], t[1:], f[:-1], f[1:]):
        L = b - a
        z = beta * L
        if abs(z) < 1e-6:
            wa = L * (0.5 - z / 6)
            wb = L * (0.5 - z / 3)
        else:
            em = math.exp(-z)
            wb = L * (1.0 - em * (1.0 + z)) / z**2
            wa = L * (1.0 - em) / z - wb
        total += math.exp(-beta * a) * (wa * fa + wb * fb)
    return total


def laplace_probe(curve: MomentCurve, beta: float, epsilon: float = 0.2, R: float | None = None,
                  window=None) -> LaplaceProbe:
    """``int_0^inf e^(-beta t) inf_(|x| <= R - eps) E|u_t(x)|^2 dt`` with a fitted tail."""
    if not beta > 0:
        raise ValidationError(f"beta must be > 0, got {beta}")
    f = curve.interior_min(epsilon, R)
    t = curve.times
    part = _exp_linear_integral(t, f, beta)
    try:
        est = fit_series(t, f, window)
    except AnalysisError:
        return LaplaceProbe(beta, math.nan, part, math.nan, math.nan, math.nan, "inconclusive")
    if not est.resolved:
        return LaplaceProbe(beta, math.nan, part, math.nan, est.rate, est.r2, "inconclusive")
    if est.rate >= beta:
        return LaplaceProbe(beta, math.inf, part, math.inf, est.rate, est.r2, "divergent")
    tail = float(f[-1]) * math.exp(-beta * t[-1]) / (beta - est.rate)
    return LaplaceProbe(beta, part + tail, part, tail, est.rate, est.r2, "convergent")
