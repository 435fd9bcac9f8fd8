"""Exponential-Euler ensembles for the mild formulation.

One step maps ``u_n`` to ``E u_n + xi * Q (sigma(u_n) * dF_n)`` where
``E = expm(-dt A)`` is the discrete semigroup and ``Q`` smooths the noise.
With ``Q = E`` this is the plain exponential Euler scheme.  The default
``Q = V diag(sqrt((1 - exp(-2 lam dt)) / (2 lam dt))) V^T`` gives every
eigenmode the variance of the exact stochastic convolution over the step,
which removes the O(dt^(1 - 1/alpha)) second-moment bias that the plain
scheme accumulates in the stiff modes.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolation, ConfigurationError, DataError, InvalidSigmaError, QueryError, ValidationError
from .heatkernel import HeatKernelEvaluator
from .noise import CorrelationModel, NoiseIncrementSampler, dalang_check, make_sampler
from .operator import DomainGrid, GeneratorSpec, build_operator, eigendecompose
from .validation import ValidationReport

log = logging.getLogger(__name__)

NOISE_SCHEMES = ("exact-variance", "exponential-euler")
THREADS_ENV = "FRACHEAT_THREADS"


# --------------------------------------------------------------------------
# sigma


@dataclass(frozen=True)
class SigmaFunction:
    kind: str = "linear"
    c: float = 1.0
    s: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower().replace("_", "-")
        if kind in ("saturatinglinear", "saturating"):
            kind = "saturating-linear"
        if kind not in ("linear", "saturating-linear"):
            raise ValidationError(f"unknown sigma kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    def __call__(self, u):
        if self.kind == "linear":
            return self.c * u
        u2 = u * u
        return self.c * u * (1.0 + self.s * u2 / (1.0 + u2))

    @property
    def lower(self) -> float:
        return abs(self.c)

    @property
    def upper(self) -> float:
        return abs(self.c) * (1.0 + self.s) if self.kind == "saturating-linear" else abs(self.c)

    @property
    def lipschitz(self) -> float:
        # d/du [u^3/(1+u^2)] peaks at 9/8 (u^2 = 3)
        return abs(self.c) * (1.0 + 1.125 * self.s) if self.kind == "saturating-linear" else abs(self.c)

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def to_dict(self):
        d = {"kind": self.kind, "c": float(self.c)}
        if self.kind == "saturating-linear":
            d["s"] = float(self.s)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(str(d.pop("kind", "linear")), **{k: float(v) for k, v in d.items()})


def validate_sigma(sigma: SigmaFunction, n_points: int = 241) -> ValidationReport:
    """Check ``l|x| <= |sigma(x)| <= L|x|`` and the Lipschitz bound on ``+-[1e-6, 1e6]``."""
    if sigma.kind == "saturating-linear" and not (sigma.c > 0 and 0 <= sigma.s < 1):
        raise InvalidSigmaError(f"saturating sigma needs c > 0 and 0 <= s < 1, got c={sigma.c}, s={sigma.s}")
    if not sigma.lower > 0:
        raise InvalidSigmaError("lower constant l_sigma must be strictly positive", witness=1.0)
    pos = np.geomspace(1e-6, 1e6, n_points)
    x = np.concatenate([-pos[::-1], pos])
    y = np.abs(sigma(x))
    ratio = y / np.abs(x)
    rel = 1e-12
    low = np.flatnonzero(ratio < sigma.lower * (1 - rel))
    if low.size:
        raise InvalidSigmaError(f"|sigma(x)| < l_sigma |x| at x={x[low[0]]:.6g}", witness=float(x[low[0]]))
    high = np.flatnonzero(ratio > sigma.upper * (1 + rel))
    if high.size:
        raise InvalidSigmaError(f"|sigma(x)| > L_sigma |x| at x={x[high[0]]:.6g}", witness=float(x[high[0]]))
    slopes = np.abs(np.diff(sigma(x))) / np.diff(x)
    lip = float(np.max(slopes))
    if lip > sigma.lipschitz * (1 + rel):
        k = int(np.argmax(slopes))
        raise InvalidSigmaError(f"Lipschitz bound exceeded between x={x[k]:.6g} and x={x[k+1]:.6g}",
                                witness=float(x[k]))
    report = ValidationReport(f"sigma[{sigma.kind}]")
    report.add("lower bound", True, float(ratio.min()), sigma.lower, "tightest empirical l_sigma")
    report.add("upper bound", True, float(ratio.max()), sigma.upper, "tightest empirical L_sigma")
    report.add("lipschitz", True, lip, sigma.lipschitz)
    return report


# --------------------------------------------------------------------------
# configuration


def initial_condition(name: str, grid: DomainGrid) -> np.ndarray:
    x = grid.nodes
    if name == "cosine":
        return np.cos(0.5 * np.pi * x / grid.R)
    if name == "constant":
        return np.ones_like(x)
    if name == "bump":
        return (np.abs(x) <= 0.5 * grid.R).astype(float)
    raise ValidationError(f"unknown initial condition {name!r}; use cosine, constant or bump")


@dataclass
class SimulationConfig:
    spec: GeneratorSpec
    grid: DomainGrid
    noise: CorrelationModel
    sigma: SigmaFunction
    xi: float
    u0: np.ndarray
    dt: float
    T: float
    M: int
    seed: int = 0
    record_times: tuple = ()
    moment_orders: tuple = (2,)
    mass_set: tuple = (-0.5, 0.5)
    noise_scheme: str = "exact-variance"
    block_size: int = 512
    blowup: float = 1e60

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float)
        if not self.record_times:
            n = int(round(self.T / self.dt))
            every = max(1, n // 20)
            self.record_times = tuple(k * self.dt for k in range(every, n + 1, every))
        self.record_times = tuple(float(t) for t in self.record_times)
        self.moment_orders = tuple(sorted({int(p) if float(p).is_integer() else float(p)
                                           for p in self.moment_orders}))
        self.validate()

    def validate(self):
        if self.u0.shape != (self.grid.N,):
            raise ValidationError(f"u0 must have shape ({self.grid.N},), got {self.u0.shape}")
        if not np.all(np.isfinite(self.u0)) or np.any(self.u0 < 0):
            raise ValidationError("u0 must be finite and non-negative")
        lo, hi = self.mass_set
        in_K = (self.grid.nodes >= lo) & (self.grid.nodes <= hi)
        if not self.grid.h * self.u0[in_K].sum() > 0:
            raise ValidationError(f"initial mass over K=[{lo}, {hi}] must be strictly positive")
        if not self.xi >= 0:
            raise ValidationError(f"noise level xi must be >= 0, got {self.xi}")
        if not (self.dt > 0 and self.T > 0 and self.dt <= self.T):
            raise ValidationError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        if int(self.M) < 2:
            raise ValidationError("need at least two paths")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if any(p < 2 for p in self.moment_orders):
            raise ValidationError("moment orders must be >= 2")
        if self.noise_scheme not in NOISE_SCHEMES:
            raise ValidationError(f"noise scheme must be one of {NOISE_SCHEMES}")
        for t in self.record_times:
            k = t / self.dt
            if t < 0 or t > self.T * (1 + 1e-12) or abs(k - round(k)) > 1e-6:
                raise ValidationError(f"record time {t} is not a step multiple inside [0, T]")
        if list(self.record_times) != sorted(set(self.record_times)):
            raise ValidationError("record times must be strictly increasing")
        if int(self.block_size) < 1:
            raise ValidationError("block size must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def record_steps(self) -> np.ndarray:
        return np.array([int(round(t / self.dt)) for t in self.record_times], dtype=int)

    def to_dict(self):
        return {
            "operator": self.spec.to_dict(), "grid": self.grid.to_dict(),
            "noise": self.noise.to_dict(), "sigma": self.sigma.to_dict(), "xi": float(self.xi),
            "u0": [float(v) for v in self.u0], "dt": float(self.dt), "T": float(self.T),
            "M": int(self.M), "seed": int(self.seed), "record_times": list(self.record_times),
            "moment_orders": list(self.moment_orders), "mass_set": list(self.mass_set),
            "noise_scheme": self.noise_scheme, "block_size": int(self.block_size),
        }


# --------------------------------------------------------------------------
# propagators and the step


def _relaxation(z):
    """``(1 - exp(-z)) / z`` evaluated stably (equals 1 at z = 0)."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 - z / 2 + z * z / 6, -np.expm1(-zs) / zs)


def noise_propagator(ev: HeatKernelEvaluator, dt: float, scheme: str = "exact-variance") -> np.ndarray:
    if scheme == "exponential-euler":
        return ev.semigroup_matrix(dt)
    if scheme != "exact-variance":
        raise ValidationError(f"unknown noise scheme {scheme!r}")
    lam = np.asarray(ev.spectrum.eigenvalues)
    V = ev.spectrum.orthonormal
    q = np.sqrt(_relaxation(2.0 * lam * dt))
    Q = (V * q) @ V.T
    return 0.5 * (Q + Q.T)


def step(state, xi, sigma, propagator, increment, noise_propagator=None):
    """One mild-form step; ``state`` may be ``(N,)`` or ``(N, paths)``.

    ``propagator`` is ``h P(dt)`` (the semigroup matrix), so the noise term
    ``xi sum_j P_ij sigma(u_j) dF_j h`` is ``xi * propagator @ (sigma * dF)``.
    """
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise DataError("state contains non-finite entries")
    Q = propagator if noise_propagator is None else noise_propagator
    out = propagator @ state
    if xi != 0:
        out = out + xi * (Q @ (sigma(state) * increment))
    return out


# --------------------------------------------------------------------------
# ensembles


def _neumaier_add(total, comp, x):
    t = total + x
    big = np.abs(total) >= np.abs(x)
    comp += np.where(big, (total - t) + x, (x - t) + total)
    return t


@dataclass
class EnsembleSummary:
    """Path-ordered power sums of ``|u_t(x)|`` at the record times."""

    times: np.ndarray
    nodes: np.ndarray
    h: float
    powers: tuple
    abs_sums: np.ndarray      # (n_rec, n_pow, N)
    signed_sum: np.ndarray    # (n_rec, N)
    energy_sums: np.ndarray   # (n_rec, 2): sum of ||u||^2 and of ||u||^4
    counts: np.ndarray        # (n_rec,) paths still finite
    M: int
    moment_orders: tuple
    diverged: list = field(default_factory=list)
    negative_fraction: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def _col(self, p):
        try:
            return self.powers.index(p)
        except ValueError:
            raise QueryError(f"moment order {p} was not recorded (have {self.powers})") from None

    @property
    def diverged_count(self) -> int:
        return len(self.diverged)

    @property
    def status(self) -> str:
        frac = self.diverged_count / self.M
        if frac > 0.5:
            return "unusable"
        if frac > 0.01:
            return "warning"
        return "ok"

    def moment(self, p):
        """Sample ``E|u_t(x)|^p`` and its standard error, shapes ``(n_rec, N)``."""
        if p not in self.moment_orders and p != 2:
            raise QueryError(f"moment order {p} not among the run's orders {self.moment_orders}")
        n = self.counts[:, None].astype(float)
        m = self.abs_sums[:, self._col(p)] / n
        m2 = self.abs_sums[:, self._col(2 * p)] / n
        var = np.maximum(m2 - m * m, 0.0) * n / np.maximum(n - 1, 1)
        return m, np.sqrt(var / n)

    def mean(self):
        n = self.counts[:, None].astype(float)
        m = self.signed_sum / n
        sq = self.abs_sums[:, self._col(2)] / n
        var = np.maximum(sq - m * m, 0.0) * n / np.maximum(n - 1, 1)
        return m, np.sqrt(var / n)

    def energy_squared(self):
        """``E ||u_t||^2`` with its standard error, shape ``(n_rec,)``."""
        n = self.counts.astype(float)
        e = self.energy_sums[:, 0] / n
        e2 = self.energy_sums[:, 1] / n
        var = np.maximum(e2 - e * e, 0.0) * n / np.maximum(n - 1, 1)
        return e, np.sqrt(var / n)

    def cauchy_schwarz_gap(self):
        """Minimum of ``S4/M - (S2/M)^2`` relative to ``S4/M`` (>= 0 up to rounding)."""
        n = self.counts[:, None].astype(float)
        m4 = self.abs_sums[:, self._col(4)] / n
        m2 = self.abs_sums[:, self._col(2)] / n
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(m4 > 0, (m4 - m2 * m2) / m4, 0.0)
        return float(np.min(rel))

    def to_dict(self):
        out = {
            "times": self.times.tolist(), "nodes": self.nodes.tolist(), "h": self.h,
            "powers": list(self.powers), "M": self.M, "moment_orders": list(self.moment_orders),
            "counts": self.counts.tolist(), "diverged": [list(d) for d in self.diverged],
            "diverged_count": self.diverged_count, "status": self.status,
            "negative_fraction": None if self.negative_fraction is None else self.negative_fraction.tolist(),
            "moments": {},
            "meta": self.meta,
        }
        for p in sorted(set(self.moment_orders) | {2}):
            m, se = self.moment(p)
            out["moments"][str(p)] = {"value": m.tolist(), "stderr": se.tolist()}
        m, se = self.mean()
        out["mean"] = {"value": m.tolist(), "stderr": se.tolist()}
        return out


def _powers_for(orders):
    ps = {1, 2, 4, 8}
    for p in orders:
        ps.add(p)
        ps.add(2 * p)
    return tuple(sorted(ps))


def resolve_threads(threads=None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else 1
    threads = int(threads)
    if threads < 1:
        raise ConfigurationError("thread count must be >= 1")
    return threads


class _Runner:
    def __init__(self, cfg: SimulationConfig, ev: HeatKernelEvaluator, sampler: NoiseIncrementSampler):
        self.cfg = cfg
        self.E = np.ascontiguousarray(ev.semigroup_matrix(cfg.dt))
        self.Q = np.ascontiguousarray(noise_propagator(ev, cfg.dt, cfg.noise_scheme))
        self.sampler = sampler
        self.powers = _powers_for(cfg.moment_orders)
        self.rec = {int(s): k for k, s in enumerate(cfg.record_steps)}

    def block(self, b):
        cfg = self.cfg
        N = cfg.grid.N
        h = cfg.grid.h
        start = b * cfg.block_size
        n = min(cfg.block_size, cfg.M - start)
        n_rec = len(self.rec)
        abs_sums = np.zeros((n_rec, len(self.powers), N))
        signed = np.zeros((n_rec, N))
        energy = np.zeros((n_rec, 2))
        counts = np.zeros(n_rec, dtype=np.int64)
        negative = np.zeros(n_rec)
        diverged = []
        alive = np.ones(n, dtype=bool)
        U = np.repeat(cfg.u0[:, None], n, axis=1)

        def record(k):
            live = U[:, alive]
            counts[k] = live.shape[1]
            a = np.abs(live)
            for j, p in enumerate(self.powers):
                abs_sums[k, j] = (a**p).sum(axis=1)
            signed[k] = live.sum(axis=1)
            e = h * (live * live).sum(axis=0)
            energy[k, 0] = e.sum()
            energy[k, 1] = (e * e).sum()
            negative[k] = float((live < 0).sum())

        if 0 in self.rec:
            record(self.rec[0])
        for s in range(cfg.n_steps):
            if cfg.xi != 0:
                dF = self.sampler.sample_block(cfg.dt, s, start, n)
                U = self.E @ U + cfg.xi * (self.Q @ (cfg.sigma(U) * dF))
            else:
                U = self.E @ U
            bad = ~(np.all(np.isfinite(U), axis=0) & (np.max(np.abs(U), axis=0) < cfg.blowup)) & alive
            if bad.any():
                for p in np.flatnonzero(bad):
                    diverged.append((start + int(p), s + 1))
                alive &= ~bad
                U[:, bad] = 0.0
            k = self.rec.get(s + 1)
            if k is not None:
                record(k)
        return abs_sums, signed, energy, counts, negative, diverged


def simulate_ensemble(cfg: SimulationConfig, threads=None, evaluator: HeatKernelEvaluator | None = None,
                      sampler: NoiseIncrementSampler | None = None) -> EnsembleSummary:
    """Run ``cfg.M`` independent paths and reduce their moments in path order.

    Paths are grouped in fixed blocks of ``cfg.block_size``; blocks run on a
    thread pool and their partial sums are combined in block order with
    compensated summation, so the result is independent of ``threads``.
    """
    threads = resolve_threads(threads)
    if not cfg.sigma.lower > 0:
        validate_sigma(cfg.sigma)
    verdict = dalang_check(cfg.noise, cfg.spec.alpha_eff)
    if not verdict.passed:
        raise AssumptionViolation(f"Dalang condition fails for {cfg.noise.label} at alpha={cfg.spec.alpha_eff}: {verdict.reason}")
    if evaluator is None:
        evaluator = HeatKernelEvaluator(eigendecompose(build_operator(cfg.spec, cfg.grid), extrapolate=False))
    mu1 = evaluator.mu1
    if mu1 != 0 and cfg.dt > 0.1 / abs(mu1) * (1 + 1e-12):
        raise ConfigurationError(f"dt={cfg.dt} exceeds the accuracy guard 0.1/mu1={0.1 / abs(mu1):.4g}")
    if sampler is None:
        sampler = make_sampler(cfg.noise, cfg.grid, cfg.seed)
    elif sampler.seed != cfg.seed:
        sampler = sampler.with_seed(cfg.seed)

    runner = _Runner(cfg, evaluator, sampler)
    n_blocks = -(-cfg.M // cfg.block_size)
    if threads == 1:
        parts = [runner.block(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(runner.block, range(n_blocks)))

    n_rec = len(cfg.record_times)
    N = cfg.grid.N
    tot = [np.zeros((n_rec, len(runner.powers), N)), np.zeros((n_rec, N)), np.zeros((n_rec, 2))]
    comp = [np.zeros_like(a) for a in tot]
    counts = np.zeros(n_rec, dtype=np.int64)
    negative = np.zeros(n_rec)
    diverged = []
    for abs_sums, signed, energy, cnt, neg, div in parts:
        for i, x in enumerate((abs_sums, signed, energy)):
            tot[i] = _neumaier_add(tot[i], comp[i], x)
        counts += cnt
        negative += neg
        diverged.extend(div)
    tot = [a + c for a, c in zip(tot, comp)]
    with np.errstate(invalid="ignore", divide="ignore"):
        neg_frac = np.where(counts > 0, negative / (counts * N), 0.0)
    summary = EnsembleSummary(
        times=np.asarray(cfg.record_times), nodes=cfg.grid.nodes, h=cfg.grid.h,
        powers=runner.powers, abs_sums=tot[0], signed_sum=tot[1], energy_sums=tot[2],
        counts=counts, M=int(cfg.M), moment_orders=cfg.moment_orders, diverged=diverged,
        negative_fraction=neg_frac,
        meta={"noise_scheme": cfg.noise_scheme, "block_size": cfg.block_size, "seed": int(cfg.seed),
              "dalang_margin": verdict.margin, "noise_floor": sampler.floor_label, "jitter": sampler.jitter},
    )
    if summary.status != "ok":
        log.warning("%d of %d paths diverged (status %s)", summary.diverged_count, cfg.M, summary.status)
    return summary
