"""Dirichlet heat kernel built from the eigenpairs of ``-L``.

``P(t)[i, j] = sum_k exp(-lambda_k t) phi_k(x_i) phi_k(x_j)`` is the kernel
density; the semigroup acting on grid functions is ``h * P(t)``, which is
exactly ``expm(-t A)``.
"""
from __future__ import annotations

import math
import warnings
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import AnalysisError, DataError, ValidationError
from .operator import DomainGrid, SpectralDecomposition

LEMMAS = ("L21", "L22", "L23", "L24")


class HeatKernelEvaluator:
    """Kernel evaluations with a thread-safe propagator cache."""

    def __init__(self, spectrum: SpectralDecomposition):
        self.spectrum = spectrum
        self.grid: DomainGrid = spectrum.grid
        self._V = spectrum.orthonormal
        self._lam = np.asarray(spectrum.eigenvalues)
        self._cache: dict[float, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def mu1(self) -> float:
        return self.spectrum.mu1

    @property
    def alpha(self) -> float:
        return self.spectrum.spec.alpha_eff

    def semigroup_matrix(self, t: float) -> np.ndarray:
        """``expm(-t A) = h P(t)`` (cached, read-only)."""
        t = float(t)
        with self._lock:
            hit = self._cache.get(t)
        if hit is not None:
            return hit
        E = (self._V * np.exp(-self._lam * t)) @ self._V.T
        E = 0.5 * (E + E.T)
        E.setflags(write=False)
        with self._lock:
            return self._cache.setdefault(t, E)

    def propagator(self, t: float) -> np.ndarray:
        if t <= 0:
            raise ValidationError(f"kernel time must be positive, got {t}")
        return self.semigroup_matrix(t) / self.grid.h

    def diagonal(self, t) -> np.ndarray:
        """``p_D(t, x_i, x_i)`` for every node; ``t`` may be an array (rows)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (np.exp(-np.outer(t, self._lam)) @ (self._V**2).T) / self.grid.h

    def entries(self, t, i, j) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-np.outer(t, self._lam)) @ (self._V[i] * self._V[j]) / self.grid.h


def evaluate_kernel(ev: HeatKernelEvaluator, t: float, i: int, j: int) -> float:
    if not t > 0:
        raise ValidationError(f"kernel time must be positive, got {t}")
    return float(ev.propagator(t)[i, j])


def apply_semigroup(ev: HeatKernelEvaluator, t: float, v) -> np.ndarray:
    """``(G_D v)_t = h * P(t) v``; the identity at ``t = 0``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DataError("grid function contains non-finite entries")
    if t < 0:
        raise ValidationError(f"semigroup time must be >= 0, got {t}")
    if t == 0:
        return v.copy()
    return ev.semigroup_matrix(t) @ v


def kernel_mass(ev: HeatKernelEvaluator, t: float) -> np.ndarray:
    """Row masses ``h * sum_j P(t)_{ij}`` (survival probabilities)."""
    return ev.semigroup_matrix(t).sum(axis=1)


def chapman_kolmogorov_error(ev: HeatKernelEvaluator, t: float, s: float) -> float:
    lhs = ev.propagator(t + s)
    rhs = ev.propagator(t) @ (ev.grid.h * ev.propagator(s))
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs))


# --------------------------------------------------------------------------
# kernel bounds


@dataclass
class KernelBoundReport:
    c1_small_t: float
    c2_small_t: float
    small_t_exponent: float
    small_t_window: tuple[float, float]
    mu1_fit: float
    mu1: float
    c1_long: float
    c2_long: float
    t0: float
    epsilon: float
    band: float
    interior_nodes: int

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _loglog_slope(t, y):
    slope, intercept = np.polyfit(np.log(t), np.log(y), 1)
    return float(slope), float(intercept)


def verify_kernel_bounds(ev: HeatKernelEvaluator, epsilon: float, band: float = 10.0,
                         small_t=None, n_times: int = 400) -> KernelBoundReport:
    """Measure the constants of the small-time and long-time kernel bounds.

    ``t0`` is the first time after which every interior pair satisfies
    ``1/band <= exp(mu1 t) p_D(t,x,y) / (phi_1(x) phi_1(y)) <= band`` for the
    rest of the scanned horizon ``(0, 20/mu1]``.  The default small-time
    window starts at ``5 h^alpha`` so the kernel width spans several cells.
    The lower small-time constant is only meaningful for ``alpha < 2``; the
    Gaussian kernel decays faster than any power off the diagonal.
    """
    grid = ev.grid
    if not 0 < epsilon < grid.R:
        raise ValidationError(f"epsilon must lie in (0, R={grid.R}), got {epsilon}")
    mu1 = ev.mu1
    if mu1 <= 0:
        raise AnalysisError("long-time bounds need a positive principal eigenvalue")
    alpha = ev.alpha
    if small_t is None:
        lo = 5.0 * grid.h**alpha
        small_t = (lo, max(0.05 * grid.R**alpha, 4.0 * lo))
    x = grid.nodes
    inner = np.flatnonzero(grid.interior_mask(epsilon))
    if inner.size < 2:
        raise AnalysisError(f"fewer than two nodes inside B_(R-eps) for eps={epsilon}; refine the grid")

    # small-time window: on-diagonal scaling and two-sided free-space shape
    ts = np.geomspace(small_t[0], small_t[1], 25)
    if ts.size < 5:
        raise AnalysisError("small-time window too short; widen the t range")
    center = grid.index_of(0.0)
    diag_c = ev.diagonal(ts)[:, center]
    exponent, _ = _loglog_slope(ts, diag_c)
    dist = np.abs(np.subtract.outer(x, x))
    c_hi, c_lo = 0.0, np.inf
    for t in ts:
        P = np.maximum(ev.propagator(t), 0.0)
        with np.errstate(divide="ignore"):
            shape = np.minimum(t ** (-1.0 / alpha), np.where(dist > 0, t / dist ** (1 + alpha), np.inf))
        c_hi = max(c_hi, float(np.max(P / shape)))
        if t <= epsilon**alpha:
            sub = (P / shape)[np.ix_(inner, inner)]
            c_lo = min(c_lo, float(np.min(sub)))
    if not np.isfinite(c_lo):
        c_lo = float("nan")

    # long-time rate from the central diagonal entry on [5, 10]/mu1
    tl = np.linspace(5.0 / mu1, 10.0 / mu1, 21)
    slope, _ = np.polyfit(tl, np.log(ev.diagonal(tl)[:, center]), 1)
    mu1_fit = -float(slope)

    # t0 from the relative band, then the two-sided constants after t0
    T_end = 20.0 / mu1
    times = np.concatenate([np.geomspace(1e-3 / mu1, 1.0 / mu1, n_times // 4, endpoint=False),
                            np.linspace(1.0 / mu1, T_end, n_times - n_times // 4)])
    phi1 = ev.spectrum.eigenvectors[:, 0]
    limit = np.outer(phi1[inner], phi1[inner])
    ok = np.empty(times.size, dtype=bool)
    scaled_inner = np.empty(times.size)
    scaled_all_max = np.empty(times.size)
    for n, t in enumerate(times):
        S = math.exp(mu1 * t) * ev.propagator(t)
        Si = S[np.ix_(inner, inner)]
        r = Si / limit
        ok[n] = np.all((r >= 1.0 / band) & (r <= band))
        scaled_inner[n] = np.min(Si)
        scaled_all_max[n] = np.max(S)
    bad = np.flatnonzero(~ok)
    if bad.size and bad[-1] == times.size - 1:
        raise AnalysisError("kernel never settles into the two-sided band; extend the time range")
    first = 0 if bad.size == 0 else bad[-1] + 1
    t0 = float(times[first])
    c1_long = float(np.min(scaled_inner[first:]))
    c2_long = float(np.max(scaled_all_max[first:]))
    return KernelBoundReport(
        c1_small_t=c_hi, c2_small_t=c_lo, small_t_exponent=exponent,
        small_t_window=(float(small_t[0]), float(small_t[1])),
        mu1_fit=mu1_fit, mu1=mu1, c1_long=c1_long, c2_long=c2_long, t0=t0,
        epsilon=float(epsilon), band=float(band), interior_nodes=int(inner.size),
    )


# --------------------------------------------------------------------------
# Laplace-type time integrals


@dataclass
class LemmaReport:
    lemma_id: str
    beta: float
    points: tuple
    correlation: str | None
    value: float
    finite: bool
    verdict: str
    quadrature_error: float
    tail: float
    tail_from: float
    horizon: float
    lower_bound: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = dict(self.__dict__)
        d["points"] = list(self.points)
        return d

    def csv_row(self):
        return {
            "lemma": self.lemma_id, "beta": self.beta,
            "points": " ".join(f"{p:.6g}" for p in self.points),
            "value": self.value, "finite": self.finite, "verdict": self.verdict,
            "quadrature_error": self.quadrature_error, "tail": self.tail,
            "lower_bound": "" if self.lower_bound is None else self.lower_bound,
        }


def _panels(t_lo, t_hi, grade=True):
    """Breakpoints geometrically graded toward ``t_lo = 0``."""
    if not grade or t_lo > 0:
        return [t_lo, t_hi]
    pts = [t_hi * 2.0**-j for j in range(0, 40)]
    return [0.0] + sorted(pts)


def _integrate(f, a, b, grade):
    pts = _panels(a, b, grade)
    total = err = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        # roundoff near the relative tolerance is reported through ``e``
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, e = integrate.quad(f, lo, hi, limit=200, epsabs=0.0, epsrel=1e-10)
        total += val
        err += e
    return total, err


def lemma_integral(ev: HeatKernelEvaluator, lemma_id: str, beta: float, points,
                   correlation=None, bounds: KernelBoundReport | None = None,
                   t_split: float | None = None, horizon_factor: float = 20.0) -> LemmaReport:
    """Quadrature of the Laplace-type kernel integrals.

    ``points`` are physical positions snapped to the nearest nodes: one point
    for L21/L22, ``(x1, x2)`` for L23, ``(x1, y1, x2, y2)`` for L24.  The
    integral runs on ``[0, horizon_factor/mu1]`` with geometric panels near
    zero; the exponential tail beyond uses the fitted rate from ``bounds``
    when supplied.  ``correlation`` is the assembled covariance matrix (or a
    sampler carrying one) for L23.
    """
    lemma_id = lemma_id.upper()
    if lemma_id not in LEMMAS:
        raise ValidationError(f"unknown lemma {lemma_id!r}; expected one of {LEMMAS}")
    beta = float(beta)
    grid = ev.grid
    mu1 = bounds.mu1_fit if bounds is not None else ev.mu1
    lam = np.asarray(ev.spectrum.eigenvalues)
    phi = ev.spectrum.eigenvectors
    h = grid.h
    pts = tuple(float(p) for p in np.atleast_1d(points))
    idx = [grid.index_of(p) for p in pts]
    T = horizon_factor / mu1
    if t_split is None:
        t_split = bounds.t0 if bounds is not None else 1.0 / mu1
    corr_name = None
    lower = None
    extras = {}

    if lemma_id == "L21":
        if ev.alpha <= 1.0:
            raise ValidationError("L21 needs alpha > 1 (t^(-1/alpha) must be integrable at 0)")
        if len(idx) != 1:
            raise ValidationError("L21 takes a single point x")
        w = phi[idx[0]] ** 2
        f = lambda t: float(np.dot(np.exp((beta - lam) * t), w))
        tail_rate = mu1 - beta
        in_range = 0.0 < beta < mu1
        grade = True
    elif lemma_id == "L22":
        if len(idx) != 1:
            raise ValidationError("L22 takes a single point x")
        w = phi[idx[0]] * (h * phi.sum(axis=0))
        ts = np.concatenate([np.geomspace(1e-6 * T, T, 400), np.linspace(0, T, 400)[1:]])
        ts.sort()
        vals = np.exp(beta * ts) * (np.exp(-np.outer(ts, lam)) @ w)
        sup = float(np.max(vals))
        in_range = 0.0 < beta < mu1
        # a sup still growing at the horizon is unbounded for beta >= mu1
        growing = vals[-1] >= vals[-2] and vals[-1] >= 0.999 * sup
        finite = in_range and not growing
        verdict = "finite" if finite else ("hypothesis-violated" if not in_range else "unbounded")
        return LemmaReport("L22", beta, pts, None, sup, finite, verdict, 0.0, float(vals[-1]), T, T,
                           extras={"argmax_t": float(ts[np.argmax(vals)])})
    elif lemma_id == "L23":
        if len(idx) != 2:
            raise ValidationError("L23 takes two points (x1, x2)")
        C = getattr(correlation, "covariance", correlation)
        if C is None:
            raise ValidationError("L23 needs a correlation (covariance matrix or sampler)")
        C = np.asarray(C, dtype=float)
        corr_name = getattr(getattr(correlation, "model", None), "label", "matrix")
        B = h * h * (phi.T @ C @ phi)
        a1, a2 = phi[idx[0]], phi[idx[1]]
        W = np.outer(a1, a2) * B

        def f(t):
            e = np.exp(-lam * t)
            return math.exp(beta * t) * float(e @ W @ e)

        tail_rate = 2.0 * mu1 - beta
        in_range = 0.0 < beta < 2.0 * mu1
        grade = False
    else:  # L24
        if len(idx) != 4:
            raise ValidationError("L24 takes four points (x1, y1, x2, y2)")
        w1 = phi[idx[0]] * phi[idx[1]]
        w2 = phi[idx[2]] * phi[idx[3]]

        def f(t):
            e = np.exp(-lam * t)
            return math.exp(-beta * t) * float(e @ w1) * float(e @ w2)

        tail_rate = beta + 2.0 * mu1
        in_range = beta > 0.0
        grade = True
        if bounds is not None:
            eps = bounds.epsilon
            interior = all(abs(grid.nodes[i]) <= grid.R - eps + 1e-12 for i in idx)
            extras["interior"] = interior
            if interior:
                lower = bounds.c1_long**2 * math.exp(-(beta + 2 * mu1) * bounds.t0) / (beta + 2 * mu1)

    head, err = _integrate(f, 0.0, T, grade)
    fT = f(T)
    if tail_rate > 0:
        tail_beyond = fT / tail_rate
    else:
        tail_beyond = math.inf
    split = min(max(float(t_split), 0.0), T)
    mid, err2 = _integrate(f, split, T, False) if split < T else (0.0, 0.0)
    tail_part = mid + tail_beyond

    finite = in_range and math.isfinite(tail_beyond)
    if finite:
        value = head + tail_beyond
        verdict = "finite"
    else:
        value = head
        verdict = "hypothesis-violated" if not in_range else "divergent"
    return LemmaReport(lemma_id, beta, pts, corr_name, float(value), bool(finite), verdict,
                       float(err + (abs(tail_beyond) * 1e-8 if math.isfinite(tail_beyond) else 0.0)),
                       float(tail_part), split, T, lower, extras)
