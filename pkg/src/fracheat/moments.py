"""Second-moment oracles and Monte Carlo moment curves.

For linear ``sigma(u) = L u`` the second moments solve closed linear
Volterra equations.  Both are advanced in the eigenbasis of the discrete
generator, where the kernel ``exp(-(lam_k + lam_l) tau)`` is integrated
exactly against a piecewise-linear source.  On the diagonal this is a
product-integration rule exact for every mode, so the ``tau^(-1/alpha)``
singularity of the summed white-noise kernel needs no separate treatment.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import ConfigurationError, QuadratureError, QueryError, ValidationError
from .heatkernel import HeatKernelEvaluator
from .noise import NoiseIncrementSampler, build_covariance
from .operator import DomainGrid
from .sde import EnsembleSummary

log = logging.getLogger(__name__)

ORACLE = "volterra-oracle"
MONTE_CARLO = "monte-carlo"
MAX_COLORED_N = 256
REFINE_GATE = 0.02
MAX_HALVINGS = 6


@dataclass
class MomentCurve:
    """``E|u_t(x)|^p`` on the grid at a sequence of times."""

    times: np.ndarray
    nodes: np.ndarray
    values: np.ndarray           # (n_t, N)
    p: float = 2
    provenance: str = ORACLE
    stderr: np.ndarray | None = None
    quadrature_error: float | None = None
    covariance: np.ndarray | None = None  # (n_t, N, N), colored oracle only
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, np.size(self.nodes)):
            raise ValidationError(f"values shape {self.values.shape} does not match times x nodes")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValidationError("curve times must be strictly increasing")

    @property
    def h(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    def at(self, x: float):
        i = int(np.argmin(np.abs(self.nodes - x)))
        se = None if self.stderr is None else self.stderr[:, i]
        return self.values[:, i], se

    def interior_min(self, epsilon: float, R: float | None = None) -> np.ndarray:
        R = self.nodes[-1] + self.h if R is None else R
        mask = np.abs(self.nodes) <= R - epsilon + 1e-12
        return self.values[:, mask].min(axis=1)

    def energy(self) -> "EnergyCurve":
        return EnergyCurve(self.times, np.sqrt(self.h * self.values.sum(axis=1)), self.provenance)

    def csv_rows(self):
        for n, t in enumerate(self.times):
            for i, x in enumerate(self.nodes):
                se = "" if self.stderr is None else repr(float(self.stderr[n, i]))
                yield (repr(float(t)), repr(float(x)), repr(self.p), repr(float(self.values[n, i])), se,
                       self.provenance)

    def to_dict(self):
        return {
            "times": self.times.tolist(), "nodes": np.asarray(self.nodes).tolist(), "p": self.p,
            "provenance": self.provenance, "values": self.values.tolist(),
            "stderr": None if self.stderr is None else self.stderr.tolist(),
            "quadrature_error": self.quadrature_error, "meta": self.meta,
        }


@dataclass
class EnergyCurve:
    """``E_t = sqrt(h sum_i E|u_t(x_i)|^2)`` with the interior/global sandwich."""

    times: np.ndarray
    values: np.ndarray
    provenance: str = ORACLE
    stderr: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    sandwich_ok: np.ndarray | None = None

    @property
    def squared(self) -> np.ndarray:
        return np.asarray(self.values) ** 2

    def to_dict(self):
        def lst(a):
            return None if a is None else np.asarray(a).tolist()
        return {"times": lst(self.times), "values": lst(self.values), "provenance": self.provenance,
                "stderr": lst(self.stderr), "lower": lst(self.lower), "upper": lst(self.upper),
                "sandwich_ok": lst(self.sandwich_ok)}


def energy_sandwich(curve: MomentCurve, grid: DomainGrid, epsilon: float) -> EnergyCurve:
    """Energy with the bounds ``|B_(R-eps)|_h min_int m <= E^2 <= |B_R|_h max m``.

    Ball measures are grid measures (``h`` times the node count) so the
    inequality is exact on grid quantities.
    """
    inner = grid.interior_mask(epsilon)
    if not inner.any():
        raise ValidationError(f"no grid nodes inside B_(R-eps) for eps={epsilon}")
    m = curve.values
    e2 = grid.h * m.sum(axis=1)
    lower = grid.h * inner.sum() * m[:, inner].min(axis=1)
    upper = grid.h * grid.N * m.max(axis=1)
    ok = (lower <= e2) & (e2 <= upper)
    if not ok.all():
        log.warning("energy sandwich violated at %d record times", int((~ok).sum()))
    return EnergyCurve(curve.times, np.sqrt(e2), curve.provenance, None, lower, upper, ok)


# --------------------------------------------------------------------------
# product-integration weights


def _weights(rho: np.ndarray, dt: float):
    """Exact ``int_0^dt exp(-rho tau) (1 - tau/dt) dtau`` and ``... (tau/dt) dtau``."""
    z = rho * dt
    small = np.abs(z) < 0.1
    zs = np.where(small, 1.0, z)
    em = np.exp(-zs)
    w0 = (zs - 1.0 + em) / zs**2
    w1 = (1.0 - em * (1.0 + zs)) / zs**2
    if small.any():
        zz = z[small]
        s0 = np.zeros_like(zz)
        s1 = np.zeros_like(zz)
        term = np.ones_like(zz)
        for n in range(12):
            if n:
                term = term * (-zz) / n
            s0 += term / ((n + 1) * (n + 2))
            s1 += term / (n + 2)
        w0[small] = s0
        w1[small] = s1
    return dt * w0, dt * w1


def _time_grid(dt, T, record_times):
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValidationError(f"T={T} must be a positive multiple of dt={dt}")
    if record_times is None:
        steps = np.arange(n_steps + 1)
    else:
        steps = np.array([int(round(t / dt)) for t in record_times], dtype=int)
        if np.any(np.abs(steps * dt - np.asarray(record_times)) > 1e-9 * max(T, 1.0)):
            raise ValidationError("record times must be multiples of dt")
        if np.any(steps < 0) or np.any(steps > n_steps) or np.any(np.diff(steps) <= 0):
            raise ValidationError("record times must be increasing and inside [0, T]")
    return n_steps, steps


def _check_inputs(ev, u0, xi, L):
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (ev.grid.N,) or not np.all(np.isfinite(u0)):
        raise ValidationError(f"u0 must be a finite vector of length {ev.grid.N}")
    if not xi >= 0:
        raise ValidationError(f"xi must be >= 0, got {xi}")
    if not np.isfinite(L):
        raise ValidationError("sigma slope must be finite")
    return u0


# --------------------------------------------------------------------------
# white noise


def _white_pass(ev, u0, c, dt, n_steps, steps):
    lam = np.asarray(ev.spectrum.eigenvalues)
    V = ev.spectrum.orthonormal
    h = ev.grid.h
    N = lam.size
    d = np.exp(-lam * dt)
    decay = np.outer(d, d)
    W0, W1 = _weights(np.add.outer(lam, lam), dt)
    a = np.einsum("xk,xl->xkl", V, V).reshape(N, N * N)
    omega0 = (a * W0.reshape(1, -1)) @ a.T / h
    lu = sla.lu_factor(np.eye(N) - c * omega0)

    g = V.T @ u0
    m = u0 * u0
    Xt = (V.T * m) @ V / h
    I = np.zeros((N, N))
    out = np.empty((steps.size, N))
    want = {int(s): k for k, s in enumerate(steps)}
    if 0 in want:
        out[want[0]] = m
    for n in range(n_steps):
        g = g * d
        G = V @ g
        I = I * decay + W1 * Xt
        rhs = G * G + c * np.einsum("xk,kl,xl->x", V, I, V, optimize=True)
        m = sla.lu_solve(lu, rhs)
        Xt = (V.T * m) @ V / h
        I = I + W0 * Xt
        k = want.get(n + 1)
        if k is not None:
            out[k] = m
    return out


def _refined(run, dt, T, record_times, label, max_halvings=MAX_HALVINGS):
    """Halve ``dt`` until two successive solutions differ by at most the gate.

    The accepted pair is combined by Richardson extrapolation for the
    second-order scheme.
    """
    def at(step):
        n, s = _time_grid(step, T, record_times)
        if record_times is None:
            s = s[:: int(round(dt / step))]
        return run(step, n, s)

    prev = at(dt)
    err = math.inf
    for k in range(1, max_halvings + 1):
        cur = at(dt / 2**k)
        err = float(np.max(np.abs(cur - prev) / np.maximum(np.abs(cur), 1e-300)))
        if np.isfinite(err) and err <= REFINE_GATE:
            n1, s1 = _time_grid(dt, T, record_times)
            times = (s1 * dt) if record_times is None else np.asarray(record_times, dtype=float)
            return times, cur + (cur - prev) / 3.0, err, dt / 2**k
        prev = cur
    raise QuadratureError(f"{label}: step halving still changes the solution by {err:.3g} (> {REFINE_GATE:.0%})",
                          {"relative_change": err, "dt": dt / 2**max_halvings})


def solve_volterra_white(ev: HeatKernelEvaluator, u0, xi: float, L: float, dt: float, T: float,
                         record_times=None, refine: bool = True) -> MomentCurve:
    """``m_t = |G_t u0|^2 + xi^2 L^2 int_0^t sum_y h p_D(t-s,.,y)^2 m_s(y) ds``."""
    if ev.alpha <= 1.0:
        raise ValidationError(f"white-noise second moments need alpha > 1, got alpha={ev.alpha}")
    u0 = _check_inputs(ev, u0, xi, L)
    c = (xi * L) ** 2

    def run(step, n, s):
        return _white_pass(ev, u0, c, step, n, s)

    if refine and c > 0:
        times, vals, err, used = _refined(run, dt, T, record_times, "white Volterra")
    else:
        n, s = _time_grid(dt, T, record_times)
        times, vals, err, used = s * dt, run(dt, n, s), 0.0, dt
    return MomentCurve(times, ev.grid.nodes, vals, 2, ORACLE, quadrature_error=err,
                       meta={"noise": "white", "xi": float(xi), "L": float(L), "dt": float(used)})


# --------------------------------------------------------------------------
# colored noise


def _colored_pass(ev, u0, c, C, dt, n_steps, steps, tol=1e-12):
    lam = np.asarray(ev.spectrum.eigenvalues)
    V = ev.spectrum.orthonormal
    N = lam.size
    d = np.exp(-lam * dt)
    decay = np.outer(d, d)
    W0, W1 = _weights(np.add.outer(lam, lam), dt)

    def implicit(S):
        return V @ (W0 * (V.T @ (C * S) @ V)) @ V.T

    op = LinearOperator((N * N, N * N), dtype=float,
                        matvec=lambda s: (s.reshape(N, N) - c * implicit(s.reshape(N, N))).ravel())
    g = V.T @ u0
    S = np.outer(u0, u0)
    Xt = V.T @ (C * S) @ V
    I = np.zeros((N, N))
    out = np.empty((steps.size, N, N))
    want = {int(s): k for k, s in enumerate(steps)}
    if 0 in want:
        out[want[0]] = S
    for n in range(n_steps):
        g = g * d
        G = V @ g
        I = I * decay + W1 * Xt
        rhs = np.outer(G, G) + c * (V @ I @ V.T)
        guess = rhs + c * implicit(S)
        sol, info = gmres(op, rhs.ravel(), x0=guess.ravel(), rtol=tol, atol=0.0, restart=40, maxiter=200)
        if info != 0:
            raise QuadratureError("implicit covariance step did not converge", {"step": n + 1, "info": info})
        S = sol.reshape(N, N)
        S = 0.5 * (S + S.T)
        Xt = V.T @ (C * S) @ V
        I = I + W0 * Xt
        k = want.get(n + 1)
        if k is not None:
            out[k] = S
    return out


def solve_volterra_colored(ev: HeatKernelEvaluator, u0, xi: float, L: float, correlation, dt: float, T: float,
                           record_times=None, refine: bool = True) -> MomentCurve:
    """Covariance system ``M_t = G u0 (G u0)^T + xi^2 L^2 int_0^t E (C o M_s) E ds``.

    ``correlation`` is a covariance matrix, a sampler built by
    :func:`build_covariance`, or a correlation model.  The returned curve
    carries the full covariance field in ``covariance``.
    """
    N = ev.grid.N
    if N > MAX_COLORED_N:
        raise ConfigurationError(f"full covariance solve limited to N <= {MAX_COLORED_N} (got {N}); use a coarser grid")
    if isinstance(correlation, NoiseIncrementSampler):
        C = correlation.covariance
    elif isinstance(correlation, np.ndarray):
        C = correlation
    else:
        C = build_covariance(correlation, ev.grid).covariance
    if C is None or C.shape != (N, N):
        raise ValidationError("colored solve needs an N x N covariance matrix")
    u0 = _check_inputs(ev, u0, xi, L)
    c = (xi * L) ** 2

    def run(step, n, s):
        return _colored_pass(ev, u0, c, C, step, n, s)

    def diag_run(step, n, s):
        full = run(step, n, s)
        diag_run.last = full
        return np.diagonal(full, axis1=1, axis2=2).copy()

    if refine and c > 0:
        times, vals, err, used = _refined(diag_run, dt, T, record_times, "colored Volterra")
    else:
        n, s = _time_grid(dt, T, record_times)
        times, vals, err, used = s * dt, diag_run(dt, n, s), 0.0, dt
    return MomentCurve(times, ev.grid.nodes, vals, 2, ORACLE, quadrature_error=err, covariance=diag_run.last,
                       meta={"noise": "colored", "xi": float(xi), "L": float(L), "dt": float(used)})


def solve_volterra(ev, u0, xi, L, sampler_or_model, dt, T, record_times=None, refine=True) -> MomentCurve:
    """Dispatch on white versus colored noise."""
    model = getattr(sampler_or_model, "model", sampler_or_model)
    if getattr(model, "colored", False):
        return solve_volterra_colored(ev, u0, xi, L, sampler_or_model, dt, T, record_times, refine)
    return solve_volterra_white(ev, u0, xi, L, dt, T, record_times, refine)


# --------------------------------------------------------------------------
# Monte Carlo


def estimate_moments(summary: EnsembleSummary, p, epsilon: float, grid: DomainGrid | None = None):
    """Moment curve of order ``p`` and the (second-moment) energy curve."""
    if p not in summary.moment_orders and p != 2:
        raise QueryError(f"moment order {p} was not recorded; available: {summary.moment_orders}")
    if grid is None:
        R = float(summary.nodes[-1] + summary.h)
        grid = DomainGrid(R, summary.nodes.size)
    m, se = summary.moment(p)
    curve = MomentCurve(summary.times, summary.nodes, m, p, MONTE_CARLO, stderr=se,
                        meta={"M": summary.M, "M_effective": summary.counts.tolist(), "status": summary.status})
    m2, _ = summary.moment(2)
    second = curve if p == 2 else MomentCurve(summary.times, summary.nodes, m2, 2, MONTE_CARLO)
    energy = energy_sandwich(second, grid, epsilon)
    _, e_se = summary.energy_squared()
    with np.errstate(invalid="ignore", divide="ignore"):
        energy.stderr = np.where(energy.values > 0, e_se / (2 * energy.values), np.nan)
    return curve, energy


def jensen_floor(ev: HeatKernelEvaluator, u0, times) -> np.ndarray:
    """``|G_t u0|^2`` at the given times, shape ``(n_t, N)``."""
    lam = np.asarray(ev.spectrum.eigenvalues)
    V = ev.spectrum.orthonormal
    g = V.T @ np.asarray(u0, dtype=float)
    out = np.array([(V @ (np.exp(-lam * t) * g)) ** 2 for t in np.asarray(times, dtype=float)])
    return out
