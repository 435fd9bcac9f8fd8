"""Noise correlations, the Dalang condition and reproducible increments."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, ValidationError
from .operator import DomainGrid
from .rng import STREAM_INCREMENT, standard_normals

log = logging.getLogger(__name__)

KINDS = ("white", "riesz", "cauchy", "constant")
JITTER_STEPS = 12


@dataclass(frozen=True)
class CorrelationModel:
    """Spatial correlation ``f(x, y)`` of the driving noise.

    ``white`` is the delta correlation; ``riesz`` is ``|x-y|^-gamma``;
    ``cauchy`` is ``1 / (1 + ((x-y)/theta)^2)``; ``constant`` is ``K``.
    """

    kind: str
    gamma: float | None = None
    theta: float | None = None
    K: float | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind == "constantfloor":
            kind = "constant"
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValidationError(f"unknown correlation kind {self.kind!r}; expected one of {KINDS}")
        if kind == "riesz" and not (self.gamma is not None and 0.0 < self.gamma < 1.0):
            raise ValidationError(f"Riesz exponent must satisfy 0 < gamma < 1, got {self.gamma}")
        if kind == "cauchy" and not (self.theta is not None and self.theta > 0):
            raise ValidationError(f"Cauchy scale theta must be > 0, got {self.theta}")
        if kind == "constant" and not (self.K is not None and self.K > 0):
            raise ValidationError(f"constant floor K must be > 0, got {self.K}")

    @classmethod
    def white(cls):
        return cls("white")

    @classmethod
    def riesz(cls, gamma):
        return cls("riesz", gamma=float(gamma))

    @classmethod
    def cauchy(cls, theta):
        return cls("cauchy", theta=float(theta))

    @classmethod
    def constant(cls, K):
        return cls("constant", K=float(K))

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in dict(d).items() if v is not None}
        kind = d.pop("kind", "white")
        try:
            return cls(kind, **{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ValidationError(f"bad correlation parameters: {exc}") from None

    @property
    def colored(self) -> bool:
        return self.kind != "white"

    @property
    def label(self) -> str:
        if self.kind == "riesz":
            return f"riesz(gamma={self.gamma:g})"
        if self.kind == "cauchy":
            return f"cauchy(theta={self.theta:g})"
        if self.kind == "constant":
            return f"constant(K={self.K:g})"
        return "white"

    def dominating(self, z):
        """``f~(z)`` with ``f(x, y) <= f~(x - y)``."""
        z = np.abs(np.asarray(z, dtype=float))
        if self.kind == "riesz":
            with np.errstate(divide="ignore"):
                return z ** (-self.gamma)
        if self.kind == "cauchy":
            return 1.0 / (1.0 + (z / self.theta) ** 2)
        if self.kind == "constant":
            return np.full_like(z, self.K)
        raise ValidationError("white noise has no pointwise correlation function")

    def __call__(self, x, y):
        return self.dominating(np.subtract(x, y))

    def to_dict(self):
        d = {"kind": self.kind}
        for k in ("gamma", "theta", "K"):
            v = getattr(self, k)
            if v is not None:
                d[k] = float(v)
        return d


@dataclass(frozen=True)
class DalangVerdict:
    passed: bool
    margin: float
    reason: str

    def to_dict(self):
        return {"passed": self.passed, "margin": self.margin, "reason": self.reason}


def dalang_check(model: CorrelationModel, alpha: float) -> DalangVerdict:
    """Integrability of ``f^(k) / (1 + |k|^alpha)`` in one dimension.

    White noise has a flat spectrum, so the condition is ``alpha > 1``.  The
    Riesz kernel has ``f^(k) ~ |k|^(gamma - 1)``, integrable against
    ``|k|^-alpha`` iff ``gamma < alpha``.  Cauchy and constant kernels have
    exponentially decaying (or atomic) spectra.
    """
    if model.kind == "white":
        margin = alpha - 1.0
        return DalangVerdict(margin > 0, margin, "flat spectrum: requires alpha > 1 in d = 1")
    if model.kind == "riesz":
        margin = alpha - model.gamma
        return DalangVerdict(margin > 0, margin, "spectrum ~ |k|^(gamma-1): requires gamma < alpha")
    if model.kind == "cauchy":
        return DalangVerdict(True, math.inf, "spectrum ~ exp(-theta |k|): always integrable")
    return DalangVerdict(True, math.inf, "spectrum is a point mass at k = 0: always integrable")


def covariance_matrix(model: CorrelationModel, grid: DomainGrid) -> np.ndarray:
    """``C[i, j] = f(x_i, x_j)``; Riesz diagonal uses the cell average of ``|z|^-gamma``."""
    if model.kind == "white":
        raise ModelError("white noise has no covariance matrix (delta correlation); use the white-noise rule")
    x = grid.nodes
    dist = np.abs(np.subtract.outer(x, x))
    if model.kind == "riesz":
        g = model.gamma
        with np.errstate(divide="ignore"):
            C = dist ** (-g)
        np.fill_diagonal(C, (grid.h / 2.0) ** (-g) / (1.0 - g))
        return C
    return model.dominating(dist)


@dataclass(frozen=True, eq=False)
class NoiseIncrementSampler:
    """Gaussian space-time increments on the grid.

    White: independent ``N(0, dt/h)`` per node.  Colored: ``sqrt(dt) L z``
    with ``L L^T = C`` (up to the recorded jitter).
    """

    model: CorrelationModel
    grid: DomainGrid
    seed: int = 0
    covariance: np.ndarray | None = None
    factor: np.ndarray | None = None
    floor: float | None = None
    jitter: float = 0.0
    warnings: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for a in (self.covariance, self.factor):
            if a is not None:
                a.setflags(write=False)

    @property
    def floor_label(self):
        return "floor not applicable" if self.floor is None else self.floor

    def with_seed(self, seed) -> "NoiseIncrementSampler":
        return NoiseIncrementSampler(self.model, self.grid, int(seed), self.covariance, self.factor,
                                     self.floor, self.jitter, self.warnings)

    def sample_block(self, dt: float, step_id: int, path_start: int, n_paths: int) -> np.ndarray:
        """``(N, n_paths)`` increments for paths ``path_start ...`` at one step."""
        if not dt > 0:
            raise ValidationError(f"time step must be positive, got {dt}")
        z = standard_normals(self.seed, step_id, path_start, n_paths, self.grid.N, STREAM_INCREMENT)
        if self.factor is None:
            return math.sqrt(dt / self.grid.h) * z
        return math.sqrt(dt) * (self.factor @ z)

    def sample_increment(self, dt: float, path_id: int, step_id: int) -> np.ndarray:
        return self.sample_block(dt, step_id, path_id, 1)[:, 0]

    def summary(self):
        return {
            "model": self.model.to_dict(),
            "floor": self.floor_label,
            "jitter": self.jitter,
            "warnings": list(self.warnings),
        }


def white_sampler(grid: DomainGrid, seed: int = 0) -> NoiseIncrementSampler:
    return NoiseIncrementSampler(CorrelationModel.white(), grid, int(seed))


def build_covariance(model: CorrelationModel, grid: DomainGrid, seed: int = 0,
                     require_floor: bool = True) -> NoiseIncrementSampler:
    """Assemble and factor ``C``; measure the floor ``K_R = min C``.

    Cholesky is retried with diagonal jitter ``10^j * 1e-12 * trace(C)/N``
    (``j = 0, 1, ...``) until it succeeds.
    """
    C = covariance_matrix(model, grid)
    floor = float(np.min(C))
    warnings = []
    if require_floor and floor <= 0:
        warnings.append(f"assumption-violation: measured floor K_R = {floor:.6g} <= 0")
    base = 1e-12 * np.trace(C) / grid.N
    jitter = 0.0
    L = None
    for j in range(-1, JITTER_STEPS):
        jitter = 0.0 if j < 0 else base * 10.0**j
        try:
            L = np.linalg.cholesky(C + jitter * np.eye(grid.N))
            break
        except np.linalg.LinAlgError:
            continue
    if L is None:
        eig_min = float(np.linalg.eigvalsh(C)[0])
        raise ModelError(
            f"{model.label} covariance is not positive semidefinite on this grid",
            {"min_eigenvalue": eig_min, "max_jitter": jitter},
        )
    if jitter > 0:
        log.info("covariance %s factored with diagonal jitter %.3e", model.label, jitter)
    return NoiseIncrementSampler(model, grid, int(seed), C, L, floor, jitter, tuple(warnings))


def make_sampler(model: CorrelationModel, grid: DomainGrid, seed: int = 0) -> NoiseIncrementSampler:
    if model.colored:
        return build_covariance(model, grid, seed)
    return white_sampler(grid, seed)
