"""Killed nonlocal generators on a uniform one-dimensional grid.

All matrices assembled here represent ``-L`` (the positive operator) acting
on grid functions that vanish identically outside ``(-R, R)``.  The
restricted fractional Laplacian is discretised by quadrature of the
hypersingular integral in its symmetric second-difference form, so the zero
exterior extension enters through the jump weights that reach outside the
domain.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import ConfigurationError, NumericalError, ValidationError
from .validation import ValidationReport

FORMAT_VERSION = 1
MIN_NODES = 8


@dataclass(frozen=True)
class DomainGrid:
    """Uniform interior nodes of ``(-R, R)``; the two boundary points are excluded."""

    R: float
    N: int

    def __post_init__(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= MIN_NODES):
            raise ConfigurationError(f"grid needs N >= {MIN_NODES} interior nodes, got {self.N}")
        if not (math.isfinite(self.R) and self.R > 0):
            raise ValidationError(f"radius R must be positive and finite, got {self.R}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "R", float(self.R))

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.N + 1)

    @property
    def nodes(self) -> np.ndarray:
        return -self.R + self.h * np.arange(1, self.N + 1)

    def index_of(self, x: float) -> int:
        """Index of the node nearest to ``x``."""
        if abs(x) >= self.R:
            raise ValidationError(f"point {x} lies outside the open interval (-{self.R}, {self.R})")
        return int(np.clip(round((x + self.R) / self.h) - 1, 0, self.N - 1))

    def interior_mask(self, epsilon: float) -> np.ndarray:
        """Nodes of the shrunken ball ``B_{R-epsilon}(0)``."""
        return np.abs(self.nodes) <= self.R - epsilon + 1e-12 * self.R

    def coarsened(self) -> "DomainGrid":
        """Grid with (roughly) doubled spacing used for Richardson estimates."""
        return DomainGrid(self.R, (self.N + 1) // 2 - 1)

    def to_dict(self):
        return {"R": self.R, "N": self.N, "h": self.h}


# --------------------------------------------------------------------------
# generator specifications


class GeneratorSpec:
    variant: ClassVar[str]

    def validate(self):  # pragma: no cover - overridden
        raise NotImplementedError

    def to_dict(self):
        d = {"variant": self.variant}
        d.update({k: float(v) for k, v in self.__dict__.items()})
        return d

    @property
    def alpha_eff(self) -> float:
        """Stability index that controls small-time on-diagonal scaling."""
        return self.alpha

    @property
    def white_noise_ok(self) -> bool:
        a = self.alpha_eff
        return 1.0 < a <= 2.0

    @staticmethod
    def from_dict(d) -> "GeneratorSpec":
        d = dict(d)
        variant = str(d.pop("variant", "fractional")).lower().replace("_", "-")
        try:
            cls = _VARIANTS[variant]
        except KeyError:
            raise ValidationError(
                f"unknown operator variant {variant!r}; expected one of {sorted(_VARIANTS)}"
            ) from None
        d.pop("h", None)
        try:
            return cls(**{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ValidationError(f"bad parameters for {variant}: {exc}") from None


def _check_alpha(alpha, lo_open=0.0):
    if not (lo_open < alpha <= 2.0):
        raise ValidationError(f"stability index alpha must satisfy 0 < alpha <= 2, got {alpha}")


def _check_positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise ValidationError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class Fractional(GeneratorSpec):
    alpha: float
    nu: float = 1.0
    variant: ClassVar[str] = "fractional"

    def __post_init__(self):
        self.validate()

    def validate(self):
        _check_alpha(self.alpha)
        _check_positive("diffusivity nu", self.nu)


@dataclass(frozen=True)
class FractionalWithDrift(GeneratorSpec):
    alpha: float
    nu: float
    drift: float
    variant: ClassVar[str] = "fractional-drift"

    def __post_init__(self):
        self.validate()

    def validate(self):
        _check_alpha(self.alpha)
        _check_positive("diffusivity nu", self.nu)
        if not math.isfinite(self.drift):
            raise ValidationError(f"drift rate must be finite, got {self.drift}")

    @property
    def base(self) -> Fractional:
        return Fractional(self.alpha, self.nu)


@dataclass(frozen=True)
class DoubleFractional(GeneratorSpec):
    """``-nu(-Delta)^{alpha/2} - a^beta (-Delta)^{beta/2}`` with ``1 < beta < alpha < 2``."""

    alpha: float
    nu: float
    beta: float
    a: float
    variant: ClassVar[str] = "double-fractional"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (1.0 < self.beta < self.alpha < 2.0):
            raise ValidationError(
                f"double-fractional operator needs 1 < beta < alpha < 2, got beta={self.beta}, alpha={self.alpha}"
            )
        _check_positive("diffusivity nu", self.nu)
        _check_positive("second coefficient a", self.a)

    @property
    def parts(self) -> tuple[Fractional, Fractional]:
        return Fractional(self.alpha, self.nu), Fractional(self.beta, self.a ** self.beta)


@dataclass(frozen=True)
class RelativisticSurrogate(GeneratorSpec):
    """Spectral stand-in ``(m^{2/alpha} - Delta)^{alpha/2} - m`` built on the Dirichlet Laplacian.

    This is a function of the *classical* killed Laplacian, not the killed
    relativistic process; it shares the long-time exponential decay but its
    principal eigenvalue differs from the true killed operator.
    """

    alpha: float
    mass: float
    variant: ClassVar[str] = "relativistic-surrogate"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0.0 < self.alpha < 2.0):
            raise ValidationError(f"relativistic surrogate needs 0 < alpha < 2, got {self.alpha}")
        _check_positive("mass m", self.mass)

    def symbol(self, lam):
        m = self.mass
        return (m ** (2.0 / self.alpha) + lam) ** (self.alpha / 2.0) - m


_VARIANTS = {
    "fractional": Fractional,
    "fractional-drift": FractionalWithDrift,
    "drift": FractionalWithDrift,
    "double-fractional": DoubleFractional,
    "double": DoubleFractional,
    "relativistic-surrogate": RelativisticSurrogate,
    "relativistic": RelativisticSurrogate,
}


# --------------------------------------------------------------------------
# assembly


def fractional_constant(alpha: float) -> float:
    """Normalising constant ``c_{1,alpha}`` of the one-dimensional fractional Laplacian."""
    return alpha * 2.0 ** (alpha - 1) * gamma_fn((1 + alpha) / 2) / (math.sqrt(math.pi) * gamma_fn(1 - alpha / 2))


def _laplacian_stencil(grid: DomainGrid) -> np.ndarray:
    N, h = grid.N, grid.h
    A = np.zeros((N, N))
    i = np.arange(N)
    A[i, i] = 2.0
    A[i[:-1], i[:-1] + 1] = -1.0
    A[i[1:], i[1:] - 1] = -1.0
    return A / h**2


def _jump_weights(alpha: float, grid: DomainGrid):
    """Per-offset weights ``w_k / (k h)^2`` and the exterior tail coefficient.

    The integral ``int_0^inf (2u(x) - u(x-z) - u(x+z)) z^{-1-alpha} dz`` is
    split as ``psi(z) = D(z)/z^2`` times ``z^{1-alpha}``; ``psi`` is linearly
    interpolated on the cells ``[(k-1)h, kh]`` except the first, where it is
    held at ``psi(h)``.  Beyond ``z = 2R`` both arguments are outside the
    domain and the remaining piece is integrated exactly.
    """
    h = grid.h
    K = grid.N + 1
    xi = h * np.arange(1, K + 1)
    e = 2.0 - alpha
    cell = (xi**e - (xi - h) ** e) / e
    w = np.empty(K)
    w[0] = cell[0] + 0.5 * cell[1]
    w[1:-1] = 0.5 * (cell[1:-1] + cell[2:])
    w[-1] = 0.5 * cell[-1]
    coef = w / xi**2
    tail = (K * h) ** (-alpha) / alpha
    return coef, tail


def fractional_matrix(alpha: float, nu: float, grid: DomainGrid) -> np.ndarray:
    """Matrix of ``nu (-Delta)^{alpha/2}`` with zero exterior condition."""
    if alpha == 2.0:
        return nu * _laplacian_stencil(grid)
    coef, tail = _jump_weights(alpha, grid)
    c = fractional_constant(alpha)
    N = grid.N
    offsets = np.abs(np.subtract.outer(np.arange(N), np.arange(N)))
    A = -c * coef[np.maximum(offsets, 1) - 1]
    np.fill_diagonal(A, c * (2.0 * coef.sum() + 2.0 * tail))
    return nu * A


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    matrix: np.ndarray
    spec: GeneratorSpec
    grid: DomainGrid

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def driftless(self) -> bool:
        return not isinstance(self.spec, FractionalWithDrift)


def build_operator(spec: GeneratorSpec, grid: DomainGrid) -> DiscreteOperator:
    """Assemble the matrix of ``-L`` on the interior nodes of ``grid``."""
    spec.validate()
    if grid.N < MIN_NODES:
        raise ConfigurationError(f"quadrature stencil needs N >= {MIN_NODES}")
    if isinstance(spec, Fractional):
        A = fractional_matrix(spec.alpha, spec.nu, grid)
    elif isinstance(spec, FractionalWithDrift):
        A = fractional_matrix(spec.alpha, spec.nu, grid) - spec.drift * np.eye(grid.N)
    elif isinstance(spec, DoubleFractional):
        first, second = spec.parts
        A = fractional_matrix(first.alpha, first.nu, grid) + fractional_matrix(second.alpha, second.nu, grid)
    elif isinstance(spec, RelativisticSurrogate):
        lam, V = np.linalg.eigh(_laplacian_stencil(grid))
        A = (V * spec.symbol(lam)) @ V.T
        A = 0.5 * (A + A.T)
    else:
        raise ValidationError(f"unsupported generator spec {spec!r}")
    return DiscreteOperator(np.ascontiguousarray(A), spec, grid)


# --------------------------------------------------------------------------
# spectra


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigenpairs of ``-L``.

    ``eigenvectors[:, k]`` is orthonormal under ``<f, g> = h * sum(f * g)``,
    i.e. it samples the continuum eigenfunction.  ``orthonormal`` gives the
    Euclidean-normalised columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    grid: DomainGrid
    spec: GeneratorSpec
    mu1_coarse: float | None = None
    mu1_extrapolated: float | None = None
    order: float | None = None

    def __post_init__(self):
        self.eigenvalues.setflags(write=False)
        self.eigenvectors.setflags(write=False)

    @property
    def mu1(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def orthonormal(self) -> np.ndarray:
        return self.eigenvectors * math.sqrt(self.grid.h)

    @property
    def mu1_error(self) -> float | None:
        if self.mu1_extrapolated is None:
            return None
        return abs(self.mu1 - self.mu1_extrapolated)

    def gram(self) -> np.ndarray:
        phi = self.eigenvectors
        return self.grid.h * phi.T @ phi

    def to_dict(self, include_vectors=False):
        d = {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "grid": self.grid.to_dict(),
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "mu1": self.mu1,
            "mu1_coarse": self.mu1_coarse,
            "mu1_extrapolated": self.mu1_extrapolated,
            "richardson_order": self.order,
        }
        if self.spec.variant == "relativistic-surrogate":
            d["note"] = "spectral surrogate of the killed relativistic generator"
        if include_vectors:
            d["eigenvectors"] = self.eigenvectors.T.tolist()
        return d

    def to_json(self, include_vectors=False) -> str:
        return json.dumps(self.to_dict(include_vectors), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported spectrum format version {d.get('format_version')}")
        grid = DomainGrid(d["grid"]["R"], d["grid"]["N"])
        spec = GeneratorSpec.from_dict(d["spec"])
        vals = np.asarray(d["eigenvalues"], dtype=float)
        if "eigenvectors" in d:
            vecs = np.asarray(d["eigenvectors"], dtype=float).T.copy()
        else:
            vecs = np.linalg.eigh(build_operator(spec, grid).matrix)[1] / math.sqrt(grid.h)
            vecs = _fix_signs(vecs)
        return cls(vals, vecs, grid, spec, d.get("mu1_coarse"), d.get("mu1_extrapolated"),
                   d.get("richardson_order"))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    vecs = np.array(vecs, copy=True)
    scale = np.max(np.abs(vecs), axis=0)
    for k in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, k]) > 1e-8 * scale[k])
        if nz.size and vecs[nz[0], k] < 0:
            vecs[:, k] *= -1.0
    return vecs


def convergence_order(spec: GeneratorSpec) -> float:
    """Observed grid order of the principal eigenvalue for each variant."""
    if isinstance(spec, RelativisticSurrogate):
        return 2.0
    if isinstance(spec, (Fractional, FractionalWithDrift)) and spec.alpha == 2.0:
        return 2.0
    return 1.0


def _eigh(matrix: np.ndarray):
    try:
        lam, V = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        norm = float(np.linalg.norm(matrix, 2)) if np.all(np.isfinite(matrix)) else float("nan")
        diag = {"norm2": norm, "finite": bool(np.all(np.isfinite(matrix))),
                "asymmetry": float(np.max(np.abs(matrix - matrix.T)))}
        try:
            diag["condition"] = float(np.linalg.cond(matrix))
        except np.linalg.LinAlgError:
            diag["condition"] = float("inf")
        raise NumericalError(f"symmetric eigensolver did not converge: {exc}", diag) from exc
    return lam, V


def eigendecompose(op: DiscreteOperator, extrapolate: bool = True) -> SpectralDecomposition:
    """Full dense eigendecomposition with a Richardson estimate of ``mu1``.

    The estimate uses the same generator on the grid with doubled spacing,
    ``mu1* = mu1_h + (mu1_h - mu1_2h) / ((h_2h/h)^p - 1)`` with ``p`` from
    :func:`convergence_order`.
    """
    A = op.matrix
    asym = np.max(np.abs(A - A.T))
    if asym > 1e-12 * max(np.max(np.abs(A)), 1.0):
        raise ValidationError(f"operator matrix is not symmetric (max asymmetry {asym:.3e})")
    lam, V = _eigh(A)
    phi = _fix_signs(V) / math.sqrt(op.grid.h)
    mu1_coarse = mu1_ext = order = None
    if extrapolate and op.grid.N >= 2 * MIN_NODES + 1:
        coarse_grid = op.grid.coarsened()
        coarse = build_operator(op.spec, coarse_grid)
        mu1_coarse = float(np.linalg.eigvalsh(coarse.matrix)[0])
        order = convergence_order(op.spec)
        ratio = (coarse_grid.h / op.grid.h) ** order
        mu1_ext = float(lam[0] + (lam[0] - mu1_coarse) / (ratio - 1.0))
    return SpectralDecomposition(lam, phi, op.grid, op.spec, mu1_coarse, mu1_ext, order)


def validate_operator(op: DiscreteOperator, spectrum: SpectralDecomposition | None = None) -> ValidationReport:
    """Symmetry, sign structure and (for driftless variants) positive definiteness."""
    A = op.matrix
    report = ValidationReport(f"operator[{op.spec.variant}]")
    scale = max(float(np.max(np.abs(A))), 1e-300)
    asym = float(np.max(np.abs(A - A.T))) / scale
    report.add("symmetric", asym <= 1e-12, asym, 1e-12)
    if isinstance(op.spec, (Fractional, DoubleFractional)):
        off = A - np.diag(np.diag(A))
        report.add("off-diagonal <= 0", np.max(off) <= 0.0, np.max(off), 0.0)
        report.add("diagonal > 0", np.min(np.diag(A)) > 0.0, np.min(np.diag(A)), 0.0)
    if spectrum is None:
        spectrum = eigendecompose(op, extrapolate=False)
    mu1 = spectrum.mu1
    if op.driftless:
        report.add("lambda_1 > 0", mu1 > 0.0, mu1, 0.0,
                   "spectral surrogate" if isinstance(op.spec, RelativisticSurrogate) else "")
    else:
        base_mu1 = mu1 + op.spec.drift
        note = "" if mu1 > 0 else f"supercritical drift: lambda={op.spec.drift} exceeds base mu1={base_mu1:.6g}"
        report.add("positive definite", mu1 > 0.0, mu1, 0.0, note)
    gram_err = float(np.max(np.abs(spectrum.gram() - np.eye(op.grid.N))))
    report.add("h-orthonormal eigenvectors", gram_err <= 1e-10, gram_err, 1e-10)
    return report
