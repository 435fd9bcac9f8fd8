"""Sectioned TOML run configuration with a canonical hash."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import AssumptionViolation, ConfigurationError, ValidationError
from .noise import CorrelationModel, dalang_check
from .operator import DomainGrid, GeneratorSpec
from .sde import NOISE_SCHEMES, SigmaFunction, SimulationConfig, initial_condition, validate_sigma

SECTIONS = ("operator", "grid", "noise", "sigma", "simulation", "analysis", "output")

SIMULATION_DEFAULTS = {
    "xi": 1.0, "dt": 1e-3, "T": 1.0, "M": 1000, "seed": 0, "record_times": None, "n_records": 20,
    "moment_orders": [2], "u0": "cosine", "mass_set": [-0.5, 0.5], "noise_scheme": "exact-variance",
    "block_size": 512,
}
ANALYSIS_DEFAULTS = {
    "epsilon": 0.2, "band": 10.0, "window": None, "x": 0.0, "xis": [0.5, 1.0, 1.5, 2.0, 2.5],
    "method": "oracle", "bisect": True, "tol": 0.1, "oracle_dt": 1e-2, "oracle_T": None,
    "n_records": 41, "laplace_beta": None, "lemmas": None, "p": 2,
}
OUTPUT_DEFAULTS = {"dir": "fracheat-out", "include_vectors": False}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _merge(defaults, given, section):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    """Validated configuration; every section is optional except [operator] and [grid]."""

    spec: GeneratorSpec
    grid: DomainGrid
    noise: CorrelationModel | None
    sigma: SigmaFunction
    simulation: dict
    analysis: dict
    output: dict
    source: str | None = None
    warnings: list = field(default_factory=list)

    def canonical(self) -> dict:
        return {
            "operator": self.spec.to_dict(),
            "grid": self.grid.to_dict(),
            "noise": None if self.noise is None else self.noise.to_dict(),
            "sigma": self.sigma.to_dict(),
            "simulation": _jsonable(self.simulation),
            "analysis": _jsonable(self.analysis),
            "output": _jsonable({k: v for k, v in self.output.items() if k != "dir"}),
        }

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.canonical()).encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.simulation["seed"])

    def with_seed(self, seed) -> "RunConfig":
        sim = dict(self.simulation)
        sim["seed"] = _seed(seed)
        return RunConfig(self.spec, self.grid, self.noise, self.sigma, sim, self.analysis, self.output,
                         self.source, list(self.warnings))

    def require_noise(self) -> CorrelationModel:
        if self.noise is None:
            raise ConfigurationError("this subcommand needs a [noise] section")
        return self.noise

    def u0(self) -> np.ndarray:
        spec = self.simulation["u0"]
        if isinstance(spec, str):
            return initial_condition(spec, self.grid)
        arr = np.asarray(spec, dtype=float)
        if arr.shape != (self.grid.N,):
            raise ValidationError(f"explicit u0 must list {self.grid.N} values")
        return arr

    def record_times(self):
        sim = self.simulation
        if sim["record_times"] is not None:
            return tuple(float(t) for t in sim["record_times"])
        n = int(round(sim["T"] / sim["dt"]))
        k = max(1, n // int(sim["n_records"]))
        return tuple(s * sim["dt"] for s in range(k, n + 1, k))

    def simulation_config(self) -> SimulationConfig:
        sim = self.simulation
        return SimulationConfig(
            spec=self.spec, grid=self.grid, noise=self.require_noise(), sigma=self.sigma,
            xi=float(sim["xi"]), u0=self.u0(), dt=float(sim["dt"]), T=float(sim["T"]), M=int(sim["M"]),
            seed=self.seed, record_times=self.record_times(),
            moment_orders=tuple(sim["moment_orders"]), mass_set=tuple(sim["mass_set"]),
            noise_scheme=sim["noise_scheme"], block_size=int(sim["block_size"]),
        )


def _jsonable(d):
    return json.loads(json.dumps(d, sort_keys=True, default=float))


def _seed(value) -> int:
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ValidationError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2**64 or (isinstance(value, float) and not float(value).is_integer()):
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {value!r}")
    return seed


def _float_list(v, name):
    if v is None:
        return None
    try:
        out = [float(x) for x in v]
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a list of numbers") from None
    if not all(math.isfinite(x) for x in out):
        raise ValidationError(f"{name} must be finite")
    return out


def from_dict(raw: dict, source: str | None = None) -> RunConfig:
    """Validate a parsed config; module-level invariants are re-checked here."""
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    if "operator" not in raw or "grid" not in raw:
        raise ValidationError("config needs [operator] and [grid] sections")
    spec = GeneratorSpec.from_dict(raw["operator"])
    g = dict(raw["grid"])
    if set(g) - {"R", "N"}:
        raise ValidationError(f"unknown keys in [grid]: {sorted(set(g) - {'R', 'N'})}")
    try:
        grid = DomainGrid(float(g.get("R", 1.0)), int(g["N"]))
    except KeyError:
        raise ValidationError("[grid] needs N") from None
    noise = CorrelationModel.from_dict(raw["noise"]) if "noise" in raw else None
    sigma = SigmaFunction.from_dict(raw.get("sigma", {"kind": "linear", "c": 1.0}))
    validate_sigma(sigma)

    sim = _merge(SIMULATION_DEFAULTS, raw.get("simulation", {}), "simulation")
    sim["seed"] = _seed(sim["seed"])
    sim["record_times"] = _float_list(sim["record_times"], "record_times")
    sim["moment_orders"] = [int(p) if float(p).is_integer() else float(p) for p in sim["moment_orders"]]
    sim["mass_set"] = _float_list(sim["mass_set"], "mass_set")
    for key in ("xi", "dt", "T"):
        sim[key] = float(sim[key])
    for key in ("M", "n_records", "block_size"):
        sim[key] = int(sim[key])
    if sim["noise_scheme"] not in NOISE_SCHEMES:
        raise ValidationError(f"noise_scheme must be one of {NOISE_SCHEMES}")

    ana = _merge(ANALYSIS_DEFAULTS, raw.get("analysis", {}), "analysis")
    ana["xis"] = _float_list(ana["xis"], "xis")
    ana["window"] = _float_list(ana["window"], "window")
    if ana["method"] not in ("oracle", "monte-carlo"):
        raise ValidationError("analysis.method must be 'oracle' or 'monte-carlo'")
    if not 0 < float(ana["epsilon"]) < grid.R:
        raise ValidationError(f"analysis.epsilon must lie in (0, R), got {ana['epsilon']}")
    if ana["x"] != "energy":
        ana["x"] = float(ana["x"])

    out = _merge(OUTPUT_DEFAULTS, raw.get("output", {}), "output")

    cfg = RunConfig(spec, grid, noise, sigma, sim, ana, out, source)
    if noise is not None:
        verdict = dalang_check(noise, spec.alpha_eff)
        if not verdict.passed:
            raise AssumptionViolation(
                f"Dalang condition fails for {noise.label} with alpha={spec.alpha_eff:g}: {verdict.reason}")
    if "simulation" in raw and noise is not None:
        cfg.simulation_config()  # re-check u0, record times and moment orders
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config {path} is not valid TOML: {exc}") from None
    return from_dict(raw, str(path))
