"""Command-line entry point: ``fracheat <subcommand> --config run.toml --out dir``.

Exit status: 0 success, 2 validation error, 3 numerical or I/O error,
4 assumption violation.  Errors are also written to stderr as one JSON
object.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import SweepProblem, fit_exponent, laplace_probe, xi_sweep
from .config import RunConfig, load_config
from .errors import AnalysisError, FracHeatError, ValidationError
from .heatkernel import (HeatKernelEvaluator, chapman_kolmogorov_error, kernel_mass, lemma_integral,
                         verify_kernel_bounds)
from .moments import energy_sandwich, estimate_moments, solve_volterra
from .noise import dalang_check, make_sampler
from .operator import build_operator, eigendecompose, validate_operator
from .sde import THREADS_ENV, resolve_threads, simulate_ensemble

log = logging.getLogger("fracheat")

SUBCOMMANDS = ("operator-info", "kernel-verify", "lemma-check", "simulate", "oracle", "sweep")

# result labels printed in summary.txt
LABELS = {
    "operator": "Principal Dirichlet eigenvalue",
    "kernel": "Dirichlet heat kernel bounds",
    "L21": "Lemma 2.1", "L22": "Lemma 2.2", "L23": "Lemma 2.3", "L24": "Lemma 2.4",
    "white": "Theorem 1.3 dichotomy",
    "colored": "Theorem 1.5 dichotomy",
    "energy": "Corollary 1.4 energy sandwich",
    "higher": "Higher moments (p > 2) growth",
}

MOMENT_COLUMNS = ("t", "x", "p", "moment", "stderr", "M_effective")
ORACLE_COLUMNS = ("t", "x", "p", "value", "stderr", "provenance")


# --------------------------------------------------------------------------
# canonical output


def sanitize(obj):
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps_report(report) -> str:
    return json.dumps(sanitize(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def emit_report(results: dict, out_dir, tables: dict | None = None, summary_lines=()) -> list:
    """Write ``report.json``, one CSV per table and ``summary.txt``; return the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        path = out / "report.json"
        path.write_text(dumps_report(results))
        written.append(path)
        for name, (header, rows) in (tables or {}).items():
            p = out / name
            p.write_text(_csv_text(header, rows))
            written.append(p)
        lines = [f"fracheat {__version__}  config {results.get('config_hash', '')}"]
        lines += [f"[{label}] {text}" for label, text in summary_lines]
        p = out / "summary.txt"
        p.write_text("\n".join(lines) + "\n")
        written.append(p)
    except OSError as exc:
        raise OutputError(f"cannot write results to {out}: {exc.strerror or exc}") from None
    return written


class OutputError(FracHeatError):
    exit_code = 3


# --------------------------------------------------------------------------
# pipelines


def _spectrum(cfg: RunConfig, extrapolate=False):
    op = build_operator(cfg.spec, cfg.grid)
    spec = eigendecompose(op, extrapolate=extrapolate)
    return op, spec, HeatKernelEvaluator(spec)


def _fmt(x, digits=6):
    return f"{x:.{digits}g}" if isinstance(x, (int, float)) and math.isfinite(x) else str(x)


def cmd_operator_info(cfg: RunConfig, threads: int):
    op, spec, _ = _spectrum(cfg, extrapolate=True)
    report = validate_operator(op, spec)
    res = {"spectrum": spec.to_dict(include_vectors=bool(cfg.output["include_vectors"])),
           "mu1": spec.mu1, "validation": report.to_dict()}
    rows = [(k + 1, repr(float(v))) for k, v in enumerate(spec.eigenvalues)]
    lines = [(LABELS["operator"], f"mu1 = {_fmt(spec.mu1, 8)} (extrapolated {_fmt(spec.mu1_extrapolated or math.nan, 8)});"
              f" validation {'passed' if report.passed else 'FAILED'}")]
    return res, {"spectrum.csv": (("k", "eigenvalue"), rows)}, lines


def cmd_kernel_verify(cfg: RunConfig, threads: int):
    _, spec, ev = _spectrum(cfg)
    eps = float(cfg.analysis["epsilon"])
    b = verify_kernel_bounds(ev, eps, band=float(cfg.analysis["band"]))
    mu1 = ev.mu1
    t_long = 10.0 / mu1
    c = cfg.grid.index_of(0.0)
    decay = -math.log(float(np.ravel(ev.entries(t_long, c, c))[0])) / t_long
    times = (0.1 / mu1, 1.0 / mu1, 5.0 / mu1)
    mass = max(float(np.max(kernel_mass(ev, t))) for t in times)
    ck = max(chapman_kolmogorov_error(ev, t, s) for t in times for s in times)
    res = {"bounds": b.to_dict(), "decay_rate_center": decay, "decay_time": t_long,
           "decay_relative_error": abs(decay - mu1) / mu1, "max_mass": mass,
           "chapman_kolmogorov_error": ck}
    rows = [(k, repr(float(v)) if isinstance(v, (int, float)) else v) for k, v in sorted(b.to_dict().items())
            if not isinstance(v, (list, tuple))]
    rows += [("decay_rate_center", repr(decay)), ("max_mass", repr(mass)), ("chapman_kolmogorov_error", repr(ck))]
    lines = [(LABELS["kernel"], f"c1={_fmt(b.c1_long)} c2={_fmt(b.c2_long)} t0={_fmt(b.t0)};"
              f" -(1/t) log p(t,0,0) = {_fmt(decay)} vs mu1 = {_fmt(mu1)}; mass <= {_fmt(mass)}; CK error {_fmt(ck)}")]
    return res, {"kernel_bounds.csv": (("quantity", "value"), rows)}, lines


DEFAULT_LEMMAS = [{"id": "L21", "beta_mu1": 0.5, "points": [0.0]}]


def cmd_lemma_check(cfg: RunConfig, threads: int):
    _, spec, ev = _spectrum(cfg)
    requests = cfg.analysis["lemmas"] or DEFAULT_LEMMAS
    bounds = None
    sampler = None
    out, rows, lines = [], [], []
    for req in requests:
        req = dict(req)
        lid = str(req.get("id", "")).upper()
        if "beta" in req:
            beta = float(req["beta"])
        elif "beta_mu1" in req:
            beta = float(req["beta_mu1"]) * ev.mu1
        else:
            raise ValidationError(f"lemma request {req} needs beta or beta_mu1")
        points = req.get("points", [0.0])
        corr = None
        if lid == "L23":
            if sampler is None:
                model = cfg.require_noise()
                if not model.colored:
                    raise ValidationError("L23 needs a colored [noise] model")
                sampler = make_sampler(model, cfg.grid)
            corr = sampler
        if lid == "L24" and bounds is None:
            bounds = verify_kernel_bounds(ev, float(cfg.analysis["epsilon"]), band=float(cfg.analysis["band"]))
        rep = lemma_integral(ev, lid, beta, points, correlation=corr, bounds=bounds if lid == "L24" else None)
        out.append(rep.to_dict())
        rows.append(rep.csv_row())
        extra = "" if rep.lower_bound is None else f"; lower bound {_fmt(rep.lower_bound)}"
        lines.append((LABELS.get(lid, lid), f"beta = {_fmt(beta)}: value {_fmt(rep.value)}, finite={rep.finite},"
                      f" verdict {rep.verdict}{extra}"))
    header = tuple(rows[0].keys())
    return {"lemmas": out, "mu1": ev.mu1}, {"lemmas.csv": (header, [tuple(r.values()) for r in rows])}, lines


def _dichotomy_label(cfg):
    return LABELS["colored"] if cfg.noise is not None and cfg.noise.colored else LABELS["white"]


def _rate_line(est):
    if est is None:
        return "rate not fitted (horizon too short)"
    return f"rate {est.rate:+.4g} +- {est.stderr:.2g} (R2 {est.r2:.3f}, {est.status}) on [{est.window[0]:g}, {est.window[1]:g}]"


def _try_fit(curve, window, x):
    try:
        return fit_exponent(curve, window, x)
    except AnalysisError:
        return None


def cmd_simulate(cfg: RunConfig, threads: int):
    sim = cfg.simulation_config()
    _, spec, ev = _spectrum(cfg)
    summary = simulate_ensemble(sim, threads=threads, evaluator=ev)
    eps = float(cfg.analysis["epsilon"])
    rows, fits, lines = [], {}, []
    window = cfg.analysis["window"]
    x = cfg.analysis["x"]
    energy = None
    for p in sorted(set(sim.moment_orders) | {2}):
        curve, en = estimate_moments(summary, p, eps, cfg.grid)
        if p == 2:
            energy = en
        for n, t in enumerate(curve.times):
            for i, xi in enumerate(curve.nodes):
                rows.append((repr(float(t)), repr(float(xi)), repr(p), repr(float(curve.values[n, i])),
                             repr(float(curve.stderr[n, i])), int(summary.counts[n])))
        est = _try_fit(curve, window, 0.0 if x == "energy" else x)
        fits[str(p)] = None if est is None else est.to_dict()
        lines.append((_dichotomy_label(cfg) if p == 2 else LABELS["higher"], f"xi = {sim.xi:g}, p = {p}: {_rate_line(est)}"))
    e_est = _try_fit(energy, window, None)
    cs_gap = summary.cauchy_schwarz_gap()
    res = {"summary": summary.to_dict(), "energy": energy.to_dict(), "fits": fits,
           "energy_fit": None if e_est is None else e_est.to_dict(), "cauchy_schwarz_gap": cs_gap,
           "status": summary.status, "dalang": dalang_check(sim.noise, cfg.spec.alpha_eff).to_dict()}
    lines.append((LABELS["energy"], f"sandwich holds at {int(np.sum(energy.sandwich_ok))}/{energy.times.size}"
                  f" record times; energy {_rate_line(e_est)}"))
    lines.append(("Ensemble", f"M = {summary.M}, diverged = {summary.diverged_count}, status {summary.status},"
                  f" Cauchy-Schwarz gap {cs_gap:.3g}"))
    return res, {"moments.csv": (MOMENT_COLUMNS, rows)}, lines


def _oracle_horizon(cfg, mu1):
    dt = float(cfg.analysis["oracle_dt"])
    n = int(cfg.analysis["n_records"]) - 1
    if cfg.analysis["oracle_T"] is not None:
        return dt, float(cfg.analysis["oracle_T"])
    chunk = dt * n
    return dt, chunk * math.ceil(8.0 / mu1 / chunk)


def cmd_oracle(cfg: RunConfig, threads: int):
    noise = cfg.require_noise()
    if not cfg.sigma.is_linear:
        raise ValidationError("the oracle needs linear sigma")
    _, spec, ev = _spectrum(cfg)
    dt, T = _oracle_horizon(cfg, ev.mu1)
    problem = SweepProblem(ev, cfg.u0(), noise, cfg.sigma.c, dt, T, int(cfg.analysis["n_records"]))
    sampler = make_sampler(noise, cfg.grid) if noise.colored else noise
    xi = float(cfg.simulation["xi"])
    curve = solve_volterra(ev, problem.u0, xi, cfg.sigma.c, sampler, dt, T, problem.record_times())
    energy = energy_sandwich(curve, cfg.grid, float(cfg.analysis["epsilon"]))
    x = cfg.analysis["x"]
    est = _try_fit(energy if x == "energy" else curve, cfg.analysis["window"], None if x == "energy" else x)
    res = {"curve": curve.to_dict(), "energy": energy.to_dict(), "fit": None if est is None else est.to_dict()}
    lines = [(_dichotomy_label(cfg), f"xi = {xi:g} oracle: {_rate_line(est)}"),
             (LABELS["energy"], f"sandwich holds at {int(np.sum(energy.sandwich_ok))}/{energy.times.size} record times")]
    beta = cfg.analysis["laplace_beta"]
    if beta is not None:
        probe = laplace_probe(curve, float(beta), float(cfg.analysis["epsilon"]), cfg.grid.R)
        res["laplace"] = probe.to_dict()
        lines.append((_dichotomy_label(cfg), f"Laplace probe beta = {float(beta):g}: {probe.verdict}"))
    return res, {"moments.csv": (ORACLE_COLUMNS, list(curve.csv_rows()))}, lines


def cmd_sweep(cfg: RunConfig, threads: int):
    noise = cfg.require_noise()
    method = cfg.analysis["method"]
    _, spec, ev = _spectrum(cfg)
    x = cfg.analysis["x"]
    if method == "oracle":
        if not cfg.sigma.is_linear:
            raise ValidationError("oracle sweeps need linear sigma; use method = 'monte-carlo'")
        dt, T = _oracle_horizon(cfg, ev.mu1)
        problem = SweepProblem(ev, cfg.u0(), noise, cfg.sigma.c, dt, T, int(cfg.analysis["n_records"]),
                               cfg.analysis["window"], x)
    else:
        base = cfg.simulation_config()
        problem = SweepProblem(ev, base.u0, noise, cfg.sigma.c, base.dt, base.T, window=cfg.analysis["window"],
                               x=x, p=cfg.analysis["p"], base=base, epsilon=float(cfg.analysis["epsilon"]))
    diagram = xi_sweep(problem, cfg.analysis["xis"], method=method, bisect=bool(cfg.analysis["bisect"]),
                       tol=float(cfg.analysis["tol"]), threads=threads)
    rows = []
    for xi, curve in diagram.curves.items():
        for r in curve.csv_rows():
            rows.append((repr(float(xi)),) + tuple(r))
    res = {"phase": diagram.to_dict()}
    label = _dichotomy_label(cfg)
    br = diagram.bracket
    lines = [(label, f"{diagram.status}; bracket {'none' if br is None else f'[{br[0]:.4g}, {br[1]:.4g}]'};"
              f" rates nondecreasing within 2 stderr: {diagram.monotone()}")]
    for xi, e in zip(diagram.xis, diagram.estimates):
        lines.append((label, f"xi = {xi:.4g}: {_rate_line(e)}"))
    beta = cfg.analysis["laplace_beta"]
    if beta is not None:
        probes = {}
        for xi, curve in diagram.curves.items():
            probe = laplace_probe(curve, float(beta), float(cfg.analysis["epsilon"]), cfg.grid.R)
            probes[repr(float(xi))] = probe.to_dict()
        res["laplace"] = probes
    tables = {"phase.csv": (("xi", "rate", "stderr", "R2", "status"), list(diagram.csv_rows())),
              "moments.csv": (("xi",) + ORACLE_COLUMNS, rows)}
    return res, tables, lines


COMMANDS = {
    "operator-info": cmd_operator_info, "kernel-verify": cmd_kernel_verify, "lemma-check": cmd_lemma_check,
    "simulate": cmd_simulate, "oracle": cmd_oracle, "sweep": cmd_sweep,
}


def run_config(path, subcommand: str, out_dir=None, threads=None, seed=None) -> int:
    """Load, run and persist one subcommand; return the exit status."""
    if subcommand not in COMMANDS:
        raise ValidationError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    threads = resolve_threads(threads)
    results, tables, lines = COMMANDS[subcommand](cfg, threads)
    report = {"tool": "fracheat", "version": __version__, "subcommand": subcommand,
              "config_hash": cfg.config_hash, "config": cfg.canonical(), "results": results}
    emit_report(report, out_dir or cfg.output["dir"], tables, lines)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="fracheat", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default=None, help="output directory (default: [output] dir)")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or 1)")
        p.add_argument("--seed", type=int, default=None, help="override simulation.seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_config(args.config, args.command, args.out, args.threads, args.seed)
    except FracHeatError as exc:
        payload, code = exc.to_dict(), exc.exit_code
    except (OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        payload, code = {"error": type(exc).__name__, "message": str(exc)}, 3
    payload["exit_code"] = code
    sys.stderr.write(json.dumps(sanitize(payload), sort_keys=True) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
