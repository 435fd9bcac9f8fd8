import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fracheat.errors import ConfigurationError, QueryError, ValidationError
from fracheat.moments import (MomentCurve, energy_sandwich, estimate_moments, jensen_floor, solve_volterra_colored,
                              solve_volterra_white)
from fracheat.noise import CorrelationModel, build_covariance
from fracheat.operator import DomainGrid, Fractional, build_operator
from fracheat.sde import SigmaFunction, SimulationConfig, initial_condition, simulate_ensemble

from conftest import make_evaluator


def lyapunov_reference(ev, C, c, u0, times):
    """Second-moment matrix from dS/dt = -AS - SA + c (C o S)."""
    A = build_operator(ev.spectrum.spec, ev.grid).matrix
    N = ev.grid.N

    def rhs(t, s):
        S = s.reshape(N, N)
        return (-A @ S - S @ A + c * (C * S)).ravel()

    sol = solve_ivp(rhs, (0, times[-1]), np.outer(u0, u0).ravel(), t_eval=times, rtol=1e-10, atol=1e-13,
                    method="LSODA")
    return sol.y.T.reshape(-1, N, N)


@pytest.mark.parametrize("xi", [0.5, 2.0])
def test_white_oracle_matches_lyapunov_ode(ev15_small, xi):
    ev = ev15_small
    u0 = initial_condition("cosine", ev.grid)
    times = [0.5, 1.0]
    curve = solve_volterra_white(ev, u0, xi, 1.0, 1e-2, 1.0, times)
    ref = lyapunov_reference(ev, np.eye(ev.grid.N) / ev.grid.h, xi**2, u0, times)
    np.testing.assert_allclose(curve.values, np.diagonal(ref, axis1=1, axis2=2), rtol=2e-3)


@pytest.mark.parametrize("model", [CorrelationModel.riesz(0.5), CorrelationModel.cauchy(0.4)])
def test_colored_oracle_matches_lyapunov_ode(ev15_small, model):
    ev = ev15_small
    u0 = initial_condition("cosine", ev.grid)
    C = build_covariance(model, ev.grid).covariance
    times = [0.5, 1.0]
    curve = solve_volterra_colored(ev, u0, 1.5, 1.0, C, 1e-2, 1.0, times)
    ref = lyapunov_reference(ev, C, 2.25, u0, times)
    np.testing.assert_allclose(curve.covariance, ref, rtol=2e-3, atol=1e-6 * np.abs(ref).max())


def test_constant_noise_has_closed_form(ev15):
    # spatially constant noise: E u^2 = exp(xi^2 K t) |G_t u0|^2 exactly
    u0 = initial_condition("cosine", ev15.grid)
    times = np.linspace(0.0, 2.0, 11)
    sampler = build_covariance(CorrelationModel.constant(0.7), ev15.grid)
    curve = solve_volterra_colored(ev15, u0, 1.3, 1.0, sampler, 2e-2, 2.0, list(times))
    exact = np.exp(1.3**2 * 0.7 * times)[:, None] * jensen_floor(ev15, u0, times)
    np.testing.assert_allclose(curve.values, exact, rtol=1e-3)


def test_noiseless_oracles_are_exact(ev15, cosine):
    times = [0.0, 0.4, 1.0]
    floor = jensen_floor(ev15, cosine, times)
    w = solve_volterra_white(ev15, cosine, 0.0, 1.0, 0.1, 1.0, times)
    np.testing.assert_allclose(w.values, floor, rtol=1e-12)
    c = solve_volterra_colored(ev15, cosine, 0.0, 1.0, CorrelationModel.cauchy(0.5), 0.1, 1.0, times)
    np.testing.assert_allclose(c.covariance[-1], np.outer(np.sqrt(floor[-1]), np.sqrt(floor[-1])), rtol=1e-10)


def test_oracle_is_monotone_in_noise_level(ev15, cosine):
    times = list(np.linspace(0.0, 1.0, 6))
    prev = jensen_floor(ev15, cosine, times)
    for xi in (0.5, 1.0, 1.5, 2.0):
        cur = solve_volterra_white(ev15, cosine, xi, 1.0, 1e-2, 1.0, times).values
        assert np.all(cur >= prev * (1 - 1e-12))
        prev = cur


def test_covariance_stays_positive_semidefinite(ev15, cosine):
    curve = solve_volterra_colored(ev15, cosine, 1.5, 1.0, CorrelationModel.riesz(0.5), 2e-2, 1.0,
                                   [0.2, 0.6, 1.0])
    for S in curve.covariance:
        assert np.allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-8 * np.trace(S)


def test_oracle_preconditions(ev15, cosine):
    ev = make_evaluator(Fractional(0.9), N=16)
    with pytest.raises(ValidationError):
        solve_volterra_white(ev, np.ones(16), 1.0, 1.0, 0.1, 1.0)
    big = make_evaluator(Fractional(1.5), N=257)
    with pytest.raises(ConfigurationError):
        solve_volterra_colored(big, np.ones(257), 1.0, 1.0, CorrelationModel.cauchy(1.0), 0.1, 1.0)
    with pytest.raises(ValidationError):
        solve_volterra_white(ev15, cosine, 1.0, 1.0, 0.03, 1.0)


def test_energy_sandwich_is_exact(ev15, cosine):
    curve = solve_volterra_white(ev15, cosine, 1.0, 1.0, 2e-2, 1.0, [0.2, 0.6, 1.0])
    e = energy_sandwich(curve, ev15.grid, 0.2)
    assert e.sandwich_ok.all()
    np.testing.assert_allclose(e.squared, ev15.grid.h * curve.values.sum(axis=1), rtol=1e-14)


def test_monte_carlo_moment_curves(ev15):
    cfg = SimulationConfig(Fractional(1.5), ev15.grid, CorrelationModel.white(), SigmaFunction(), 1.0,
                           initial_condition("cosine", ev15.grid), 1e-2, 0.2, 200, record_times=(0.1, 0.2),
                           moment_orders=(2, 4))
    s = simulate_ensemble(cfg, evaluator=ev15)
    c2, energy = estimate_moments(s, 2, 0.2)
    c4, _ = estimate_moments(s, 4, 0.2)
    assert c2.provenance == "monte-carlo" and c2.stderr is not None
    assert np.all(c4.values >= c2.values**2 * (1 - 1e-12))
    np.testing.assert_allclose(energy.squared, ev15.grid.h * c2.values.sum(axis=1), rtol=1e-14)
    assert energy.sandwich_ok.all()
    with pytest.raises(QueryError):
        estimate_moments(s, 3, 0.2)


def test_noiseless_energy_is_semigroup_norm(ev15):
    u0 = initial_condition("cosine", ev15.grid)
    cfg = SimulationConfig(Fractional(1.5), ev15.grid, CorrelationModel.white(), SigmaFunction(), 0.0, u0,
                           1e-2, 0.3, 10, record_times=(0.1, 0.3))
    _, energy = estimate_moments(simulate_ensemble(cfg, evaluator=ev15), 2, 0.2)
    exact = np.sqrt(ev15.grid.h * jensen_floor(ev15, u0, [0.1, 0.3]).sum(axis=1))
    np.testing.assert_allclose(energy.values, exact, rtol=1e-12)


def test_curve_validates_shapes():
    with pytest.raises(ValidationError):
        MomentCurve([0.0, 1.0], np.zeros(3), np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        MomentCurve([1.0, 0.5], np.zeros(3), np.zeros((2, 3)))
