import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracheat.errors import (AssumptionViolation, ConfigurationError, DataError, InvalidSigmaError, QueryError,
                             ValidationError)
from fracheat.heatkernel import apply_semigroup
from fracheat.noise import CorrelationModel, white_sampler
from fracheat.operator import DomainGrid, Fractional
from fracheat.sde import (SigmaFunction, SimulationConfig, initial_condition, noise_propagator,
                          simulate_ensemble, step, validate_sigma)


def config(ev, **kw):
    base = dict(spec=Fractional(1.5), grid=ev.grid, noise=CorrelationModel.white(),
                sigma=SigmaFunction("linear", 1.0), xi=1.0, u0=initial_condition("cosine", ev.grid),
                dt=1e-2, T=0.2, M=300, seed=1, record_times=(0.1, 0.2), block_size=64)
    base.update(kw)
    return SimulationConfig(**base)


# ----- sigma


def test_linear_sigma_constants():
    rep = validate_sigma(SigmaFunction("linear", -2.0))
    assert rep["lower bound"].measured == pytest.approx(2.0)
    assert rep["upper bound"].measured == pytest.approx(2.0)


def test_saturating_sigma_bounds_on_test_grid():
    rep = validate_sigma(SigmaFunction("saturating-linear", 1.0, 0.5))
    assert 1.0 <= rep["lower bound"].measured <= rep["upper bound"].measured <= 1.5
    assert rep["lipschitz"].measured <= 1.0 * (1 + 9 / 8 * 0.5) + 1e-9


def test_zero_slope_is_rejected():
    with pytest.raises(InvalidSigmaError) as err:
        validate_sigma(SigmaFunction("linear", 0.0))
    assert err.value.witness is not None


@pytest.mark.parametrize("c, s", [(1.0, 1.0), (-1.0, 0.2), (1.0, -0.1)])
def test_saturating_parameter_range(c, s):
    with pytest.raises(InvalidSigmaError):
        validate_sigma(SigmaFunction("saturating-linear", c, s))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(0.1, 5.0), s=st.floats(0.0, 0.99), x=st.floats(-1e6, 1e6))
def test_saturating_sigma_sector_bound(c, s, x):
    sig = SigmaFunction("saturating-linear", c, s)
    y = abs(sig(x))
    assert c * abs(x) * (1 - 1e-12) <= y <= c * (1 + s) * abs(x) * (1 + 1e-12)


# ----- one step


def test_noiseless_step_is_semigroup(ev15, cosine):
    E = ev15.semigroup_matrix(0.01)
    out = step(cosine, 0.0, SigmaFunction(), E, np.ones_like(cosine))
    np.testing.assert_array_equal(out, apply_semigroup(ev15, 0.01, cosine))


def test_zero_state_is_absorbing(ev15):
    E = ev15.semigroup_matrix(0.01)
    dF = white_sampler(ev15.grid, 2).sample_block(0.01, 0, 0, 1)[:, 0]
    assert np.all(step(np.zeros(ev15.grid.N), 3.0, SigmaFunction(), E, dF) == 0)


def test_step_rejects_non_finite_state(ev15):
    E = ev15.semigroup_matrix(0.01)
    bad = np.full(ev15.grid.N, np.inf)
    with pytest.raises(DataError):
        step(bad, 1.0, SigmaFunction(), E, np.zeros(ev15.grid.N))


def test_exact_variance_propagator_matches_integrated_variance(ev15):
    # Q^2 = int_0^dt E(2s) ds / dt in every eigenmode
    dt = 0.05
    Q = noise_propagator(ev15, dt)
    lam = np.asarray(ev15.spectrum.eigenvalues)
    V = ev15.spectrum.orthonormal
    target = (V * (-np.expm1(-2 * lam * dt) / (2 * lam * dt))) @ V.T
    np.testing.assert_allclose(Q @ Q, target, atol=1e-12)
    np.testing.assert_array_equal(noise_propagator(ev15, dt, "exponential-euler"), ev15.semigroup_matrix(dt))


# ----- configuration


def test_config_validation(ev15):
    with pytest.raises(ValidationError):
        config(ev15, u0=-initial_condition("cosine", ev15.grid))
    with pytest.raises(ValidationError):
        config(ev15, record_times=(0.015,))
    with pytest.raises(ValidationError):
        config(ev15, u0=np.where(np.abs(ev15.grid.nodes) > 0.6, 1.0, 0.0))  # no mass on K
    with pytest.raises(ValidationError):
        config(ev15, moment_orders=(1,))


def test_accuracy_guard(ev15):
    with pytest.raises(ConfigurationError):
        simulate_ensemble(config(ev15, dt=0.1, T=0.2, record_times=(0.2,)), evaluator=ev15)


def test_dalang_failure_is_refused():
    grid = DomainGrid(1.0, 16)
    cfg = SimulationConfig(Fractional(0.9), grid, CorrelationModel.white(), SigmaFunction(), 1.0,
                           initial_condition("cosine", grid), 1e-2, 0.1, 10, record_times=(0.1,))
    with pytest.raises(AssumptionViolation):
        simulate_ensemble(cfg)


# ----- ensembles


def test_noiseless_ensemble_has_zero_variance(ev15):
    cfg = config(ev15, xi=0.0, M=50)
    s = simulate_ensemble(cfg, evaluator=ev15)
    m2, se = s.moment(2)
    for k, t in enumerate(cfg.record_times):
        exact = apply_semigroup(ev15, t, cfg.u0) ** 2
        np.testing.assert_allclose(m2[k], exact, rtol=1e-12)
    assert np.all(se <= 1e-8 * m2.max())  # round-off only


def test_ensemble_mean_follows_semigroup(ev15):
    cfg = config(ev15, M=2000, dt=1e-2, T=0.5, record_times=(0.1, 0.3, 0.5))
    s = simulate_ensemble(cfg, evaluator=ev15)
    mean, se = s.mean()
    for k, t in enumerate(cfg.record_times):
        exact = apply_semigroup(ev15, t, cfg.u0)
        assert np.all(np.abs(mean[k] - exact) <= 4 * se[k])


def test_results_do_not_depend_on_thread_count(ev15):
    cfg = config(ev15, M=500, block_size=64, moment_orders=(2, 3))
    ref = simulate_ensemble(cfg, threads=1, evaluator=ev15)
    for threads in (3, 8):
        other = simulate_ensemble(cfg, threads=threads, evaluator=ev15)
        np.testing.assert_array_equal(other.abs_sums, ref.abs_sums)
        np.testing.assert_array_equal(other.energy_sums, ref.energy_sums)


def test_sample_cauchy_schwarz_holds(ev15):
    s = simulate_ensemble(config(ev15, xi=2.0, moment_orders=(2, 4)), evaluator=ev15)
    m2, _ = s.moment(2)
    m4, _ = s.moment(4)
    assert np.all(m4 >= m2**2 * (1 - 1e-12))
    assert s.cauchy_schwarz_gap() >= -1e-12


def test_energy_sums_match_node_sums(ev15):
    s = simulate_ensemble(config(ev15), evaluator=ev15)
    e, _ = s.energy_squared()
    m2, _ = s.moment(2)
    np.testing.assert_allclose(e, s.h * m2.sum(axis=1), rtol=1e-12)


def test_divergent_paths_are_counted(ev15):
    cfg = config(ev15, xi=60.0, M=128, T=0.2, blowup=1e6)
    s = simulate_ensemble(cfg, evaluator=ev15)
    assert s.diverged_count > 0
    assert s.counts[-1] == cfg.M - sum(1 for _, st_ in s.diverged if st_ <= 20)
    assert s.status in ("warning", "unusable")
    assert all(isinstance(p, int) and isinstance(k, int) for p, k in s.diverged)


def test_missing_moment_order_is_a_query_error(ev15):
    s = simulate_ensemble(config(ev15, M=20), evaluator=ev15)
    with pytest.raises(QueryError):
        s.moment(6)


def test_colored_noise_run(ev15):
    cfg = config(ev15, noise=CorrelationModel.cauchy(0.3), M=200)
    s = simulate_ensemble(cfg, evaluator=ev15)
    assert s.status == "ok" and s.meta["noise_floor"] > 0


@pytest.mark.slow
def test_mean_identity_at_full_scale(ev15):
    rt = (0.25, 0.5, 0.75, 1.0)
    cfg = config(ev15, M=20000, dt=1e-3, T=1.0, record_times=rt, block_size=512)
    mean, se = simulate_ensemble(cfg, evaluator=ev15).mean()
    for k, t in enumerate(rt):
        assert np.all(np.abs(mean[k] - apply_semigroup(ev15, t, cfg.u0)) <= 4 * se[k])


@pytest.mark.slow
def test_weak_step_size_self_convergence(ev15):
    # same run at dt and dt/2: second moments agree within 3 standard errors
    rt = (0.5, 1.0)
    runs = [simulate_ensemble(config(ev15, M=8000, dt=dt, T=1.0, record_times=rt), evaluator=ev15)
            for dt in (2e-3, 1e-3)]
    (a, sa), (b, sb) = (r.moment(2) for r in runs)
    idx = [ev15.grid.index_of(x) for x in (-0.5, 0.0, 0.5)]
    z = np.abs(a[:, idx] - b[:, idx]) / np.hypot(sa[:, idx], sb[:, idx])
    assert np.all(z < 3), z
