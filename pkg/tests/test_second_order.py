"""Second-order evolution: manufactured solutions, the Bessel oracle for
the homogeneous operator, constraint propagation from consistent data,
asymptotic fits, and the order-n scalar driver."""

import math
import warnings

import numpy as np
import pytest

from nohair.background import (
    AsymptoticBackground,
    BackgroundParams,
    NumericalBackground,
    coefficient_A,
)
from nohair.errors import InputError, RangeError
from nohair.fields import Grid3, ScalarField, SymTensorField, VectorField
from nohair.first_order import (
    PerturbationConfig,
    ScalarModeSpec,
    TensorModeSpec,
    analytic_scalar_1,
    analytic_scalar_1_prime,
    init_first_order,
)
from nohair.numerics import IntegratorSpec
from nohair.second_order import (
    ConstraintWarning,
    CoevolvedFirstOrderSources,
    ExplicitSources,
    SecondOrderRun,
    SecondOrderState,
    assemble_sources,
    constraint_consistent_init,
    constraint_residuals_2,
    evolve_second_order,
    evolve_scalar_n,
    fit_asymptotics,
    split_chi2,
)
from nohair.spectral import laplacian, spectral_derivative, svt_decompose, sym_gradient

PROD = dict(Lambda=0.001, rho0=0.01)


def log_grid(tau0, decades=2.0, points=80):
    taus = -np.logspace(math.log10(-tau0), math.log10(-tau0) - decades, points)
    taus[0] = tau0
    return taus


def test_zero_sources_zero_init_stays_zero():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    provider = ExplicitSources(grid, NumericalBackground(params))
    taus = log_grid(params.tau0, points=20)
    run = evolve_second_order(SecondOrderState.zeros(grid, taus[0]),
                              provider, None, taus)
    for s in run.states:
        assert s.phi2.max_abs() == 0.0
        assert s.chi2.max_abs() == 0.0


def test_zero_source_phi2_matches_bessel_oracle():
    # lp0's homogeneous operator equals the first-order scalar one, so the
    # closed-form pair is an oracle on the continued asymptotic branch
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    A = coefficient_A(**PROD)
    bg = AsymptoticBackground(params.Lambda, params.mass, density_branch="continued")
    provider = ExplicitSources(grid, bg)
    taus = log_grid(params.tau0, decades=2.0, points=60)
    x, _, _ = grid.coords()
    pattern = np.broadcast_to(np.cos(grid.dk * x), grid.shape).copy()
    c1, c2 = 0.6, -0.2
    init = SecondOrderState(
        tau=taus[0],
        phi2=ScalarField(grid, pattern * analytic_scalar_1(c1, c2, A, taus[0])),
        phi2_prime=ScalarField(grid, pattern * analytic_scalar_1_prime(c1, c2, A, taus[0])),
        chi2=SymTensorField.zeros(grid),
        chi2_prime=SymTensorField.zeros(grid))
    run = evolve_second_order(init, provider, None, taus)
    exact_series = analytic_scalar_1(c1, c2, A, taus)
    scale = np.max(np.abs(exact_series))
    for s, exact in zip(run.states[::6], exact_series[::6]):
        assert np.max(np.abs(s.phi2.values - pattern * exact)) < 1e-6 * scale


def _manufactured_setup(grid, params):
    """chi2 = s(tau) X_ab(x), phi2 = w(tau) Y(x) with smooth profiles."""
    x, y, z = grid.coords()
    X = np.zeros((6,) + grid.shape)
    X[0] = 1e-3 * np.cos(grid.dk * z)
    X[3] = -7e-4 * np.cos(grid.dk * (x + y))
    X[5] = -(X[0] + X[3])
    X[1] = 5e-4 * np.sin(grid.dk * (y + z))
    Y = np.broadcast_to(1e-3 * np.cos(grid.dk * x) * np.cos(grid.dk * y),
                        grid.shape).copy()

    def s(t):
        return 1.0 + 0.3 * (t / params.tau0) ** 2

    def sp(t):
        return 0.6 * t / params.tau0 ** 2

    def spp(t):
        return 0.6 / params.tau0 ** 2

    def w(t):
        return 0.5 - 0.2 * (t / params.tau0) ** 3

    def wp(t):
        return -0.6 * t ** 2 / params.tau0 ** 3

    def wpp(t):
        return -1.2 * t / params.tau0 ** 3
    return X, Y, (s, sp, spp), (w, wp, wpp)


def test_manufactured_solution_recovery():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = AsymptoticBackground(params.Lambda, params.mass)
    X, Y, (s, sp, spp), (w, wp, wpp) = _manufactured_setup(grid, params)
    Xf = SymTensorField(grid, X)
    Yf = ScalarField(grid, Y)

    lap_Y = laplacian(Yf).values
    hess_Y = {(a, b): spectral_derivative(Yf, (a, b)).values
              for a in range(3) for b in range(3)}
    lap_X = np.stack([laplacian(ScalarField(grid, X[i])).values for i in range(6)])
    from nohair.fields import SYM_COMPS, SYM_INDEX
    div_X = np.stack([sum(spectral_derivative(
        ScalarField(grid, X[SYM_INDEX[(a, b)]]), (a,)).values for a in range(3))
        for b in range(3)])
    div_div_X = sum(spectral_derivative(ScalarField(grid, div_X[b]), (b,)).values
                    for b in range(3))
    grad_div_X = {(a, b): spectral_derivative(ScalarField(grid, div_X[a]), (b,)).values
                  for a in range(3) for b in range(3)}

    def n1(t):
        p = bg.point(t)
        return (wpp(t) + p.hconf * wp(t) - 0.5 * p.rho_a2 * w(t)) * Y

    def n4(t):
        p = bg.point(t)
        phi_pp2h = (wpp(t) + 2.0 * p.hconf * wp(t))
        chi_pp2h = (spp(t) + 2.0 * p.hconf * sp(t))
        out = np.empty((6,) + grid.shape)
        for i, (a, b) in enumerate(SYM_COMPS):
            val = 0.5 * chi_pp2h * X[i] + w(t) * hess_Y[(a, b)]
            val += s(t) * (0.5 * grad_div_X[(a, b)] + 0.5 * grad_div_X[(b, a)]
                           - 0.5 * lap_X[i])
            if a == b:
                val += -phi_pp2h * Y - 0.25 * s(t) * div_div_X
            out[i] = val
        return out

    provider = ExplicitSources(grid, bg, n1=n1, n4=n4)
    taus = log_grid(params.tau0, decades=1.5, points=50)
    init = SecondOrderState(
        tau=taus[0],
        phi2=ScalarField(grid, w(taus[0]) * Y),
        phi2_prime=ScalarField(grid, wp(taus[0]) * Y),
        chi2=SymTensorField(grid, s(taus[0]) * X),
        chi2_prime=SymTensorField(grid, sp(taus[0]) * X))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstraintWarning)
        run = evolve_second_order(init, provider, None, taus,
                                  spec=IntegratorSpec(abs_tol=1e-13, rel_tol=1e-11))
    scale_chi = np.max(np.abs(X))
    scale_phi = np.max(np.abs(Y))
    for idx in (10, 25, -1):
        t = run.taus[idx]
        st = run.states[idx]
        assert np.max(np.abs(st.chi2.values - s(t) * X)) < 1e-7 * scale_chi
        assert np.max(np.abs(st.phi2.values - w(t) * Y)) < 1e-7 * scale_phi


def test_constraint_residuals_zero_state():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    provider = ExplicitSources(grid, bg)
    src = provider.sources(params.tau0, provider.initial())
    state = SecondOrderState.zeros(grid, params.tau0)
    res = constraint_residuals_2(state, src, provider.bg_point(params.tau0, provider.initial()))
    assert res.energy.max_abs() == 0.0
    assert res.momentum.max_abs() == 0.0


def test_manufactured_constrained_data_has_tiny_residual(rng):
    # solve the two constraints for the longitudinal pieces, then verify
    grid = Grid3(16)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    cfg = PerturbationConfig(tensor_modes=(
        TensorModeSpec(k=(0, 0, 1), K_amp=1e-4, F_amp=2e-4),
        TensorModeSpec(k=(1, 1, 0), K_amp=1e-4, F_amp=1e-4, pol="cross")))
    fields = init_first_order(cfg, grid, tau0=params.tau0)
    provider = CoevolvedFirstOrderSources(fields, bg)
    co0 = provider.initial()
    src0 = provider.sources(params.tau0, co0)
    bg0 = provider.bg_point(params.tau0, co0)
    init = constraint_consistent_init(src0, bg0)
    res = constraint_residuals_2(init, src0, bg0)
    assert res.energy_normalized < 1e-8
    assert res.momentum_normalized < 1e-8


def test_constraints_propagate_from_consistent_tensor_data():
    # the strongest internal-consistency check of the four transcribed
    # equations: start on the constraint surface with exact tensor-sector
    # first-order data and verify the monitored residuals stay small
    grid = Grid3(16)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    cfg = PerturbationConfig(tensor_modes=(
        TensorModeSpec(k=(0, 0, 1), K_amp=5e-5, F_amp=2e-4),))
    fields = init_first_order(cfg, grid, tau0=params.tau0)
    provider = CoevolvedFirstOrderSources(fields, bg)
    co0 = provider.initial()
    src0 = provider.sources(params.tau0, co0)
    bg0 = provider.bg_point(params.tau0, co0)
    init = constraint_consistent_init(src0, bg0)
    taus = log_grid(params.tau0, decades=2.0, points=60)
    run = evolve_second_order(init, provider, None, taus)
    worst = 0.0
    for t, state, co in zip(run.taus[::6], run.states[::6], run.co_states[::6]):
        src = provider.sources(t, co)
        res = constraint_residuals_2(state, src, provider.bg_point(t, co))
        worst = max(worst, res.energy_normalized, res.momentum_normalized)
    assert worst < 1e-4


def test_zero_init_with_sources_warns():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    cfg = PerturbationConfig(scalar_modes=(ScalarModeSpec(k=(1, 0, 0), phi0=1e-3),))
    fields = init_first_order(cfg, grid, tau0=params.tau0)
    provider = CoevolvedFirstOrderSources(fields, bg)
    taus = log_grid(params.tau0, decades=0.3, points=4)
    with pytest.warns(ConstraintWarning):
        evolve_second_order(SecondOrderState.zeros(grid, taus[0]), provider, None, taus)


def _synthetic_run(grid, taus, make_state, growth_A=None):
    states = [make_state(t) for t in taus]
    return SecondOrderRun(grid=grid, taus=taus, states=states,
                          co_states=[np.zeros(0)] * len(taus),
                          bg_points=[None] * len(taus), provider=None,
                          growth_A=growth_A)


def test_fit_asymptotics_exact_quadratic_model():
    grid = Grid3(8)
    taus = log_grid(-10.0, decades=2.0, points=50)
    x, _, _ = grid.coords()
    pattern = np.broadcast_to(np.cos(grid.dk * x), grid.shape).copy()

    def make_state(t):
        phi = ScalarField(grid, (5.0 + 3.0 * t * t) * pattern)
        chi = SymTensorField.zeros(grid)
        chi.values[1] = (2.0 + 0.5 * t * t) * pattern
        return SecondOrderState(t, phi, ScalarField.zeros(grid), chi,
                                SymTensorField.zeros(grid))

    fit = fit_asymptotics(_synthetic_run(grid, taus, make_state, growth_A=2.0))
    assert np.max(np.abs(fit.L_over_A2.values - 5.0 * pattern)) < 1e-9
    assert np.max(np.abs(fit.L.values - 20.0 * pattern)) < 1e-8
    assert fit.fitted_order == pytest.approx(2.0, abs=0.01)
    assert fit.fit_ok


def test_fit_asymptotics_with_cubic_contamination():
    grid = Grid3(8)
    taus = log_grid(-10.0, decades=3.0, points=80)
    x, _, _ = grid.coords()
    pattern = np.broadcast_to(np.cos(grid.dk * x), grid.shape).copy()

    def make_state(t):
        phi = ScalarField(grid, (5.0 + 3.0 * t * t + abs(t) ** 3) * pattern)
        return SecondOrderState(t, phi, ScalarField.zeros(grid),
                                SymTensorField.zeros(grid), SymTensorField.zeros(grid))

    fit = fit_asymptotics(_synthetic_run(grid, taus, make_state))
    assert np.max(np.abs(fit.L_over_A2.values - 5.0 * pattern)) < 1e-3


def test_fit_asymptotics_requires_coverage():
    grid = Grid3(8)
    taus = log_grid(-10.0, decades=1.0, points=30)

    def make_state(t):
        return SecondOrderState.zeros(grid, t)

    with pytest.raises(RangeError):
        fit_asymptotics(_synthetic_run(grid, taus, make_state))


def test_split_chi2_planted_parts(rng):
    grid = Grid3(16)
    from conftest import random_vector
    from nohair.spectral import transverse_projection
    W = transverse_projection(random_vector(grid, rng, kmax=3))
    W.values -= W.values.mean(axis=(1, 2, 3), keepdims=True)
    grad_part = sym_gradient(W)
    Z2, pi2, (trace, chi_pot) = split_chi2(grad_part)
    assert pi2.max_abs() < 1e-10 * W.max_abs()
    assert np.max(np.abs(Z2.values - W.values)) < 1e-10 * W.max_abs()


def test_scalar_n_at_order_one_reproduces_free_evolution():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    taus = log_grid(params.tau0, decades=1.0, points=30)
    x, _, _ = grid.coords()
    pattern = np.broadcast_to(np.cos(grid.dk * x), grid.shape).copy()
    init = (ScalarField(grid, 1e-3 * pattern), ScalarField.zeros(grid))
    _, states = evolve_scalar_n(1, None, bg, init, taus)

    from nohair.first_order import evolve_mode_ode
    series = evolve_mode_ode("scalar", 0.0, (1e-3, 0.0), bg, taus)[:, 0]
    for (phi, _), expect in zip(states[::5], series[::5]):
        assert np.max(np.abs(phi.values - expect * pattern)) < 1e-9 * abs(series[0])


def test_scalar_n_two_consistent_with_full_path():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    cfg = PerturbationConfig(
        scalar_modes=(ScalarModeSpec(k=(1, 0, 0), phi0=1e-3, dphi0=5e-5),),
        tensor_modes=(TensorModeSpec(k=(0, 0, 1), F_amp=5e-5),))
    fields = init_first_order(cfg, grid, tau0=params.tau0)
    taus = log_grid(params.tau0, decades=1.0, points=25)
    step = abs(params.tau0) / 400.0
    spec = IntegratorSpec(method="rk4_fixed", max_step=step)

    provider_full = CoevolvedFirstOrderSources(fields, bg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstraintWarning)
        run = evolve_second_order(SecondOrderState.zeros(grid, taus[0]),
                                  provider_full, None, taus, spec=spec)

    provider_n = CoevolvedFirstOrderSources(fields, NumericalBackground(params))
    init = (ScalarField.zeros(grid), ScalarField.zeros(grid))
    _, states = evolve_scalar_n(2, provider_n, None, init, taus, spec=spec)

    scale = max(s.phi2.max_abs() for s in run.states) or 1.0
    for (phi_n, _), s in zip(states, run.states):
        assert np.max(np.abs(phi_n.values - s.phi2.values)) < 1e-10 * scale


def test_scalar_n_three_with_settling_source():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    x, _, _ = grid.coords()
    pattern = np.broadcast_to(np.cos(grid.dk * x), grid.shape).copy()

    class Settling:
        co_dim = bg.co_state_dim

        def initial(self):
            return bg.initial_costate()

        def rhs(self, tau, co):
            return bg.costate_rhs(tau, co)

        def bg_point(self, tau, co):
            return bg.point(tau, co)

        def n1(self, tau, co):
            return (1e-6 + 2e-6 * (tau / params.tau0) ** 2) * pattern

    taus = log_grid(params.tau0, decades=3.0, points=120)
    init = (ScalarField.zeros(grid), ScalarField.zeros(grid))
    _, states = evolve_scalar_n(3, Settling(), None, init, taus)
    norms = np.array([s[0].values[0, 0, 0] for s in states])
    from nohair.second_order import settling_order
    order = settling_order(taus, norms)
    assert order >= 1.5
    assert abs(norms[-1]) > 0.0


def test_tau_grid_must_start_at_tau0():
    grid = Grid3(8)
    params = BackgroundParams(**PROD)
    bg = NumericalBackground(params)
    cfg = PerturbationConfig(scalar_modes=(ScalarModeSpec(k=(1, 0, 0), phi0=1e-4),))
    fields = init_first_order(cfg, grid, tau0=params.tau0)
    provider = CoevolvedFirstOrderSources(fields, bg)
    with pytest.raises(InputError):
        evolve_second_order(SecondOrderState.zeros(grid, -1.0), provider, None,
                            np.array([-1.0, -0.5]))
