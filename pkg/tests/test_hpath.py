import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from sotp.bridge import sinkhorn_solve
from sotp.config import prior_pushforward
from sotp.hpath import (ControlMeasure, DriftField, JensenViolation, MarginalFlow, PathEnsemble, bridge_flow,
                        conditional_drift, cost_flow, cost_pathwise, cost_relaxed, default_test_family,
                        empirical_marginal, energy, euler_maruyama, fokker_planck_residual, h_function, hpath_drift,
                        jensen_reduction_check, mixture_drift, schrodinger_cost, time_weights)
from sotp.kernel import CoefficientField, gaussian_kernel, kernel_from_start, kernel_to_terminal
from sotp.measures import Grid, GridMeasure, wasserstein2_1d

UNIT = CoefficientField.constant(1.0)


def bridge_setup(n, nt, P1=None, box=6.0):
    g = Grid.from_bounds(-box, box, n)
    K = gaussian_kernel(1.0, g, g, 0.0, 1.0)
    P0 = GridMeasure.from_distribution(norm(-0.5, 0.5), g)
    P1 = P1(P0, K) if P1 else GridMeasure.from_distribution(norm(0.5, 0.6), g)
    rep = sinkhorn_solve(K, P0, P1, tol=1e-12)
    tg = np.linspace(0, 1, nt)
    h = h_function(kernel_to_terminal("gaussian", UNIT, g, tg), rep.potentials)
    drift = hpath_drift(h, UNIT)
    flow = bridge_flow(rep.potentials, kernel_from_start("gaussian", UNIT, g, tg), h)
    return rep, flow, drift


@pytest.fixture(scope="module")
def setup():
    return bridge_setup(240, 51)


def test_time_weights():
    np.testing.assert_allclose(time_weights([0, 0.5, 1.5]), [0.25, 0.75, 0.5])


def test_flow_endpoints_match_marginals(setup):
    rep, flow, _ = setup
    np.testing.assert_allclose(flow.weights[0], rep.coupling.row_sums(), atol=1e-12)
    np.testing.assert_allclose(flow.weights[-1], rep.coupling.col_sums(), atol=1e-12)
    assert flow.mass_defect < 1e-6


def test_fokker_planck_residual_and_order(setup):
    _, flow, drift = setup
    r1 = fokker_planck_residual(flow, UNIT, drift)
    assert r1 == pytest.approx(0.0019582142450833007, rel=1e-6)
    _, flow0, drift0 = bridge_setup(120, 26)
    r0 = fokker_planck_residual(flow0, UNIT, drift0)
    assert math.log2(r0 / r1) >= 1.8


def test_wrong_drift_fails_fokker_planck(setup):
    _, flow, drift = setup
    bad = DriftField(drift.time_grid, drift.grid, drift.values + 0.3)
    assert fokker_planck_residual(flow, UNIT, bad) > 0.1


def test_prior_target_gives_reference_drift():
    _, flow, drift = bridge_setup(200, 11, P1=prior_pushforward, box=10.0)
    mid = np.abs(drift.grid.centers) < 3
    assert np.max(np.abs(drift.values[:, mid])) <= 1e-6


def test_flow_cost_matches_static_value(setup):
    rep, flow, drift = setup
    cf = cost_flow(flow, drift, schrodinger_cost(UNIT))
    assert cf == pytest.approx(0.7725619540821311, abs=1e-10)
    assert abs(cf - rep.value_VS) <= 1e-3


def test_euler_maruyama_oracle_and_determinism(setup):
    rep, flow, drift = setup
    L = schrodinger_cost(UNIT)
    kw = dict(record_stride=10, cost=L, within_cell=True)
    ens = euler_maruyama(drift, UNIT, flow.measure(0), 4000, 2e-3, 5, **kw)
    np.testing.assert_allclose(ens.paths[:3, -1], [1.05708117, 0.49597208, -0.19035794], atol=1e-8)
    again = euler_maruyama(drift, UNIT, flow.measure(0), 4000, 2e-3, 5, **kw)
    np.testing.assert_array_equal(ens.paths, again.paths)
    assert wasserstein2_1d(empirical_marginal(ens, 1.0), flow.measure(50)) <= 0.05
    assert abs(cost_pathwise(ens) - rep.value_VS) <= 5 / math.sqrt(4000) + 0.01
    assert abs(cost_pathwise(ens, L) - rep.value_VS) <= 5 / math.sqrt(4000) + 0.01


def test_euler_maruyama_input_errors(setup):
    _, flow, drift = setup
    with pytest.raises(ValueError):
        euler_maruyama(drift, UNIT, 0.0, 0, 1e-3, 0)
    with pytest.raises(ValueError):
        euler_maruyama(drift, UNIT, 0.0, 10, 3e-3, 0)
    with pytest.raises(ValueError):
        euler_maruyama(drift, UNIT, 0.0, 10, 2e-3, 0, record_stride=7)


def test_ensemble_save_load(tmp_path, setup):
    _, flow, drift = setup
    ens = euler_maruyama(drift, UNIT, 0.0, 50, 0.02, 1, cost=schrodinger_cost(UNIT))
    ens.save(tmp_path / "ens.meta.json")
    back = PathEnsemble.load(tmp_path / "ens.meta.json")
    np.testing.assert_array_equal(back.paths, ens.paths)
    np.testing.assert_array_equal(back.running_cost, ens.running_cost)


def test_energy_of_zero_drift(setup):
    _, flow, drift = setup
    zero = DriftField(drift.time_grid, drift.grid, np.zeros_like(drift.values))
    e = energy(flow, UNIT, zero)
    assert e.fec == 0.0 and e.gfec == 0.0
    assert energy(flow, UNIT, drift).fec == pytest.approx(2 * cost_flow(flow, drift, schrodinger_cost(UNIT)))


def test_default_test_family_derivatives():
    x = np.linspace(-3, 3, 7)
    for tf in default_test_family():
        num = (tf.f(x + 1e-6) - tf.f(x - 1e-6)) / 2e-6
        np.testing.assert_allclose(tf.df(x), num, atol=1e-6)


# Jensen reduction and mixtures

def random_control_measure(rng, n_times=4, n_loc=6, per_loc=5):
    slices = []
    for _ in range(n_times):
        x = np.repeat(rng.normal(0, 1, n_loc), per_loc)
        u = rng.normal(0, 1.5, x.size)
        w = rng.dirichlet(np.ones(x.size))
        slices.append((x, u, w))
    return ControlMeasure(np.linspace(0, 1, n_times), tuple(slices))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_jensen_reduction_property(seed):
    nu = random_control_measure(np.random.default_rng(seed))
    rep = jensen_reduction_check(nu, lambda t, x, u: u * u + np.abs(u) + x * u, strictly_convex=True, margin=0.0)
    assert rep.gap >= -1e-12 and rep.strict
    assert rep.relaxed_cost == pytest.approx(cost_relaxed(nu, lambda t, x, u: u * u + np.abs(u) + x * u))


def test_jensen_equality_for_delta_controls(setup):
    _, flow, drift = setup
    nu = ControlMeasure.from_flow(flow, drift)
    rep = jensen_reduction_check(nu, schrodinger_cost(UNIT), strictly_convex=True, margin=0.0)
    assert abs(rep.gap) <= 1e-12


def test_jensen_violation_for_concave_cost():
    nu = random_control_measure(np.random.default_rng(0))
    with pytest.raises(JensenViolation):
        jensen_reduction_check(nu, lambda t, x, u: -u * u)
    rep = jensen_reduction_check(nu, lambda t, x, u: -u * u, convex=False)
    assert rep.gap < 0


def test_conditional_drift_averages_cells():
    g = Grid.from_bounds(0, 2, 2)
    nu = ControlMeasure(np.array([0.0]), ((np.array([0.2, 0.7, 1.5]), np.array([1.0, 3.0, -1.0]),
                                           np.array([0.25, 0.25, 0.5])),))
    d = conditional_drift(nu, g)
    np.testing.assert_allclose(d.values[0], [2.0, -1.0])
    assert d.mask[0].all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0))
def test_mixture_inequality(seed, lam):
    rng = np.random.default_rng(seed)
    g = Grid.from_bounds(-2, 2, 12)
    tg = np.linspace(0, 1, 3)

    def pair():
        w = rng.dirichlet(np.ones(g.n), size=tg.size)
        return MarginalFlow(tg, g, w / w.sum(axis=1, keepdims=True)), DriftField(tg, g, rng.normal(0, 2, w.shape))

    f0, f1 = pair(), pair()
    L = schrodinger_cost(UNIT)
    flow, drift = mixture_drift(f0, f1, lam)
    lhs = cost_flow(flow, drift, L)
    rhs = (1 - lam) * cost_flow(*f0, L) + lam * cost_flow(*f1, L)
    assert lhs <= rhs + 1e-12
