import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from sotp.bridge import sinkhorn_solve
from sotp.duality import (DualPotential, QuadraticHamiltonian, SampledHamiltonian, drift_recovery, dual_ascent,
                          dual_objective, hamiltonian, hjb_residual, hopf_cole_phi, potentials_to_dual,
                          running_cost_phi, running_dual_value, terminal_dual_value)
from sotp.hpath import MarginalFlow, h_function, hpath_drift
from sotp.kernel import CoefficientField, gaussian_kernel, kernel_to_terminal
from sotp.measures import Grid, GridMeasure

UNIT = CoefficientField.constant(1.0)
G = Grid.from_bounds(-6, 6, 240)
K = gaussian_kernel(1.0, G, G, 0.0, 1.0)
P0 = GridMeasure.from_distribution(norm(-0.5, 0.5), G)
P1 = GridMeasure.from_distribution(norm(0.5, 0.6), G)
TG = np.linspace(0, 1, 51)


@pytest.fixture(scope="module")
def solved():
    rep = sinkhorn_solve(K, P0, P1, tol=1e-12)
    kt = kernel_to_terminal("gaussian", UNIT, G, TG)
    return rep, kt


def test_strong_duality(solved):
    rep, _ = solved
    hist = []
    f, v = dual_ascent(K, P0, P1, tol=1e-12, history=hist)
    assert abs(v - rep.value_VS) <= 1e-6
    assert v == pytest.approx(0.7725022448376615, abs=1e-10)
    assert np.all(np.diff(hist) >= -1e-15)
    assert hist[-1] == v


def test_optimal_payoff_attains_primal(solved):
    rep, _ = solved
    fstar = potentials_to_dual(rep.potentials, G)
    assert terminal_dual_value(K, fstar, P0, P1) == pytest.approx(rep.value_VS, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_weak_duality(seed):
    rng = np.random.default_rng(seed)
    vs = 0.7725022448188511
    f = DualPotential(rng.uniform(-3, 3) * np.sin(rng.uniform(0.2, 2) * G.centers + rng.uniform(0, 6))
                      + rng.normal(0, 0.5, G.n), G)
    assert terminal_dual_value(K, f, P0, P1) <= vs + 1e-8


def test_dual_value_shift_invariant():
    f = DualPotential(np.sin(G.centers), G)
    assert terminal_dual_value(K, f.shifted(2.5), P0, P1) == pytest.approx(terminal_dual_value(K, f, P0, P1),
                                                                             abs=1e-12)


def test_hopf_cole_matches_log_h_and_drift(solved):
    rep, kt = solved
    phi = hopf_cole_phi(kt, potentials_to_dual(rep.potentials, G))
    h = h_function(kt, rep.potentials)
    assert np.max(np.abs(phi.values - h.log_values)) <= 1e-8
    b_dual = drift_recovery(phi, UNIT)
    assert np.max(np.abs(b_dual.values - hpath_drift(h, UNIT).values)) <= 1e-8
    assert dual_objective(potentials_to_dual(rep.potentials, G), phi, P0, P1) == pytest.approx(rep.value_VS,
                                                                                               abs=1e-9)


def test_hjb_residual_smooth_payoff(solved):
    _, kt = solved
    phi = hopf_cole_phi(kt, DualPotential(np.cos(G.centers), G))
    r = hjb_residual(phi, UNIT, margin=1.5)
    assert r == pytest.approx(0.0007304726482050827, rel=1e-6)
    gc = Grid.from_bounds(-6, 6, 120)
    coarse_kt = kernel_to_terminal("gaussian", UNIT, gc, np.linspace(0, 1, 26))
    assert hjb_residual(hopf_cole_phi(coarse_kt, DualPotential(np.cos(gc.centers), gc)), UNIT, margin=1.5) > 3 * r


def test_hopf_cole_constant_payoff(solved):
    _, kt = solved
    phi = hopf_cole_phi(kt, DualPotential(np.zeros(G.n), G))
    x = G.centers
    for k, t in enumerate(TG[:-1]):
        sd = math.sqrt(1.0 - t)
        box_mass = norm.cdf((6 - x) / sd) - norm.cdf((-6 - x) / sd)
        np.testing.assert_allclose(phi.values[k], np.log(box_mass), atol=0.02 * G.h ** 2 / (1.0 - t))


def test_running_cost_constant_payoff():
    f = DualPotential(np.full((TG.size, G.n), 0.3), G, TG)
    phi = running_cost_phi(UNIT, f)
    np.testing.assert_allclose(phi.values, 0.3 * (1 - TG)[:, None] * np.ones(G.n), atol=1e-6)
    assert hjb_residual(phi, UNIT, f_running=f) <= 1e-5
    w = np.tile(P0.weights, (TG.size, 1))
    assert running_dual_value(f, phi, MarginalFlow(TG, G, w)) == pytest.approx(0.0, abs=1e-6)


def test_dual_potential_validation():
    with pytest.raises(ValueError):
        DualPotential(np.full(G.n, np.nan), G)
    with pytest.raises(ValueError):
        DualPotential(np.zeros(3), G)
    with pytest.raises(ValueError):
        DualPotential(np.full(G.n, -np.inf), G)


def test_dual_ascent_rejects_partial_support():
    w = P1.weights.copy()
    w[:10] = 0
    with pytest.raises(ValueError):
        dual_ascent(K, P0, GridMeasure.on_grid(G, w, normalize=True))


def test_hamiltonians_agree():
    quad = QuadraticHamiltonian(CoefficientField.constant(2.0, 0.5))
    z = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(hamiltonian(quad, 0.0, 0.0, z), 0.5 * z + z * z)
    samp = SampledHamiltonian(lambda t, x, u: (u - 0.5) ** 2 / 4.0, np.linspace(-10, 10, 20001))
    assert samp.certify_convex(0.0, 0.0)
    np.testing.assert_allclose(hamiltonian(samp, 0.0, 0.0, z), 0.5 * z + z * z, atol=1e-6)
    with pytest.raises(TypeError):
        hamiltonian(object(), 0.0, 0.0, z)


def test_sampled_hamiltonian_rejects_concave():
    samp = SampledHamiltonian(lambda t, x, u: -u * u, np.linspace(-1, 1, 11))
    assert not samp.certify_convex(0.0, 0.0)
    assert math.isfinite(hamiltonian(samp, 0.0, 0.0, 0.3))
