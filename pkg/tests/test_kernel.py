import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sotp.kernel import (CoefficientField, GaussBoundConstants, KernelError, TransitionKernel, check_gaussian_bounds,
                         fit_bound_constants, gaussian_kernel, identity_kernel, kernel_from_start, kernel_to_terminal,
                         make_kernel, pde_kernel)
from sotp.measures import Grid

UNIT = CoefficientField.constant(1.0)


def _pde_error(n, steps):
    g = Grid.from_bounds(-7, 7, n)
    Kp = pde_kernel(UNIT, g, g, 0.0, 1.0, steps)
    Kg = gaussian_kernel(1.0, g, g, 0.0, 1.0)
    core = np.abs(g.centers) <= 1.5
    return float(np.max(np.abs(Kp.values[core] - Kg.values[core])) / np.max(Kg.values[core]))


def test_gaussian_kernel_closed_form():
    g = Grid.from_bounds(-2, 2, 4)
    K = gaussian_kernel(2.0, [0.0], g, 0.0, 0.5, xi=1.0)
    y = g.centers
    expected = np.exp(-(y - 0.5) ** 2 / 2.0) / math.sqrt(2 * math.pi)
    np.testing.assert_allclose(K.values[0], expected, rtol=1e-14)
    assert K.shape == (1, 4)
    assert K.target_cell_volume == 1.0


def test_gaussian_kernel_rejects_bad_times():
    g = Grid.from_bounds(0, 1, 5)
    with pytest.raises(KernelError):
        gaussian_kernel(1.0, g, g, 1.0, 1.0)
    with pytest.raises(KernelError):
        gaussian_kernel(-1.0, g, g, 0.0, 1.0)
    with pytest.raises(KernelError):
        CoefficientField.constant(0.0)


def test_row_quadrature_near_one_inside():
    g = Grid.from_bounds(-8, 8, 400)
    K = gaussian_kernel(1.0, g, g, 0.0, 1.0)
    mid = np.abs(g.centers) < 2
    np.testing.assert_allclose(K.row_quadrature()[mid], 1.0, atol=1e-12)
    np.testing.assert_allclose(K.row_normalized().row_quadrature(), 1.0, atol=1e-13)


def test_identity_kernel():
    g = Grid.from_bounds(0, 1, 5)
    K = identity_kernel(g, 0.3)
    np.testing.assert_allclose(K.values, np.eye(5) / 0.2)
    assert K.identity and not K.is_positive()


def test_pde_matches_gaussian_and_converges_second_order():
    errs = [_pde_error(140, 50), _pde_error(280, 100)]
    assert errs[1] <= 1e-3
    assert math.log2(errs[0] / errs[1]) >= 1.8
    assert errs[1] == pytest.approx(3.160605687785693e-04, rel=1e-6)


def test_pde_kernel_rejects_narrow_box():
    g = Grid.from_bounds(-2, 2, 80)
    with pytest.raises(KernelError, match="widen"):
        pde_kernel(UNIT, g, g, 0.0, 1.0, 50)


def test_pde_kernel_variable_coefficients_positive():
    coeffs = CoefficientField(lambda t, x: 1.0 + 0.3 * np.sin(x) ** 2, lambda t, x: 0.2 * np.cos(x),
                              (1.0, 1.3), 0.2)
    g = Grid.from_bounds(-7, 7, 140)
    K = pde_kernel(coeffs, g, g, 0.0, 0.5, 50)
    mid = np.abs(g.centers) < 3
    assert np.all(K.values[np.ix_(mid, mid)] > 0)
    np.testing.assert_allclose(K.row_quadrature(), 1.0, atol=1e-12)


def test_make_kernel_dispatch():
    g = Grid.from_bounds(-1, 1, 10)
    with pytest.raises(KernelError):
        make_kernel("spline", UNIT, g, g, 0, 1)
    var = CoefficientField(lambda t, x: np.ones_like(x), lambda t, x: np.zeros_like(x))
    with pytest.raises(KernelError):
        make_kernel("gaussian", var, g, g, 0, 1)


def test_kernel_families_endpoints():
    g = Grid.from_bounds(-3, 3, 30)
    tg = np.linspace(0, 1, 5)
    to_end = kernel_to_terminal("gaussian", UNIT, g, tg)
    from_start = kernel_from_start("gaussian", UNIT, g, tg)
    assert to_end[-1].identity and from_start[0].identity
    np.testing.assert_allclose(to_end[0].log_values, from_start[-1].log_values)
    assert (to_end[2].s, to_end[2].t) == (0.5, 1.0)


def test_chapman_kolmogorov_gaussian():
    g = Grid.from_bounds(-8, 8, 320)
    A = gaussian_kernel(1.0, g, g, 0.0, 0.4)
    B = gaussian_kernel(1.0, g, g, 0.4, 1.0)
    C = gaussian_kernel(1.0, g, g, 0.0, 1.0)
    comp = A.values @ B.values * g.h
    mid = np.abs(g.centers) < 2
    assert np.max(np.abs(comp[mid] - C.values[mid])) / C.values.max() <= 1e-10


def test_fit_bound_constants_gaussian_oracle():
    g = Grid.from_bounds(-5, 5, 200)
    K = gaussian_kernel(1.0, g, g, 0.0, 1.0)
    c = fit_bound_constants(K)
    assert c.C1 == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert c.C2 == pytest.approx(2.0, abs=1e-10)
    chk = check_gaussian_bounds(K, c)
    assert chk.satisfied
    assert min(chk.worst_lower_slack, chk.worst_upper_slack) >= -1e-12
    assert not check_gaussian_bounds(K, GaussBoundConstants(0.0, 1.0)).satisfied


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.2, 2.0))
def test_fitted_bounds_hold(a, tau):
    g = Grid.from_bounds(-4, 4, 60)
    K = gaussian_kernel(a, g, g, 0.0, tau)
    assert check_gaussian_bounds(K, fit_bound_constants(K)).satisfied


def test_bound_constants_validation():
    with pytest.raises(KernelError):
        GaussBoundConstants(1.0, 0.0)
    with pytest.raises(KernelError):
        GaussBoundConstants(-1.0, 1.0)


def test_save_load_roundtrip(tmp_path):
    g = Grid.from_bounds(-2, 2, 17)
    K = gaussian_kernel(0.7, g, g, 0.1, 0.9, xi=0.2)
    path = tmp_path / "k.json"
    K.save(path, header_lines=("config_hash=0123",))
    assert (tmp_path / "k.csv").read_text().startswith("# config_hash=0123")
    R = TransitionKernel.load(path)
    np.testing.assert_array_equal(R.log_values, K.log_values)
    np.testing.assert_array_equal(R.source_points, K.source_points)
    assert (R.s, R.t, R.kind) == (K.s, K.t, K.kind)
