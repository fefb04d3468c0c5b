import math

import numpy as np
import pytest

from anodev2.adjoint import (SmallSystem, compare_gradients, finite_difference_gradient, forward_euler,
                             relative_error, scalar_growth_closed_form, scalar_growth_system, solve_kkt)
from anodev2.gradcheck import scalar_dto, scalar_kkt

RHO = math.log(2)


def closed_form_by_quadrature(rho):
    """Independent route: z(1) = exp(int_0^1 e^{rho t} dt), derivatives by Simpson."""
    t = np.linspace(0, 1, 20001)
    wts = np.ones_like(t)
    wts[1:-1:2], wts[2:-1:2] = 4, 2
    wts /= 3 * (len(t) - 1)
    i0 = (wts * np.exp(rho * t)).sum()
    i1 = (wts * t * np.exp(rho * t)).sum()
    z1 = math.exp(i0)
    return z1, z1 * i0, z1 * i1


def test_closed_form_values():
    z1, dw0, drho = scalar_growth_closed_form(RHO)
    assert z1 == pytest.approx(math.exp(1 / RHO), rel=1e-15)
    assert z1 == pytest.approx(4.2321, abs=1e-4)
    assert dw0 == pytest.approx(6.1056, abs=1e-4)
    assert drho == pytest.approx(3.4027, abs=1e-4)
    np.testing.assert_allclose((z1, dw0, drho), closed_form_by_quadrature(RHO), rtol=1e-12)


def test_decoupled_system_returns_regularizer_gradient():
    sys_ = SmallSystem(
        f=lambda z, th: np.zeros_like(z), f_z=lambda z, th: np.zeros((2, 2)), f_theta=lambda z, th: np.zeros((2, 2)),
        q=lambda w, p: p * w, q_w=lambda w, p: np.diag(p), q_p=lambda w, p: np.diag(w),
        J=lambda z: z.sum(), J_z=lambda z: np.ones(2),
        R=lambda w0, p: (w0**2).sum(), R_w0=lambda w0, p: 2 * w0, R_p=lambda w0, p: np.zeros(2),
    )
    g_w0, g_p, st = solve_kkt(sys_, [1.0, 2.0], [0.5, -1.0], [0.3, 0.2], 16, return_state=True)
    np.testing.assert_array_equal(g_w0, [1.0, -2.0])
    np.testing.assert_array_equal(g_p, [0.0, 0.0])
    assert np.all(st.gamma == 0) and np.all(st.beta == 0)
    assert np.all(st.alpha == -1)


def test_terminal_conditions_hold_exactly():
    _, _, st = solve_kkt(scalar_growth_system(), [1.0], [1.0], [RHO], 64, return_state=True)
    z, _ = forward_euler(scalar_growth_system(), np.array([1.0]), np.array([1.0]), np.array([RHO]), 64)
    assert st.beta[-1, 0] == 0.0
    assert st.alpha[-1, 0] == -1.0
    assert st.t[0] == 0 and st.t[-1] == 1 and len(st.t) == 65
    assert z.shape == (65, 1)


@pytest.mark.parametrize("n", [2**k for k in range(4, 13)])
def test_kkt_converges_first_order(n):
    _, dw0, drho = scalar_growth_closed_form(RHO)
    g_w0, g_p = scalar_kkt(n)
    # first-order: relative error * n stays bounded by a modest constant
    assert relative_error(g_w0, dw0) * n < 6
    assert relative_error(g_p, drho) * n < 6


def test_kkt_and_dto_error_ratio_halves():
    _, dw0, drho = scalar_growth_closed_form(RHO)
    for solver in (lambda n: scalar_kkt(n), lambda n: scalar_dto(n)[1:]):
        errs = [abs(solver(n)[0] - dw0) for n in (256, 512, 1024)]
        assert errs[0] / errs[1] == pytest.approx(2, rel=0.02)
        assert errs[1] / errs[2] == pytest.approx(2, rel=0.02)


def test_kkt_sign_matches_finite_differences_of_discrete_forward():
    # identification of the stationarity residuals with the objective gradient
    sys_ = scalar_growth_system()

    def objective(v):
        z, _ = forward_euler(sys_, np.array([1.0]), v[:1], v[1:], 2048)
        return z[-1, 0]

    fd = finite_difference_gradient(objective, [1.0, RHO])
    g_w0, g_p = solve_kkt(sys_, [1.0], [1.0], [RHO], 2048)
    assert relative_error(np.r_[g_w0, g_p], fd).max() < 2e-3


def test_kkt_two_dimensional_system_vs_fd():
    a = np.array([[0.1, -0.4], [0.3, 0.2]])
    sys_ = SmallSystem(
        f=lambda z, th: np.tanh(th * z), f_z=lambda z, th: np.diag(th / np.cosh(th * z) ** 2),
        f_theta=lambda z, th: np.diag(z / np.cosh(th * z) ** 2),
        q=lambda w, p: a @ w + p, q_w=lambda w, p: a, q_p=lambda w, p: np.eye(2),
        J=lambda z: 0.5 * (z**2).sum(), J_z=lambda z: z,
    )
    z0 = np.array([0.7, -0.3])

    def objective(v):
        z, _ = forward_euler(sys_, z0, v[:2], v[2:], 4096)
        return sys_.J(z[-1])

    fd = finite_difference_gradient(objective, [0.5, 1.2, 0.1, -0.2])
    g_w0, g_p = solve_kkt(sys_, z0, [0.5, 1.2], [0.1, -0.2], 4096)
    assert relative_error(np.r_[g_w0, g_p], fd).max() < 1e-3


def test_kkt_requires_grid():
    with pytest.raises(ValueError, match="at least 2"):
        solve_kkt(scalar_growth_system(), [1.0], [1.0], [RHO], 1)


def test_kkt_nonfinite_state_errors():
    with pytest.raises(FloatingPointError, match="non-finite"):
        solve_kkt(scalar_growth_system(), [1.0], [1e5], [RHO], 200)


def test_dto_matches_kkt_at_fine_grids():
    _, dw, dr = scalar_dto(512)
    g_w0, g_p = scalar_kkt(512)
    # both carry O(1/n) error with different constants
    assert relative_error([dw, dr], [g_w0, g_p]).max() < 2e-2


# ---------------------------------------------------------------- FD and reports


def test_fd_quadratic():
    np.testing.assert_allclose(finite_difference_gradient(lambda x: 0.5 * (x**2).sum(), [1.0, 2.0]), [1, 2], atol=1e-10)


def test_fd_constant_and_product():
    np.testing.assert_array_equal(finite_difference_gradient(lambda x: 3.0, [1.0, 2.0]), [0, 0])
    np.testing.assert_allclose(finite_difference_gradient(lambda x: x[0] * x[1], [3.0, 5.0]), [5, 3], atol=1e-9)


def test_fd_nonfinite_loss():
    with pytest.raises(FloatingPointError, match="coordinate 1"):
        finite_difference_gradient(lambda x: np.inf if x[1] > 2 else 0.0, [0.0, 2.0])


def test_compare_identical_and_guard():
    r = compare_gradients([1.0, 2.0], [1.0, 2.0], [1.0, 2.0])
    assert r.max_error() == 0
    r = compare_gradients([1.0, 0.0], None, [1.0, 1e-13])
    assert r.relerr_dto_fd[1] == pytest.approx(1e-13 / 1e-12)
    assert relative_error(0.0, 0.0) == 0


def test_compare_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        compare_gradients([1.0], [1.0, 2.0], [1.0])


def test_report_csv_columns():
    text = compare_gradients([1.0, 2.0], [1.1, 2.0], [1.0, 2.0]).to_csv().splitlines()
    assert text[0] == "index,dto,kkt,fd,relerr_dto_fd,relerr_kkt_fd"
    assert len(text) == 3
    fields = text[1].split(",")
    assert float(fields[5]) == pytest.approx(0.1 / 1.1)
