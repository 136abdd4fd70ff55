import numpy as np
import pytest

from hypodiff.contrasts import (KINDS, Contrast, Increments, compute_D_j, contrast_adaptive_theta3,
                                contrast_adaptive_theta23, contrast_initial_theta1,
                                contrast_initial_theta2, contrast_inferior_theta3, contrast_joint,
                                contrast_onestep_theta1)
from hypodiff.linalg import NonInvertible
from hypodiff.model import FiniteDifferenceModel, ThetaPoint, eval_S_inv
from hypodiff.models import FitzHughNagumo, LinearOscillator
from hypodiff.optimize import maximize
from hypodiff.simulate import ObservationGrid, SimConfig, simulate_path
from toymodels import (LinearMatrixModel, ScalarModel, balanced_grid, hetero_model, shift_model,
                       zero_residual_grid)

OSC = LinearOscillator()
TH = OSC.default_theta


@pytest.fixture(scope="module")
def osc_grid():
    return simulate_path(OSC, TH, SimConfig(n=2000, h=0.01, z0=(0.0, 0.0), seed=3))


@pytest.fixture(scope="module")
def big_grid():
    return simulate_path(OSC, TH, SimConfig(n=10000, h=0.005, z0=(0.0, 0.0), seed=17))


@pytest.fixture(scope="module")
def zero_grid():
    return zero_residual_grid(OSC, TH, 200, 0.01, (1.0, 0.0))


def params_of(theta, kind):
    return np.concatenate([theta.block(b) for b in KINDS[kind][0]])


def logdet_S_sum(grid, theta1, theta3):
    _, ld = eval_S_inv(OSC, grid.z[:-1], theta1, theta3)
    return float(np.sum(ld))


# ------------------------------------------------------------------ D_j

def test_D_j_zero_on_exact_drift(zero_grid):
    for j in (1, 50, 200):
        assert np.max(np.abs(compute_D_j(OSC, zero_grid, j, TH))) < 1e-10


def test_D_j_hand_computation():
    # A = theta2 = 1, H = x + theta3 with theta3 = 0.5, so L_H = H_x A = 1 and G_n = 0.505
    m = shift_model()
    g = ObservationGrid(0.01, [[0.0, 0.0], [0.02, 0.006], [0.05, 0.01]], m.dims)
    D = compute_D_j(m, g, 1, ThetaPoint([1.0], [1.0], [0.5]))
    np.testing.assert_allclose(D, [(0.02 - 0.01) / 0.1, (0.006 - 0.01 * 0.505) / 0.001], rtol=1e-12)
    with pytest.raises(IndexError):
        compute_D_j(m, g, 3, ThetaPoint([1.0], [1.0], [0.5]))


def test_D_j_linearity_in_X_residual():
    m = shift_model()
    th = ThetaPoint([1.0], [1.0], [0.5])
    h = 0.01
    base = np.array([[0.0, 0.0], [0.03, 0.0], [0.0, 0.0]])
    scaled = base.copy()
    scaled[1, 0] = h * 1.0 + 3.0 * (0.03 - h * 1.0)
    d1 = compute_D_j(m, ObservationGrid(h, base, m.dims), 1, th)
    d3 = compute_D_j(m, ObservationGrid(h, scaled, m.dims), 1, th)
    assert d3[0] == pytest.approx(3.0 * d1[0], rel=1e-12)
    assert d3[1] == pytest.approx(d1[1], rel=1e-12)


# -------------------------------------------------------- initial theta1

def test_initial_theta1_single_increment():
    # two identical increments so the grid is valid; each contributes -0.5
    g = ObservationGrid(0.01, [[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]], OSC.dims)
    c = Contrast(OSC, g, "initial_theta1")
    np.testing.assert_allclose(c.terms([1.0]), [-0.5, -0.5], rtol=1e-14)
    assert contrast_initial_theta1(OSC, g, [1.0]).value == pytest.approx(-1.0, rel=1e-14)


def test_initial_theta1_closed_form(osc_grid):
    dX = np.diff(osc_grid.x[:, 0])
    oracle = np.sqrt(np.sum(dX ** 2) / (osc_grid.n * osc_grid.h))
    c = Contrast(OSC, osc_grid, "initial_theta1")
    res = maximize(c, c.lower, c.upper)
    assert abs(res.x[0] - oracle) < 1e-8


# -------------------------------------------------------- initial theta2

def test_initial_theta2_flat_without_drift(rng):
    m = LinearMatrixModel(np.zeros((2, 2)), np.eye(2), np.eye(2))
    z = np.cumsum(rng.standard_normal((60, 4)) * 0.1, axis=0)
    g = ObservationGrid(0.01, z, m.dims)
    ev = contrast_initial_theta2(m, g, [1.3], [1.0])
    assert ev.gradient[0] == 0.0
    assert contrast_initial_theta2(m, g, [0.2], [1.0]).value == ev.value


def test_initial_theta2_weighted_least_squares():
    m = hetero_model()
    th = ThetaPoint([0.7], [1.2], [1.0])
    g = simulate_path(m, th, SimConfig(n=3000, h=0.01, z0=(0.5, 0.0), seed=4))
    x = g.x[:-1, 0]
    dX = np.diff(g.x[:, 0])
    w = 1.0 / (1.0 + x ** 2)
    oracle = -np.sum(w * x * dX) / (g.h * np.sum(w * x ** 2))
    c = Contrast(m, g, "initial_theta2", th.replace(theta1=[0.65]))
    res = maximize(c, c.lower, c.upper)
    assert abs(res.x[0] - oracle) < 1e-8


# ------------------------------------------------------- adaptive theta3

def test_adaptive_theta3_zero_residual_grid_max(zero_grid):
    c = Contrast(OSC, zero_grid, "adaptive_theta3", TH)
    assert c.value(TH.theta3) == pytest.approx(-0.5 * logdet_S_sum(zero_grid, TH.theta1, TH.theta3),
                                                rel=1e-12)
    scan = np.linspace(0.2, 3.0, 57)
    values = [c.value([t]) for t in scan]
    assert scan[int(np.argmax(values))] == pytest.approx(1.0)


def test_adaptive_theta23_zero_residual_stationary(zero_grid):
    ev = contrast_adaptive_theta23(OSC, zero_grid, TH.theta2, TH.theta3, TH.theta1, TH.theta3)
    assert np.linalg.norm(ev.gradient) < 1e-8


def test_onestep_theta1_zero_residual_value(zero_grid):
    ev = contrast_onestep_theta1(OSC, zero_grid, TH.theta1, TH.theta2, TH.theta3, hessian=False)
    assert ev.value == pytest.approx(-0.5 * logdet_S_sum(zero_grid, TH.theta1, TH.theta3), rel=1e-12)


def test_joint_zero_residual_value(zero_grid):
    ev = contrast_joint(OSC, zero_grid, TH, hessian=False)
    assert ev.value == pytest.approx(-0.5 * logdet_S_sum(zero_grid, TH.theta1, TH.theta3), rel=1e-12)


def test_inferior_zero_residual_grid_max(zero_grid):
    c = Contrast(OSC, zero_grid, "inferior_theta3", TH)
    scan = np.linspace(0.2, 3.0, 57)
    assert scan[int(np.argmax([c.value([t]) for t in scan]))] == pytest.approx(1.0)
    ev = contrast_inferior_theta3(OSC, zero_grid, TH.theta3, TH.theta1, TH.theta2, hessian=False)
    assert ev.value == c.value(TH.theta3)


@pytest.mark.parametrize("kind", list(KINDS))
def test_balanced_data_stationary(kind):
    m = shift_model()
    th = ThetaPoint([0.8], [0.6], [0.4])
    c = Contrast(m, balanced_grid(th), kind, th)
    assert np.linalg.norm(c.gradient(params_of(th, kind))) < 1e-8


def test_zero_dimensional_y_rejected():
    from hypodiff.model import Dimensions
    with pytest.raises(ValueError):
        Dimensions(d_x=1, d_y=0, r=1, p1=1, p2=1, p3=1)


# ------------------------------------------------ gradients and Hessians

def _fd_gradient(c, p, step=1e-6):
    g = np.empty(p.size)
    for i in range(p.size):
        e = step * max(1.0, abs(p[i]))
        up, dn = p.copy(), p.copy()
        up[i] += e
        dn[i] -= e
        g[i] = (c.value(up) - c.value(dn)) / (2 * e)
    return g


@pytest.mark.parametrize("model", [OSC, FitzHughNagumo()], ids=lambda m: m.name)
@pytest.mark.parametrize("kind", list(KINDS))
def test_gradient_matches_finite_differences(model, kind, rng):
    th = model.default_theta
    g = simulate_path(model, th, SimConfig(n=500, h=0.01, z0=(0.1, 0.0), seed=1))
    c = Contrast(model, g, kind, th)
    lo, hi = c.lower, c.upper
    for _ in range(5):
        p = lo + (hi - lo) * rng.uniform(0.2, 0.8, size=lo.size)
        ga = c.gradient(p)
        gf = _fd_gradient(c, p)
        assert np.linalg.norm(ga - gf) <= 1e-5 * max(np.linalg.norm(gf), 1.0)


@pytest.mark.parametrize("kind", list(KINDS))
def test_fd_model_agrees_with_analytic(osc_grid, kind):
    fd = FiniteDifferenceModel(OSC)
    p = params_of(TH, kind)
    a = Contrast(OSC, osc_grid, kind, TH)
    b = Contrast(fd, osc_grid, kind, TH)
    assert a.value(p) == pytest.approx(b.value(p), rel=1e-8)
    np.testing.assert_allclose(a.gradient(p), b.gradient(p), rtol=1e-5, atol=1e-5 * np.abs(a.gradient(p)).max())


def test_hessian_symmetric_and_consistent(osc_grid):
    c = Contrast(OSC, osc_grid, "joint")
    p = TH.vector()
    ev = c.evaluate(p)
    np.testing.assert_allclose(ev.hessian, ev.hessian.T, atol=1e-10)
    assert ev.n_terms == osc_grid.n and ev.failures == 0
    # central second difference of the value on the diagonal
    for i in range(p.size):
        e = 1e-3
        up, dn = p.copy(), p.copy()
        up[i] += e
        dn[i] -= e
        fd = (c.value(up) - 2 * c.value(p) + c.value(dn)) / e ** 2
        assert ev.hessian[i, i] == pytest.approx(fd, rel=1e-4)


def test_theta23_cross_block_small(big_grid):
    H = contrast_adaptive_theta23(OSC, big_grid, TH.theta2, TH.theta3, TH.theta1, TH.theta3).hessian
    for i in (0, 1):
        assert abs(H[i, 2]) / np.sqrt(abs(H[i, i] * H[2, 2])) < 0.10


def test_joint_block_structure(big_grid):
    n, h = big_grid.n, big_grid.h
    H = contrast_joint(OSC, big_grid, TH).hessian
    b = np.diag([n ** -0.5, (n * h) ** -0.5, (n * h) ** -0.5, (h / n) ** 0.5])
    M = b @ H @ b
    blocks = [slice(0, 1), slice(1, 3), slice(3, 4)]
    for i, bi in enumerate(blocks):
        for j, bj in enumerate(blocks):
            if i < j:
                scale = np.sqrt(np.linalg.norm(M[bi, bi]) * np.linalg.norm(M[bj, bj]))
                assert np.linalg.norm(M[bi, bj]) < 0.15 * scale


# --------------------------------------------- joint versus restrictions

def test_joint_restrictions(osc_grid):
    th0 = ThetaPoint([0.9], [1.3, 1.1], [1.2])
    joint = Contrast(OSC, osc_grid, "joint")
    a3 = Contrast(OSC, osc_grid, "adaptive_theta3", th0)
    o1 = Contrast(OSC, osc_grid, "onestep_theta1", th0)
    a23 = Contrast(OSC, osc_grid, "adaptive_theta23", th0)
    for t in (0.6, 1.2, 2.0):
        assert joint.value(th0.replace(theta3=[t]).vector()) == pytest.approx(a3.value([t]), rel=1e-13)
        assert joint.value(th0.replace(theta1=[t]).vector()) == pytest.approx(o1.value([t]), rel=1e-13)
    offsets = [joint.value(th0.replace(theta2=t2).vector()) - a23.value(np.r_[t2, th0.theta3])
               for t2 in ([1.0, 1.0], [2.0, 0.5], [0.4, 3.0])]
    np.testing.assert_allclose(offsets, offsets[0], rtol=1e-9)


# ----------------------------------------------------------- summation

def test_permutation_invariance(osc_grid, rng):
    inc = Increments(osc_grid)
    perm = rng.permutation(inc.n)
    shuffled = Increments(osc_grid)
    shuffled.z_prev = np.ascontiguousarray(inc.z_prev[perm])
    shuffled.dX = inc.dX[perm]
    shuffled.dY = inc.dY[perm]
    for kind in KINDS:
        p = params_of(TH, kind)
        a = Contrast(OSC, inc, kind, TH).value(p)
        b = Contrast(OSC, shuffled, kind, TH).value(p)
        assert abs(a - b) < 1e-10


# -------------------------------------------------------- skip and count

def _singular_increments(k):
    m = ScalarModel(lambda x, y, t: -t * x, lambda x, y, t: t * x, lambda x, y, t: t * x)
    th = ThetaPoint([1.0], [1.0], [1.0])
    g = simulate_path(m, th, SimConfig(n=500, h=0.01, z0=(1.0, 0.0), seed=2))
    inc = Increments(g)
    inc.z_prev = inc.z_prev.copy()
    inc.z_prev[:k, 0] = 0.0
    return m, th, inc


def test_skipped_increments_counted():
    m, th, inc = _singular_increments(3)
    ev = Contrast(m, inc, "initial_theta1").evaluate([1.0], hessian=False)
    assert ev.failures == 3 and ev.n_terms == 497
    assert np.isfinite(ev.value)


def test_too_many_failures_raise():
    m, th, inc = _singular_increments(10)
    with pytest.raises(NonInvertible):
        Contrast(m, inc, "initial_theta1").value([1.0])
    with pytest.raises(NonInvertible):
        Contrast(m, inc, "joint").value(th.vector())


def test_kind_validation(osc_grid):
    with pytest.raises(ValueError):
        Contrast(OSC, osc_grid, "bogus")
    with pytest.raises(ValueError):
        Contrast(OSC, osc_grid, "initial_theta2")
    with pytest.raises(ValueError):
        Contrast(OSC, osc_grid, "initial_theta2", TH.replace(theta1=[10.0]))
    with pytest.raises(ValueError):
        Contrast(OSC, osc_grid, "joint").value([1.0, 2.0])
