import jsonschema
import numpy as np
import pytest

from hypodiff.contrasts import Contrast
from hypodiff.estimators import (MIN_OBSERVATIONS, empirical_identifiability, estimate_adaptive,
                                 estimate_all, estimate_inferior_theta3, estimate_joint,
                                 identifiability_fields, newton_step, plugin_information, rate_scales)
from hypodiff.io import load_schema, to_json_text
from hypodiff.model import ThetaPoint
from hypodiff.models import FitzHughNagumo, LinearOscillator
from hypodiff.simulate import ObservationGrid, SimConfig, simulate_path
from toymodels import ScalarModel, balanced_grid, shift_model

OSC = LinearOscillator()
TH = OSC.default_theta
BAL = ThetaPoint([0.8], [0.6], [0.4])


@pytest.fixture(scope="module")
def sim10k():
    return simulate_path(OSC, TH, SimConfig(n=10000, h=0.005, z0=(0.0, 0.0), seed=123))


@pytest.fixture(scope="module")
def reports10k(sim10k):
    return estimate_all(OSC, sim10k)


def test_newton_arithmetic():
    new, ok = newton_step([1.0], [2.0], [[-4.0]])
    assert ok and new[0] == 1.5


def test_newton_rejects_ill_conditioned():
    assert not newton_step([1.0, 1.0], [1.0, 1.0], [[1.0, 0.0], [0.0, 1e-13]])[1]
    assert not newton_step([1.0], [1.0], [[0.0]])[1]
    assert not newton_step([1.0], [np.nan], [[1.0]])[1]


def test_balanced_data_recovers_truth():
    m = shift_model()
    reports = estimate_all(m, balanced_grid(BAL))
    for method, rep in reports.items():
        assert np.max(np.abs(rep.theta_hat.vector() - BAL.vector())) < 1e-6, method
        assert rep.onestep_event_ok
    assert np.max(np.abs(reports["adaptive"].initial.vector() - BAL.vector())) < 1e-6


def test_onestep_is_identity_at_stationary_point():
    m = shift_model()
    rep = estimate_adaptive(m, balanced_grid(BAL))
    assert np.max(np.abs(rep.theta_hat.vector() - rep.initial.vector())) < 1e-8


def test_inferior_and_joint_wrappers_on_balanced_data():
    m = shift_model()
    g = balanced_grid(BAL)
    assert abs(estimate_inferior_theta3(m, g).theta_hat.theta3[0] - 0.4) < 1e-6
    assert np.max(np.abs(estimate_joint(m, g).theta_hat.vector() - BAL.vector())) < 1e-6


def test_adaptive_theta3_rate_band(reports10k, sim10k):
    rep = reports10k["adaptive"]
    assert rep.onestep_event_ok
    scaled = abs(rep.theta_hat.theta3[0] - TH.theta3[0]) * np.sqrt(sim10k.n / sim10k.h)
    assert scaled <= 10.0


def test_adaptive_and_joint_first_order_equivalent(reports10k):
    a, j = reports10k["adaptive"], reports10k["joint"]
    scales = np.repeat(rate_scales(a.n, a.h), OSC.dims.block_sizes())
    assert np.all(np.abs(scales * (a.theta_hat.vector() - j.theta_hat.vector())) < 1.0)


def test_warm_and_cold_joint_agree(sim10k, reports10k):
    cold = estimate_joint(OSC, sim10k, warm_start=False)
    np.testing.assert_allclose(cold.theta_hat.vector(), reports10k["joint"].theta_hat.vector(), atol=1e-6)


def test_inferior_rate_band(reports10k, sim10k):
    rep = reports10k["inferior_theta3"]
    scaled = abs(rep.theta_hat.theta3[0] - TH.theta3[0]) * np.sqrt(sim10k.n / sim10k.h)
    assert scaled <= 20.0


def test_report_structure(reports10k):
    schema = load_schema("estimate_report")
    for rep in reports10k.values():
        d = rep.to_dict()
        jsonschema.validate(__import__("json").loads(to_json_text(d)), schema)
        assert rep.theta_hat.in_boxes(OSC.boxes)
        G = rep.gamma["gamma33"]
        assert rep.stderr.theta3[0] == pytest.approx(
            np.sqrt(1 / G[0, 0]) / np.sqrt(rep.n / rep.h) * (2 if rep.method == "inferior_theta3" else 1))


def test_gamma_blocks_psd(reports10k):
    for key, G in reports10k["adaptive"].gamma.items():
        np.testing.assert_array_equal(G, G.T)
        assert np.all(np.linalg.eigvalsh(G) >= 0), key


def test_too_few_observations():
    g = simulate_path(OSC, TH, SimConfig(n=MIN_OBSERVATIONS - 1, h=0.01, z0=(0, 0)))
    with pytest.raises(ValueError):
        estimate_adaptive(OSC, g)
    with pytest.raises(ValueError):
        estimate_all(OSC, simulate_path(OSC, TH, SimConfig(n=200, h=0.01, z0=(0, 0))), methods=("bogus",))


# ----------------------------------------------------------- information

def test_gamma1_initial_state_free(sim10k):
    th = ThetaPoint([1.0], TH.theta2, TH.theta3)
    assert plugin_information(OSC, sim10k, th)["gamma1_initial"][0, 0] == pytest.approx(2.0, rel=1e-14)


def test_gamma33_loop_oracle(sim10k):
    th = ThetaPoint([0.9], TH.theta2, [1.3])
    G = plugin_information(OSC, sim10k, th)
    x = sim10k.z[:-1, 0]
    acc = 0.0
    for v in x:
        acc += v * v
    oracle = 12.0 * (acc / len(x)) / (1.3 ** 2 * 0.9 ** 2)
    assert G["gamma33"][0, 0] == pytest.approx(oracle, rel=1e-12)


def test_gamma11_doubles_for_invertible_Hx(sim10k):
    G = plugin_information(OSC, sim10k, TH)
    assert G["gamma11"][0, 0] == pytest.approx(2 * G["gamma1_initial"][0, 0], rel=1e-12)


def test_gamma_fhn_symmetric_psd():
    fhn = FitzHughNagumo()
    g = simulate_path(fhn, fhn.default_theta, SimConfig(n=2000, h=0.01, z0=(0.0, 0.0), seed=2))
    for G in plugin_information(fhn, g, fhn.default_theta).values():
        np.testing.assert_allclose(G, G.T, atol=0)
        assert np.linalg.eigvalsh(G).min() >= -1e-12


# ------------------------------------------------------- identifiability

def test_fields_vanish_at_truth(sim10k):
    assert identifiability_fields(OSC, sim10k, TH, TH) == (0.0, 0.0, 0.0)


def test_Y2_quadratic_oracle():
    m = ScalarModel(lambda x, y, t: t * x, lambda x, y, t: t + 0.0 * x, lambda x, y, t: t * x,
                    box=(-3.0, 3.0))
    rng = np.random.default_rng(0)
    z = np.column_stack([rng.standard_normal(301), np.zeros(301)])
    g = ObservationGrid(0.01, z, m.dims)
    star = ThetaPoint([1.0], [-0.5], [1.0])
    x = z[:-1, 0]
    for t2 in (-1.5, 0.0, 0.7):
        y2 = identifiability_fields(m, g, star, star.replace(theta2=[t2]))[1]
        oracle = -0.5 * (t2 + 0.5) ** 2 * sum(v * v for v in x) / len(x)
        assert y2 == pytest.approx(oracle, rel=1e-12)


def test_identifiability_curvature_positive(sim10k):
    scan = empirical_identifiability(OSC, sim10k, TH, points=11, half_width=0.1)
    assert set(scan.chi) == {"Y1[0]", "Y2[0]", "Y2[1]", "Y3[0]"}
    assert all(v > 0 for v in scan.chi.values())
    assert all(r["y"] <= 1e-15 for r in scan.rows)
    assert len(scan.rows) == 4 * 11
