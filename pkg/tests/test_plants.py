"""Tests for plant models, discretization and the warm-up controllers"""

import math

import numpy as np
import pytest
import scipy.linalg

from pydpcflow import (
    BallBeamParams,
    BallBeamServo,
    DimensionError,
    LqrController,
    LtiModel,
    ModelError,
    PidController,
    PowerNetParams,
    VehicleKinematics,
    VehicleParams,
    ball_beam_model,
    discretize_zoh,
    lqr_warmup,
    pid_warmup,
    power_network_model,
    power_network_params,
    random_lti,
    servo_model,
    solve_discrete_riccati,
    vehicle_error_model,
)
from pydpcflow.dpcflow_linalg import spectral_radius
from pydpcflow.dpcflow_plants import default_generators, load_edge_list, lqr_gain

from .test_fixtures import BALL_BEAM_COUPLING, IEEE39_BUSES, IEEE39_GENERATORS, IEEE39_LINES, SEED


def scalar_discrete(a: float = 1.0, b: float = 1.0) -> LtiModel:
    return LtiModel([[a]], [[b]], [[1.0]], [[0.0]], dt=1.0, is_discrete=True)


def test_model_validation():
    with pytest.raises(DimensionError):
        LtiModel(np.eye(2), np.ones((2, 1)), np.ones((1, 3)), np.zeros((1, 1)))
    with pytest.raises(ModelError):
        LtiModel(np.eye(2), np.ones((2, 1)), np.ones((1, 2)), np.zeros((1, 1)), dt=0.0, is_discrete=True)


def test_continuous_model_cannot_step():
    m = LtiModel([[-1.0]], [[1.0]], [[1.0]], [[0.0]])
    with pytest.raises(ModelError):
        m.step(np.zeros(1), np.zeros(1))


def test_discretize_first_order():
    m = LtiModel([[-1.0]], [[1.0]], [[1.0]], [[0.0]])
    d = discretize_zoh(m, 0.1)

    assert d.is_discrete and d.dt == 0.1
    assert d.a[0, 0] == pytest.approx(math.exp(-0.1))
    assert d.b[0, 0] == pytest.approx(1 - math.exp(-0.1))

    with pytest.raises(ModelError):
        discretize_zoh(d, 0.1)
    with pytest.raises(ValueError):
        discretize_zoh(m, 0.0)


def test_discretize_double_integrator():
    m = LtiModel([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [[1.0, 0.0]], [[0.0]])
    d = discretize_zoh(m, 0.5)

    np.testing.assert_allclose(d.a, [[1.0, 0.5], [0.0, 1.0]])
    np.testing.assert_allclose(d.b, [[0.125], [0.5]])


def test_ball_beam_coupling():
    p = BallBeamParams()
    assert p.coupling == pytest.approx(BALL_BEAM_COUPLING, rel=1e-4)

    model = ball_beam_model(p)
    assert model.a[1, 2] == pytest.approx(p.coupling)
    assert (model.state_dim, model.input_dim, model.output_dim) == (4, 1, 1)


def test_ball_beam_parameter_checks():
    with pytest.raises(ModelError):
        BallBeamParams(gear_radius=-0.01)
    with pytest.raises(ModelError):
        BallBeamParams(ball_mass=0.0)
    assert BallBeamParams(gear_radius=0.0).coupling == 0.0


def test_servo_closes_gear_loop():
    m = servo_model(BallBeamParams())

    assert m.a[3, 2] == -400.0
    assert m.a[3, 3] == -36.0
    assert m.b[3, 0] == 400.0
    # the gear angle follows a constant reference with unit gain
    gear = m.a[2:, 2:]
    steady = -np.linalg.solve(gear, m.b[2:, 0])
    assert steady[0] == pytest.approx(1.0)


def test_servo_command_gain_scales_gear_reference():
    m = servo_model(BallBeamParams(), BallBeamServo(command_gain=4.0))

    assert m.b[3, 0] == pytest.approx(1600.0)
    np.testing.assert_array_equal(m.a, servo_model(BallBeamParams()).a)
    steady = -np.linalg.solve(m.a[2:, 2:], m.b[2:, 0])
    assert steady[0] == pytest.approx(4.0)
    with pytest.raises(ModelError):
        BallBeamServo(command_gain=0.0)


def test_vehicle_parameters():
    p = VehicleParams.from_kmh(30.0)

    assert p.speed == pytest.approx(8.3333333)
    assert p.feedforward == pytest.approx(0.012)
    assert p.radius == pytest.approx(1 / 0.024)
    assert VehicleParams(speed=1.0, curvature=0.0).radius == math.inf

    with pytest.raises(ModelError):
        VehicleParams(speed=0.0)
    with pytest.raises(ModelError):
        VehicleParams(speed=1.0, wheelbase=-1.0)


def test_vehicle_error_model():
    p = VehicleParams.from_kmh(20.0)
    m = vehicle_error_model(p)

    assert m.a[1, 0] == pytest.approx(p.speed)
    np.testing.assert_allclose(m.b[0], [p.speed / 0.5, -p.speed / 0.5])
    steering_only = m.select_inputs([0])
    assert steering_only.input_dim == 1
    assert steering_only.d.shape == (2, 1)


def test_vehicle_kinematics_follow_circle():
    p = VehicleParams.from_kmh(30.0)
    kin = VehicleKinematics(p, lateral_offset=0.5)
    assert kin.radial_error() == pytest.approx(0.5)

    on_path = VehicleKinematics(p)
    for _ in range(50):
        on_path.step(p.feedforward, 0.02)
    assert abs(on_path.radial_error()) < 0.05
    assert on_path.heading > 0

    xs, ys = on_path.reference_circle(points=5)
    assert (xs[0], ys[0]) == pytest.approx((0.0, 0.0))


def test_power_network_defaults():
    p = power_network_params()

    assert len(p.buses) == IEEE39_BUSES
    assert p.graph.number_of_edges() == IEEE39_LINES
    assert p.generators == IEEE39_GENERATORS


def test_power_network_model():
    p = power_network_params()
    m = power_network_model(p)
    n = IEEE39_BUSES

    assert m.a.shape == (2 * n, 2 * n)
    assert m.b.shape == (2 * n, 10)
    assert m.c.shape == (10, 2 * n)
    np.testing.assert_allclose(m.a[n:, :n].sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(m.a[n:, n:], -0.5 * np.eye(n))
    # each output reads the angle of its generator bus
    assert m.c[0, p.buses.index(2)] == 1.0


def test_power_network_overrides():
    edges = "1 2\n2 3 2.0\n3 1  # triangle\n"
    p = power_network_params(edges, inertia=2.0, damping=0.0, generators=(1, 3))
    m = power_network_model(p)

    assert p.buses == [1, 2, 3]
    assert m.b.shape == (6, 2)
    assert m.a[4, 2] == pytest.approx(2.0 / 2.0)


def test_power_network_errors():
    with pytest.raises(ModelError):
        PowerNetParams(load_edge_list("1 2\n3 4\n"), 1.0, 0.5, (1,))
    with pytest.raises(ModelError):
        PowerNetParams(load_edge_list("1 2\n"), 1.0, 0.5, (5,))
    with pytest.raises(ModelError):
        PowerNetParams(load_edge_list("1 2\n"), -1.0, 0.5, (1,))
    with pytest.raises(ModelError):
        load_edge_list("1 2 3 4\n")


def test_default_generators_tie_break():
    graph = load_edge_list("1 2\n1 3\n2 3\n3 4\n4 5\n")
    assert default_generators(graph, 2) == (1, 3)


def test_random_lti_radius():
    m = random_lti(5, np.random.default_rng(SEED), radius=0.7)

    assert spectral_radius(m.a) == pytest.approx(0.7)
    assert m.is_discrete
    np.testing.assert_array_equal(m.c, np.eye(5))


def test_pid_terms():
    assert PidController(1.0, 0.0, 0.0, 1.0, ref=1.0).compute(np.array([0.0]))[0] == pytest.approx(1.0)
    assert PidController(1.0, 0.0, 0.0, 1.0, ref=1.0, direction=-1.0).compute(np.array([0.0]))[0] == pytest.approx(-1.0)
    assert PidController(0.0, 0.0, 1.0, 0.5, ref=1.0).compute(np.array([0.0]))[0] == pytest.approx(2.0)

    integral = PidController(0.0, 1.0, 0.0, 0.5, ref=1.0)
    integral.compute(np.array([0.0]))
    assert integral.compute(np.array([0.0]))[0] == pytest.approx(1.0)
    integral.reset()
    assert integral.compute(np.array([0.0]))[0] == pytest.approx(0.5)


def test_pid_dither_is_bounded():
    pid = pid_warmup({"kp": 0.0, "ki": 0.0, "kd": 0.0}, 0.02, 0.0, dither=0.01, rng=np.random.default_rng(SEED))
    values = [pid.compute(np.zeros(1))[0] for _ in range(200)]
    assert max(abs(v) for v in values) <= 0.01
    assert len(set(values)) > 1

    with pytest.raises(ValueError):
        PidController(1.0, 0.0, 0.0, 0.0, ref=0.0)


def test_lqr_scalar_gain():
    gain = lqr_gain(scalar_discrete(), np.eye(1), np.eye(1))
    assert gain[0, 0] == pytest.approx((math.sqrt(5) - 1) / 2, rel=1e-8)


def test_lqr_matches_scipy_riccati():
    m = random_lti(3, np.random.default_rng(SEED))
    q, r = 20.0 * np.eye(3), np.eye(3)
    p = scipy.linalg.solve_discrete_are(m.a, m.b, q, r)
    expected = np.linalg.solve(r + m.b.T @ p @ m.b, m.b.T @ p @ m.a)

    np.testing.assert_allclose(lqr_gain(m, q, r), expected, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(solve_discrete_riccati(m.a, m.b, q, r), p, rtol=1e-6)


def test_lqr_needs_discrete_model():
    with pytest.raises(ModelError):
        lqr_gain(LtiModel([[0.0]], [[1.0]], [[1.0]], [[0.0]]), np.eye(1), np.eye(1))


def test_lqr_warmup_regulates_to_reference():
    m = scalar_discrete(a=1.1)
    controller = lqr_warmup(m, np.eye(1), np.eye(1), x_ref=np.array([2.0]))
    assert isinstance(controller, LqrController)

    x = np.zeros(1)
    for _ in range(200):
        x = m.step(x, controller.compute(x))
    assert np.all(np.isfinite(x))
    assert spectral_radius(m.a - m.b @ controller.gain) < 1.0
