"""Tests for the edge buffer, disturbance observer, composite control and delay compensation"""

import dataclasses

import numpy as np
import pytest

from pydpcflow import (
    CloudPacket,
    DobState,
    EdgeBuffer,
    EdgeController,
    composite_control,
    delay_compensator_select,
    dob_update,
    dob_update_auxiliary,
    ultimate_bound,
    verify_observer_gain,
)

# scalar plant y(k+1) = A_ROW w_p(k) + B (u(k) + d(k)) with w_p(k) = [y(k), u(k-1)]
A_ROW = np.array([[0.3, 0.1]])
B = 0.2
GAIN = 2.5  # L B = 0.5
U_CLOUD = 0.05


def scalar_packet() -> CloudPacket:
    return CloudPacket(u_f=np.array([U_CLOUD]), a_hat_row=A_ROW, b_hat_row=np.array([[B]]), input_dim=1)


def run_scalar_loop(
    disturbances: np.ndarray, gain: float = GAIN
) -> tuple[np.ndarray, list[DobState], list[np.ndarray]]:
    """Estimates d_hat(k), observer states and measured y(k) for each step under the given input disturbances"""
    buf = EdgeBuffer(1, 1, 1)
    state = DobState.create(gain)
    pkt = scalar_packet()
    y, u_prev = np.zeros(1), np.zeros(1)
    estimates, states, outputs = [], [], []
    for k, d in enumerate(disturbances):
        buf.push(u_prev, y)
        d_hat, state = dob_update(dataclasses.replace(state, active=k > 0), buf, pkt, y, np.array([U_CLOUD]))
        estimates.append(float(d_hat[0]))
        states.append(state)
        outputs.append(y)
        u_applied = composite_control(pkt.u_cloud, d_hat, k + 2, 1)
        y = A_ROW @ buf.w_p() + B * (u_applied + d)
        u_prev = u_applied
    return np.array(estimates), states, outputs


def test_buffer_layout():
    buf = EdgeBuffer(2, 1, 2)
    buf.push([1.0], [10.0, 11.0])
    assert not buf.warm
    with pytest.raises(ValueError):
        buf.w_p()

    buf.push([2.0], [20.0, 21.0])
    np.testing.assert_array_equal(buf.w_p(), [10.0, 11.0, 20.0, 21.0, 1.0, 2.0])

    buf.push([3.0], [30.0, 31.0])
    np.testing.assert_array_equal(buf.w_p(), [20.0, 21.0, 30.0, 31.0, 2.0, 3.0])
    assert len(buf) == 2

    with pytest.raises(ValueError):
        buf.push([1.0, 2.0], [0.0, 0.0])


def test_packet_views():
    pkt = CloudPacket(
        u_f=np.arange(6.0),
        a_hat_row=np.zeros((2, 4)),
        b_hat_row=np.arange(12.0).reshape(2, 6),
        input_dim=2,
        sent_at=1.0,
        received_at=1.25,
    )
    assert pkt.horizon == 3
    np.testing.assert_array_equal(pkt.u_cloud, [0.0, 1.0])
    np.testing.assert_array_equal(pkt.b_hat, [[0.0, 1.0], [6.0, 7.0]])
    assert pkt.total_delay == pytest.approx(0.25)

    with pytest.raises(ValueError):
        CloudPacket(u_f=np.zeros(1), a_hat_row=A_ROW, b_hat_row=np.zeros((1, 1)), input_dim=1, sent_at=2.0, received_at=1.0)


def test_dob_state_shapes():
    state = DobState.create(np.array([[1.0, 2.0]]), selection=np.eye(3)[[0, 2]], output_dim=3)
    np.testing.assert_array_equal(state.observer_gain, [[1.0, 0.0, 2.0]])

    with pytest.raises(ValueError):
        DobState.create(np.eye(2), selection=np.eye(3), output_dim=3)


def test_dob_constant_disturbance_contracts():
    """Estimation error around the steady state halves every step when L B = 0.5"""
    d = 0.3
    estimates, _, _ = run_scalar_loop(np.full(30, d))
    steady = d / 3  # L B d / (1 + L B)

    assert estimates[0] == 0.0
    for k, estimate in enumerate(estimates):
        assert abs(estimate - steady) <= 0.5**k * abs(estimates[0] - steady) + 1e-12


def test_dob_auxiliary_form_agrees():
    """P(k + 1) + L y(k + 1) from the cached state equals the next measurement-form estimate"""
    estimates, states, outputs = run_scalar_loop(np.random.default_rng(2).uniform(-0.1, 0.1, size=20))
    for k in range(len(estimates) - 1):
        predicted = dob_update_auxiliary(states[k], outputs[k + 1])
        assert float(predicted[0]) == pytest.approx(estimates[k + 1], abs=1e-12)


def test_dob_error_stays_in_ultimate_bound():
    eps4 = 0.01
    rng = np.random.default_rng(11)
    disturbances = rng.uniform(-eps4, eps4, size=2000)
    estimates, _, _ = run_scalar_loop(disturbances)

    verdict = verify_observer_gain(GAIN, B)
    bound = ultimate_bound(verdict, eps4)
    assert bound == pytest.approx(2 * eps4)
    # d_hat(k) estimates the disturbance that acted one step earlier
    errors = np.abs(disturbances[:-1] - estimates[1:])
    assert np.all(errors[50:] <= bound + 1e-9)


def test_dob_freezes_when_observer_unstable(caplog):
    estimates, states, _ = run_scalar_loop(np.full(4, 0.1), gain=10.0)

    assert np.all(estimates == 0.0)
    assert states[-1].frozen
    assert "Observer unstable" in caplog.text


def test_dob_cold_buffer_returns_zero():
    state = DobState.create(1.0)
    d_hat, new_state = dob_update(state, EdgeBuffer(2, 1, 1), scalar_packet(), np.zeros(1), np.zeros(1))
    assert d_hat[0] == 0.0
    assert new_state.a_prev is None


def test_composite_control():
    np.testing.assert_array_equal(composite_control([1.0], [0.25], k=3, n_horizon=3), [1.0])
    np.testing.assert_array_equal(composite_control([1.0], [0.25], k=4, n_horizon=3), [0.75])


@pytest.mark.parametrize(
    "delay,expected",
    [
        (0.0, [1.0, 2.0]),
        (0.019, [1.0, 2.0]),
        (0.025, [3.0, 4.0]),
        (0.047, [5.0, 6.0]),
        (1.0, [5.0, 6.0]),
    ],
)
def test_delay_compensator(delay, expected):
    sequence = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    np.testing.assert_array_equal(delay_compensator_select(sequence, delay, 0.02, input_dim=2), expected)


def test_delay_compensator_needs_period():
    with pytest.raises(ValueError):
        delay_compensator_select(np.zeros(3), 0.01, 0.0)


def test_observer_verdict_scalar():
    verdict = verify_observer_gain(GAIN, B)
    assert verdict.stable
    assert verdict.radius == pytest.approx(0.5)
    assert verdict.p[0, 0] == pytest.approx(4.0 / 3.0)
    assert verdict.delta == pytest.approx(0.75)

    unstable = verify_observer_gain(10.0, B)
    assert not unstable.stable
    assert unstable.radius == pytest.approx(2.0)
    with pytest.raises(ValueError):
        ultimate_bound(unstable, 0.1)


def test_observer_verdict_with_selection():
    b_hat = np.array([[0.5], [0.2]])
    verdict = verify_observer_gain(np.array([[2.5]]), b_hat, selection=np.array([[0.0, 1.0]]))
    assert verdict.h[0, 0] == pytest.approx(-0.5)


def test_edge_holds_until_first_packet():
    edge = EdgeController(2, 1, 1, 0.02)
    edge.hold(np.array([0.3]))
    step = edge.step(np.array([0.3]), np.array([0.0]))

    np.testing.assert_array_equal(step.u_applied, [0.3])
    assert step.k == 1


def test_edge_delay_compensation_and_hold():
    edge = EdgeController(3, 1, 1, 0.02, delay_compensation=True)
    pkt = CloudPacket(
        u_f=np.array([1.0, 2.0, 3.0]),
        a_hat_row=np.zeros((1, 6)),
        b_hat_row=np.zeros((1, 3)),
        input_dim=1,
        sent_at=0.0,
        received_at=0.047,
    )
    first = edge.step(np.zeros(1), np.zeros(1), pkt)
    second = edge.step(first.u_applied, np.zeros(1))

    np.testing.assert_array_equal(first.u_cloud, [3.0])
    np.testing.assert_array_equal(second.u_cloud, [3.0])
    assert first.total_delay == pytest.approx(0.047)


def test_edge_observer_waits_for_horizon():
    edge = EdgeController(2, 1, 1, 0.02, gain_l=GAIN)
    pkt = scalar_packet()
    pkt = dataclasses.replace(pkt, a_hat_row=np.array([[0.3, 0.1, 0.0, 0.0]]), u_f=np.array([U_CLOUD, 0.0]))
    rng = np.random.default_rng(5)
    steps = [edge.step(np.zeros(1), rng.standard_normal(1), pkt) for _ in range(4)]

    assert edge.uses_dob
    assert all(step.d_hat[0] == 0.0 for step in steps[:2])
    assert steps[3].d_hat[0] != 0.0
    np.testing.assert_allclose(steps[3].u_applied, steps[3].u_cloud - steps[3].d_hat)


def test_edge_observer_holds_input_between_packets():
    edge = EdgeController(2, 1, 1, 0.02, gain_l=GAIN)
    pkt = dataclasses.replace(scalar_packet(), a_hat_row=np.array([[0.3, 0.1, 0.0, 0.0]]), u_f=np.array([U_CLOUD, 0.0]))
    rng = np.random.default_rng(5)
    steps = [edge.step(np.zeros(1), rng.standard_normal(1), pkt) for _ in range(4)]
    held = [edge.step(steps[-1].u_applied, rng.standard_normal(1)) for _ in range(3)]

    assert steps[-1].d_hat[0] != 0.0
    for step in held:
        np.testing.assert_array_equal(step.u_applied, steps[-1].u_applied)
    # the estimate keeps moving while the input is held
    assert held[0].d_hat[0] != steps[-1].d_hat[0]
