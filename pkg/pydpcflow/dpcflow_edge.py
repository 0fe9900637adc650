#!/usr/bin/env python3
"""
DPC Flow Edge Node Logic

This module is responsible for the edge side of the control loop: the data
buffer of recent samples, the disturbance observer that estimates what the
truncated cloud computation got wrong, the composite control law and the
delay compensator used with the native cloud controller.
"""

from __future__ import annotations

from collections import deque
import dataclasses
import logging
import math

import numpy as np

from .dpcflow_linalg import ObserverInstabilityError, solve_discrete_lyapunov, spectral_radius

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class CloudPacket:
    """What the cloud returns for one step"""

    u_f: np.ndarray
    a_hat_row: np.ndarray
    b_hat_row: np.ndarray
    input_dim: int
    retained_rank: int = 0
    degenerate: bool = False
    sent_at: float = 0.0
    received_at: float = 0.0

    def __post_init__(self):
        if self.received_at < self.sent_at:
            raise ValueError(f"Packet received at {self.received_at} before it was sent at {self.sent_at}")

    @property
    def horizon(self) -> int:
        return self.u_f.size // self.input_dim

    @property
    def u_cloud(self) -> np.ndarray:
        return self.u_f[: self.input_dim].copy()

    @property
    def b_hat(self) -> np.ndarray:
        return np.atleast_2d(self.b_hat_row)[:, : self.input_dim].copy()

    @property
    def total_delay(self) -> float:
        return self.received_at - self.sent_at


class EdgeBuffer:
    """Last N inputs u(k-N..k-1) and outputs y(k-N+1..k)"""

    def __init__(self, n_horizon: int, input_dim: int, output_dim: int):
        self.n_horizon = n_horizon
        self.input_dim = input_dim
        self.output_dim = output_dim
        self._inputs: deque[np.ndarray] = deque(maxlen=n_horizon)
        self._outputs: deque[np.ndarray] = deque(maxlen=n_horizon)

    def push(self, u_prev: np.ndarray, y_now: np.ndarray):
        u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
        y_now = np.asarray(y_now, dtype=float).reshape(-1)
        if u_prev.size != self.input_dim or y_now.size != self.output_dim:
            raise ValueError(f"Expected {self.input_dim} inputs and {self.output_dim} outputs")
        self._inputs.append(u_prev)
        self._outputs.append(y_now)

    @property
    def warm(self) -> bool:
        return len(self._inputs) == self.n_horizon

    def __len__(self) -> int:
        return len(self._inputs)

    def w_p(self) -> np.ndarray:
        """Same layout as the cloud window: outputs oldest first, then inputs oldest first"""
        if not self.warm:
            raise ValueError(f"Edge buffer holds {len(self)} of {self.n_horizon} pairs")
        return np.concatenate([np.concatenate(self._outputs), np.concatenate(self._inputs)])


@dataclasses.dataclass(frozen=True)
class DobState:
    gain_l: np.ndarray
    selection: np.ndarray
    p_aux: np.ndarray
    d_hat: np.ndarray
    active: bool = False
    frozen: bool = False
    a_prev: np.ndarray | None = None
    b_prev: np.ndarray | None = None
    w_prev: np.ndarray | None = None

    @classmethod
    def create(cls, gain_l: np.ndarray | float, selection: np.ndarray | None = None, output_dim: int = 1) -> DobState:
        """Observer with gain L; selection picks which outputs feed it (identity when omitted)"""
        selection = np.eye(output_dim) if selection is None else np.atleast_2d(np.asarray(selection, dtype=float))
        gain_l = np.atleast_2d(np.asarray(gain_l, dtype=float))
        if gain_l.shape[1] != selection.shape[0]:
            raise ValueError(f"Gain {gain_l.shape} does not fit a selection of {selection.shape[0]} outputs")
        zeros = np.zeros(gain_l.shape[0])
        return cls(gain_l=gain_l, selection=selection, p_aux=zeros, d_hat=zeros.copy())

    @property
    def observer_gain(self) -> np.ndarray:
        """L @ S, mapping raw output innovation to input disturbance"""
        return self.gain_l @ self.selection


def dob_update(
    state: DobState,
    buf: EdgeBuffer,
    pkt: CloudPacket,
    y_now: np.ndarray,
    u_prev_cloud: np.ndarray,
    u_cloud_now: np.ndarray | None = None,
) -> tuple[np.ndarray, DobState]:
    """Measurement-form estimate against the previous step's nominal prediction.

    `buf` already holds the pair (u(k-1), y(k)). The previous step's rows,
    window and the auxiliary P(k+1) are cached in the returned state.
    """
    y_now = np.asarray(y_now, dtype=float).reshape(-1)
    ls = state.observer_gain
    zeros = np.zeros(state.gain_l.shape[0])
    if not buf.warm:
        return zeros, dataclasses.replace(state, d_hat=zeros, p_aux=zeros)

    d_hat = zeros
    frozen = False
    if state.active and state.a_prev is not None and state.b_prev is not None and state.w_prev is not None:
        h = -ls @ state.b_prev
        if spectral_radius(h) >= 1.0:
            logger.warning(f"Observer unstable with current b_hat (radius {spectral_radius(h):.4g}), holding estimate")
            d_hat = state.d_hat
            frozen = True
        else:
            innovation = y_now - state.a_prev @ state.w_prev - state.b_prev @ np.asarray(u_prev_cloud, dtype=float)
            d_hat = ls @ innovation
        if not np.all(np.isfinite(d_hat)):
            raise FloatingPointError("Disturbance estimate is not finite")

    w_now = buf.w_p()
    a_row = np.atleast_2d(pkt.a_hat_row)
    b_hat = pkt.b_hat
    u_cloud = pkt.u_cloud if u_cloud_now is None else np.asarray(u_cloud_now, dtype=float)
    p_next = -ls @ (a_row @ w_now + b_hat @ u_cloud)
    return d_hat, dataclasses.replace(
        state, d_hat=d_hat, p_aux=p_next, frozen=frozen, a_prev=a_row, b_prev=b_hat, w_prev=w_now
    )


def dob_update_auxiliary(state: DobState, y_now: np.ndarray) -> np.ndarray:
    """Auxiliary-form estimate P(k) + L y(k), equal to dob_update's next estimate"""
    return state.p_aux + state.observer_gain @ np.asarray(y_now, dtype=float).reshape(-1)


def composite_control(u_cloud: np.ndarray, d_hat: np.ndarray, k: int, n_horizon: int) -> np.ndarray:
    u_cloud = np.asarray(u_cloud, dtype=float)
    if k <= n_horizon:
        return u_cloud
    return u_cloud - np.asarray(d_hat, dtype=float)


def delay_compensator_select(sequence: np.ndarray, total_delay: float, period: float, input_dim: int = 1) -> np.ndarray:
    """Block floor(delay / period) of the predicted sequence, clamped to the last one"""
    if period <= 0:
        raise ValueError(f"Sampling period must be positive, got {period}")
    sequence = np.asarray(sequence, dtype=float).reshape(-1)
    blocks = sequence.size // input_dim
    index = min(max(math.floor(total_delay / period), 0), blocks - 1)
    return sequence[index * input_dim : (index + 1) * input_dim].copy()


@dataclasses.dataclass(frozen=True)
class ObserverVerdict:
    stable: bool
    radius: float
    h: np.ndarray
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    delta: float | None = None


def verify_observer_gain(
    gain_l: np.ndarray | float,
    b_hat: np.ndarray | float,
    q: np.ndarray | float | None = None,
    selection: np.ndarray | None = None,
) -> ObserverVerdict:
    gain_l = np.atleast_2d(np.asarray(gain_l, dtype=float))
    b_hat = np.atleast_2d(np.asarray(b_hat, dtype=float))
    if selection is not None:
        b_hat = np.atleast_2d(selection) @ b_hat
    h = -gain_l @ b_hat
    q = np.eye(h.shape[0]) if q is None else np.atleast_2d(np.asarray(q, dtype=float))
    try:
        p = solve_discrete_lyapunov(h, q)
    except ObserverInstabilityError as err:
        logger.info(f"Observer gain rejected: {err}")
        return ObserverVerdict(stable=False, radius=err.spectral_radius, h=h)
    delta = float(np.min(np.linalg.eigvalsh(q)) / np.max(np.linalg.eigvalsh(p)))
    return ObserverVerdict(stable=True, radius=spectral_radius(h), h=h, p=p, q=q, delta=delta)


def ultimate_bound(verdict: ObserverVerdict, eps4: float) -> float:
    """Radius the estimation error settles into for disturbances bounded by eps4"""
    if not verdict.stable or verdict.p is None or verdict.delta is None:
        raise ValueError("No ultimate bound for an unstable observer")
    p = verdict.p
    scale = verdict.delta * float(np.min(np.linalg.eigvalsh(p)))
    b = 2.0 * eps4 * float(np.linalg.norm(verdict.h.T @ p, 2)) / scale
    c = eps4**2 * float(np.linalg.norm(p, 2)) / scale
    return (b + math.sqrt(b * b + 4.0 * c)) / 2.0


@dataclasses.dataclass(frozen=True)
class EdgeStep:
    k: int
    u_cloud: np.ndarray
    d_hat: np.ndarray
    u_applied: np.ndarray
    total_delay: float


class EdgeController:
    """Edge-side control loop around the packets the cloud delivers"""

    def __init__(
        self,
        n_horizon: int,
        input_dim: int,
        output_dim: int,
        period: float,
        gain_l: np.ndarray | float | None = None,
        selection: np.ndarray | None = None,
        delay_compensation: bool = False,
    ):
        self.n_horizon = n_horizon
        self.period = period
        self.delay_compensation = delay_compensation
        self.buffer = EdgeBuffer(n_horizon, input_dim, output_dim)
        self.dob = DobState.create(gain_l, selection, output_dim) if gain_l is not None else None
        self.packet: CloudPacket | None = None
        self.k = 0
        self._u_cloud_prev = np.zeros(input_dim)
        self._u_held = np.zeros(input_dim)

    @property
    def uses_dob(self) -> bool:
        return self.dob is not None

    def record(self, u_prev: np.ndarray, y_now: np.ndarray):
        """Feed a warm-up pair without producing a control"""
        self.buffer.push(u_prev, y_now)

    def hold(self, u: np.ndarray):
        """Input repeated until the first packet arrives"""
        self._u_held = np.asarray(u, dtype=float).reshape(-1).copy()

    def step(self, u_prev: np.ndarray, y_now: np.ndarray, packet: CloudPacket | None = None) -> EdgeStep:
        self.buffer.push(u_prev, y_now)
        self.k += 1
        fresh = packet is not None
        if packet is not None:
            self.packet = packet
        if self.packet is None:
            return EdgeStep(self.k, self._u_held, np.zeros_like(self._u_held), self._u_held, 0.0)

        if not fresh:
            u_cloud = self._u_cloud_prev
        elif self.delay_compensation:
            u_cloud = delay_compensator_select(self.packet.u_f, self.packet.total_delay, self.period, self.packet.input_dim)
        else:
            u_cloud = self.packet.u_cloud

        d_hat = np.zeros_like(u_cloud)
        u_applied = u_cloud
        if self.dob is not None:
            state = dataclasses.replace(self.dob, active=self.k > self.n_horizon)
            d_hat, self.dob = dob_update(
                state, self.buffer, self.packet, y_now, self._u_cloud_prev, u_cloud
            )
            # the plant input only changes when a packet lands
            u_applied = composite_control(u_cloud, d_hat, self.k, self.n_horizon) if fresh else self._u_held
        self._u_cloud_prev = u_cloud
        self._u_held = u_applied
        return EdgeStep(self.k, u_cloud, d_hat, u_applied, self.packet.total_delay)
