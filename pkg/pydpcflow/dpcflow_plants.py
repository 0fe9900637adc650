#!/usr/bin/env python3
"""
DPC Flow Plant Models

Linear plant models for the ball-beam, vehicle path-tracking and power
network examples plus random fixtures, zero-order-hold discretization and the
PID and LQR controllers that drive the plants while the data window fills.
"""

from __future__ import annotations

import dataclasses
from importlib import resources
import logging
import math
from typing import Protocol

import networkx as nx
import numpy as np
import scipy.linalg

from .dpcflow_linalg import DimensionError, solve_discrete_riccati, spectral_radius

logger = logging.getLogger(__name__)

GRAVITY = 9.81
KMH = 1000.0 / 3600.0


class ModelError(ValueError):
    """Plant parameters do not describe a usable model"""


@dataclasses.dataclass(frozen=True)
class LtiModel:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    dt: float = 0.0
    is_discrete: bool = False

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(a.shape[0], -1)
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        d = np.asarray(self.d, dtype=float).reshape(c.shape[0], b.shape[1])
        if a.shape[0] != a.shape[1] or c.shape[1] != a.shape[0]:
            raise DimensionError(f"Incompatible model matrices a {a.shape}, b {b.shape}, c {c.shape}")
        if self.is_discrete and self.dt <= 0:
            raise ModelError(f"A discrete model needs a positive dt, got {self.dt}")
        for name, value in (("a", a), ("b", b), ("c", c), ("d", d)):
            object.__setattr__(self, name, value)

    @property
    def state_dim(self) -> int:
        return int(self.a.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.b.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.c.shape[0])

    def select_inputs(self, columns: list[int]) -> LtiModel:
        return dataclasses.replace(self, b=self.b[:, columns], d=self.d[:, columns])

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if not self.is_discrete:
            raise ModelError("Only discrete models can be stepped, discretize first")
        return self.a @ x + self.b @ np.atleast_1d(u)

    def output(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        y = self.c @ x
        if u is not None:
            y = y + self.d @ np.atleast_1d(u)
        return y


def discretize_zoh(m: LtiModel, dt: float) -> LtiModel:
    """Zero-order hold via the exponential of the augmented [[A, B], [0, 0]] matrix"""
    if m.is_discrete:
        raise ModelError("Model is already discrete")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n, p = m.state_dim, m.input_dim
    augmented = np.zeros((n + p, n + p))
    augmented[:n, :n] = m.a
    augmented[:n, n:] = m.b
    phi = scipy.linalg.expm(augmented * dt)
    return LtiModel(phi[:n, :n], phi[:n, n:], m.c, m.d, dt=dt, is_discrete=True)


@dataclasses.dataclass(frozen=True)
class BallBeamParams:
    beam_length: float = 0.4
    gear_radius: float = 0.04
    ball_radius: float = 0.015
    ball_inertia: float = 9.9e-6
    ball_mass: float = 0.11
    gravity: float = GRAVITY

    def __post_init__(self):
        if self.gear_radius < 0:
            raise ModelError(f"Gear radius must be non-negative, got {self.gear_radius}")
        for name in ("beam_length", "ball_radius", "ball_inertia", "ball_mass", "gravity"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def coupling(self) -> float:
        """Ball acceleration per radian of gear angle"""
        p = self
        return -p.ball_mass * p.gear_radius * p.gravity / (
            p.beam_length * (p.ball_inertia / p.ball_radius**2 + p.ball_mass)
        )


def ball_beam_model(p: BallBeamParams) -> LtiModel:
    """States (position, velocity, gear angle, gear rate); input is gear acceleration"""
    a = np.zeros((4, 4))
    a[0, 1] = 1.0
    a[1, 2] = p.coupling
    a[2, 3] = 1.0
    b = np.array([[0.0], [0.0], [0.0], [1.0]])
    c = np.array([[1.0, 0.0, 0.0, 0.0]])
    return LtiModel(a, b, c, np.zeros((1, 1)))


@dataclasses.dataclass(frozen=True)
class BallBeamServo:
    """Gear-angle servo: gear acceleration = k_theta (g u - theta) - k_omega theta_dot

    command_gain g is the gear angle one unit of input asks for.
    """

    k_theta: float = 400.0
    k_omega: float = 36.0
    command_gain: float = 1.0

    def __post_init__(self):
        if self.command_gain <= 0:
            raise ModelError(f"Servo command gain must be positive, got {self.command_gain}")


def servo_model(p: BallBeamParams, servo: BallBeamServo | None = None) -> LtiModel:
    """Ball-beam with the servo loop closed; the input is the scaled gear angle reference"""
    servo = servo or BallBeamServo()
    raw = ball_beam_model(p)
    a = raw.a.copy()
    a[3, 2] = -servo.k_theta
    a[3, 3] = -servo.k_omega
    return LtiModel(a, raw.b * servo.k_theta * servo.command_gain, raw.c, raw.d)


@dataclasses.dataclass(frozen=True)
class VehicleParams:
    speed: float
    wheelbase: float = 0.5
    curvature: float = 0.024

    def __post_init__(self):
        if self.speed <= 0:
            raise ModelError(f"Vehicle speed must be positive, got {self.speed}")
        if self.wheelbase <= 0:
            raise ModelError(f"Wheelbase must be positive, got {self.wheelbase}")

    @classmethod
    def from_kmh(cls, speed_kmh: float, **kwargs) -> VehicleParams:
        return cls(speed=speed_kmh * KMH, **kwargs)

    @property
    def feedforward(self) -> float:
        """tan of the reference steering angle"""
        return self.wheelbase * self.curvature

    @property
    def radius(self) -> float:
        return math.inf if self.curvature == 0 else 1.0 / self.curvature


def vehicle_error_model(p: VehicleParams) -> LtiModel:
    """States (heading error, lateral error); inputs (steering, curvature feedforward)"""
    v, l = p.speed, p.wheelbase
    a = np.array([[0.0, 0.0], [v, 0.0]])
    b = np.array([[v / l, -v / l], [0.0, 0.0]])
    return LtiModel(a, b, np.eye(2), np.zeros((2, 2)))


class VehicleKinematics:
    """Global pose of the vehicle, for path plots only"""

    def __init__(self, p: VehicleParams, lateral_offset: float = 0.0, heading_offset: float = 0.0):
        self.params = p
        # the reference circle is centred at (0, R); start on it, shifted outward by the offset
        self.x = 0.0
        self.y = -lateral_offset
        self.heading = heading_offset

    @property
    def center(self) -> tuple[float, float]:
        return 0.0, self.params.radius

    def step(self, steering: float, dt: float):
        v = self.params.speed
        self.x += v * math.cos(self.heading) * dt
        self.y += v * math.sin(self.heading) * dt
        self.heading += v / self.params.wheelbase * steering * dt

    def radial_error(self) -> float:
        cx, cy = self.center
        return math.hypot(self.x - cx, self.y - cy) - self.params.radius

    def reference_circle(self, points: int = 361) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        angles = np.linspace(0.0, 2 * np.pi, points)
        return cx + self.params.radius * np.sin(angles), cy - self.params.radius * np.cos(angles)


@dataclasses.dataclass(frozen=True)
class PowerNetParams:
    graph: nx.Graph
    inertia: np.ndarray
    damping: np.ndarray
    generators: tuple[int, ...]

    def __post_init__(self):
        n = self.graph.number_of_nodes()
        if n == 0:
            raise ModelError("Power network has no buses")
        if not nx.is_connected(self.graph):
            raise ModelError(f"Power network is disconnected ({nx.number_connected_components(self.graph)} islands)")
        inertia = np.broadcast_to(np.asarray(self.inertia, dtype=float), (n,)).copy()
        damping = np.broadcast_to(np.asarray(self.damping, dtype=float), (n,)).copy()
        if np.any(inertia <= 0):
            raise ModelError("Bus inertias must be positive")
        if np.any(damping < 0):
            raise ModelError("Bus damping must be non-negative")
        missing = [bus for bus in self.generators if bus not in self.graph]
        if missing:
            raise ModelError(f"Generator buses {missing} are not in the network")
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "damping", damping)

    @property
    def buses(self) -> list[int]:
        return sorted(self.graph.nodes)


def load_edge_list(text: str) -> nx.Graph:
    graph = nx.Graph()
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (2, 3):
            raise ModelError(f"Edge list line {number}: expected 'i j [weight]', got {line!r}")
        weight = float(fields[2]) if len(fields) == 3 else 1.0
        graph.add_edge(int(fields[0]), int(fields[1]), weight=weight)
    return graph


def default_generators(graph: nx.Graph, count: int = 10) -> tuple[int, ...]:
    """The count highest-degree buses, ties to the lower index"""
    ranked = sorted(graph.nodes, key=lambda bus: (-graph.degree[bus], bus))
    return tuple(sorted(ranked[:count]))


def power_network_params(
    edge_list: str | None = None,
    inertia: float | np.ndarray = 1.0,
    damping: float | np.ndarray = 0.5,
    generators: tuple[int, ...] | None = None,
    n_generators: int = 10,
) -> PowerNetParams:
    """39-bus defaults, every part overridable"""
    if edge_list is None:
        edge_list = resources.files("pydpcflow").joinpath("data/ieee39_edges.txt").read_text()
    graph = load_edge_list(edge_list)
    if generators is None:
        generators = default_generators(graph, n_generators)
    return PowerNetParams(graph, np.asarray(inertia), np.asarray(damping), tuple(generators))


def power_network_model(p: PowerNetParams) -> LtiModel:
    """Swing dynamics; states (angles, frequencies), inputs and outputs at the generator buses"""
    buses = p.buses
    n = len(buses)
    laplacian = nx.laplacian_matrix(p.graph, nodelist=buses, weight="weight").toarray().astype(float)
    m_inv = np.diag(1.0 / p.inertia)
    a = np.block([[np.zeros((n, n)), np.eye(n)], [-m_inv @ laplacian, -np.diag(p.damping) @ m_inv]])
    columns = [buses.index(bus) for bus in p.generators]
    b = np.vstack([np.zeros((n, len(columns))), m_inv[:, columns]])
    c = np.zeros((len(columns), 2 * n))
    c[np.arange(len(columns)), columns] = 1.0
    return LtiModel(a, b, c, np.zeros((len(columns), len(columns))))


def random_lti(n: int, rng: np.random.Generator, radius: float = 0.9, dt: float = 1.0) -> LtiModel:
    """Gaussian A and B with A rescaled to the given spectral radius; C = I, D = 0"""
    a = rng.standard_normal((n, n))
    a *= radius / spectral_radius(a)
    b = rng.standard_normal((n, n))
    return LtiModel(a, b, np.eye(n), np.zeros((n, n)), dt=dt, is_discrete=True)


class WarmupController(Protocol):
    def compute(self, measurement: np.ndarray) -> np.ndarray: ...


class PidController:
    """Positional PID on the first measured output, with optional uniform dither"""

    def __init__(
        self,
        kp: float,
        ki: float,
        kd: float,
        dt: float,
        ref: float,
        direction: float = 1.0,
        dither: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.kp, self.ki, self.kd = kp, ki, kd
        self.dt = dt
        self.ref = ref
        self.direction = direction
        self.dither = dither
        self.rng = rng or np.random.default_rng(0)
        self.reset()

    def reset(self):
        self._integral = 0.0
        self._e_prev = 0.0

    def compute(self, measurement: np.ndarray) -> np.ndarray:
        e = self.ref - float(np.atleast_1d(measurement)[0])
        self._integral += e
        u = self.kp * e + self.ki * self.dt * self._integral + self.kd * (e - self._e_prev) / self.dt
        self._e_prev = e
        noise = self.rng.uniform(-self.dither, self.dither) if self.dither > 0 else 0.0
        return np.array([self.direction * u + noise])


def pid_warmup(
    gains: dict[str, float],
    dt: float,
    ref: float,
    direction: float = 1.0,
    dither: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PidController:
    return PidController(gains["kp"], gains["ki"], gains["kd"], dt, ref, direction, dither, rng)


class LqrController:
    """u = -K (x - x_ref) plus optional dither"""

    def __init__(
        self,
        gain: np.ndarray,
        x_ref: np.ndarray | None = None,
        u_ref: np.ndarray | None = None,
        dither: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        self.gain = np.atleast_2d(gain)
        self.x_ref = np.zeros(self.gain.shape[1]) if x_ref is None else np.asarray(x_ref, dtype=float)
        self.u_ref = np.zeros(self.gain.shape[0]) if u_ref is None else np.asarray(u_ref, dtype=float)
        self.dither = dither
        self.rng = rng or np.random.default_rng(0)

    def compute(self, measurement: np.ndarray) -> np.ndarray:
        u = self.u_ref - self.gain @ (np.asarray(measurement, dtype=float) - self.x_ref)
        if self.dither > 0:
            u = u + self.rng.uniform(-self.dither, self.dither, size=u.shape)
        return u


def lqr_gain(m: LtiModel, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    if not m.is_discrete:
        raise ModelError("LQR design needs a discrete model")
    p = solve_discrete_riccati(m.a, m.b, q, r)  # may raise
    return scipy.linalg.solve(np.atleast_2d(r) + m.b.T @ p @ m.b, m.b.T @ p @ m.a)


def lqr_warmup(
    m: LtiModel,
    q: np.ndarray,
    r: np.ndarray,
    x_ref: np.ndarray | None = None,
    dither: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LqrController:
    gain = lqr_gain(m, q, r)
    logger.debug(f"LQR closed-loop spectral radius {spectral_radius(m.a - m.b @ gain):.6g}")
    return LqrController(gain, x_ref=x_ref, dither=dither, rng=rng)
