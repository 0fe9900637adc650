#!/usr/bin/env python3
"""
DPC Flow Experiment Harness

This module runs the cloud-edge control loop end to end on a virtual clock:
warm-up under a classical controller, then one cloud computation at a time
(dense single-process or the workflow engine) whose modeled delay decides
when its packet reaches the edge, the edge compensation, the plant step and
the data window update. It also profiles the controller stages, sweeps the
truncation level and writes CSV reports.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from pathlib import Path
import time

import numpy as np
import pandas as pd

from .dpcflow_edge import CloudPacket, EdgeController
from .dpcflow_fabric import EdgeCost, FabricCosts, Frame, FrameKind
from .dpcflow_linalg import (
    SvdFactors,
    TruncationMode,
    TruncationPolicy,
    do_truncate,
    pseudo_inverse_from_factors,
    svd_dense,
    svd_flops,
)
from .dpcflow_plants import (
    BallBeamParams,
    BallBeamServo,
    LtiModel,
    PowerNetParams,
    VehicleKinematics,
    VehicleParams,
    WarmupController,
    discretize_zoh,
    lqr_warmup,
    pid_warmup,
    power_network_model,
    power_network_params,
    random_lti,
    servo_model,
    vehicle_error_model,
)
from .dpcflow_predictor import (
    CloudParams,
    ErrorBudget,
    HankelSet,
    cloud_params_from_factors,
    coefficient_flops,
    coefficient_matrices,
    compute_cloud_params,
    control_flops,
    control_sequence,
    error_budget,
    hankel_build,
    hankel_slide,
    window_length,
)
from .dpcflow_workflow import (
    ConfigError,
    WorkflowEngine,
    WorkflowMode,
    WorkflowSettings,
    build_dpc_dag,
    switch_topology,
)

logger = logging.getLogger(__name__)

STAGES = ("svd", "pinv", "coefficients", "control")


class PlantKind(enum.Enum):
    BALL_BEAM = "ball-beam"
    VEHICLE = "vehicle"
    POWER = "power"
    RANDOM = "random"


class Method(enum.Enum):
    NATIVE = "native"
    NATIVE_DELAY_COMP = "native+delay-comp"
    WORKFLOW = "workflow"
    WORKFLOW_DOB = "workflow+dob"

    @property
    def uses_workflow(self) -> bool:
        return self in (Method.WORKFLOW, Method.WORKFLOW_DOB)

    @property
    def uses_dob(self) -> bool:
        return self == Method.WORKFLOW_DOB

    @property
    def uses_delay_compensation(self) -> bool:
        return self == Method.NATIVE_DELAY_COMP


# element types of the comma-separated fields
_LIST_ITEMS = {"observer_gain": float, "observer_outputs": int}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one run; the defaults are the ball-beam example"""

    plant: PlantKind = PlantKind.BALL_BEAM
    method: Method = Method.WORKFLOW_DOB
    n_horizon: int = 30
    j_cols: int = 1500
    lam: float = 0.031
    truncation: TruncationMode = TruncationMode.RELATIVE_PRECISION
    epsilon1: float = 1e-15
    keep_count: int = 1
    observer_gain: tuple[float, ...] = (50.0,)
    observer_outputs: tuple[int, ...] = ()
    period: float = 0.02
    duration: int = 400
    mpt: int = 10
    fold_into_export: int = -1
    reference: float = 0.1
    warmup_reference: float = 0.2
    initial_offset: float = 0.0
    pid_kp: float = 9.0
    pid_ki: float = 3.0
    pid_kd: float = 7.5
    servo_command_gain: float = 4.0
    lqr_q: float = 20.0
    lqr_r: float = 1.0
    speed_kmh: float = 30.0
    curvature: float = 0.024
    wheelbase: float = 0.5
    generators: int = 10
    random_dim: int = 4
    dither: float = 1e-3
    seed: int = 0
    real_time: bool = True
    cloud_flops_per_second: float = 2.2e12
    link_latency: float = 1e-3
    link_bandwidth: float = 1.25e7
    fabric_latency: float = 2e-4
    fabric_bandwidth: float = 1.25e8
    codec_rate: float = 1e9
    divergence_guard: float = 1e6
    compute_bounds: bool = False
    output_dir: str = "results"

    @classmethod
    def parse_config_text(cls, text: str) -> ExperimentConfig:
        defaults = {field.name: getattr(cls(), field.name) for field in dataclasses.fields(cls)}
        values: dict[str, object] = {}
        for number, raw_line in enumerate(text.splitlines(), 1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {number}: expected 'key = value', got {raw_line.strip()!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in defaults:
                raise ConfigError(f"line {number}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {number}: duplicate key {key!r}")
            try:
                values[key] = _convert(key, defaults[key], raw)
            except ValueError as err:
                raise ConfigError(f"line {number}: bad value {raw!r} for {key}") from err
        cfg = cls(**values)  # type: ignore[arg-type]
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        return cls.parse_config_text(Path(path).read_text())  # may raise

    def with_overrides(self, **changes) -> ExperimentConfig:
        unknown = set(changes) - {field.name for field in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"Unknown configuration keys {sorted(unknown)}")
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def dims(self) -> tuple[int, int]:
        """(input_dim, output_dim) of the plant the controller sees"""
        if self.plant == PlantKind.BALL_BEAM:
            return 1, 1
        if self.plant == PlantKind.VEHICLE:
            return 1, 2
        if self.plant == PlantKind.POWER:
            return self.generators, self.generators
        return self.random_dim, self.random_dim

    def validate(self):
        if not self.period > 0:
            raise ConfigError(f"period must be positive, got {self.period}")
        if self.n_horizon < 1 or self.j_cols < 1:
            raise ConfigError(f"n_horizon and j_cols must be >= 1, got {self.n_horizon} and {self.j_cols}")
        if not self.lam > 0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if not 0.0 < self.epsilon1 <= 1.0:
            raise ConfigError(f"epsilon1 must be in (0, 1], got {self.epsilon1}")
        if self.keep_count < 1:
            raise ConfigError(f"keep_count must be >= 1, got {self.keep_count}")
        if self.duration < 0:
            raise ConfigError(f"duration must be non-negative, got {self.duration}")
        if not 1 <= self.mpt <= self.j_cols:
            raise ConfigError(f"mpt must be in 1..{self.j_cols}, got {self.mpt}")
        if not -1 <= self.fold_into_export <= self.mpt - 1:
            raise ConfigError(f"fold_into_export must be -1 (default) or in 0..{self.mpt - 1}, got {self.fold_into_export}")
        if self.servo_command_gain <= 0:
            raise ConfigError(f"servo_command_gain must be positive, got {self.servo_command_gain}")
        if self.cloud_flops_per_second <= 0:
            raise ConfigError(f"cloud_flops_per_second must be positive, got {self.cloud_flops_per_second}")
        if self.random_dim < 1 or self.generators < 1:
            raise ConfigError("random_dim and generators must be >= 1")
        input_dim, output_dim = self.dims()
        bad = [i for i in self.observer_outputs if not 0 <= i < output_dim]
        if bad:
            raise ConfigError(f"observer_outputs {bad} outside 0..{output_dim - 1}")
        selected = len(self.observer_outputs) or output_dim
        if len(self.observer_gain) == 1:
            if input_dim != selected:
                raise ConfigError(f"A scalar observer gain needs as many inputs ({input_dim}) as observed outputs ({selected})")
        elif len(self.observer_gain) != input_dim * selected:
            raise ConfigError(f"observer_gain needs 1 or {input_dim}x{selected} values, got {len(self.observer_gain)}")

    def truncation_policy(self) -> TruncationPolicy:
        return TruncationPolicy(self.truncation, epsilon1=self.epsilon1, keep_count=self.keep_count)

    def observer(self) -> tuple[np.ndarray, np.ndarray]:
        """Gain L and output selection S"""
        input_dim, output_dim = self.dims()
        outputs = list(self.observer_outputs) or list(range(output_dim))
        selection = np.eye(output_dim)[outputs]
        if len(self.observer_gain) == 1:
            gain = self.observer_gain[0] * np.eye(input_dim)
        else:
            gain = np.array(self.observer_gain).reshape(input_dim, len(outputs))
        return gain, selection

    def link_costs(self) -> FabricCosts:
        """Edge to cloud link"""
        return FabricCosts(self.link_latency, self.link_bandwidth, self.codec_rate, self.codec_rate)

    def fabric_costs(self) -> FabricCosts:
        """Between workflow tasks"""
        return FabricCosts(self.fabric_latency, self.fabric_bandwidth, self.codec_rate, self.codec_rate)

    @property
    def stem(self) -> str:
        return f"{self.plant.value}_{self.method.value.replace('+', '_')}"


def _convert(key: str, default: object, raw: str) -> object:
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true or false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, enum.Enum):
        return type(default)(raw)
    if isinstance(default, tuple):
        item = _LIST_ITEMS[key]
        return tuple(item(part.strip()) for part in raw.split(",") if part.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclasses.dataclass
class PlantSetup:
    """A discrete plant ready for the loop, with its warm-up controller"""

    model: LtiModel
    x0: np.ndarray
    warmup: WarmupController
    observes_state: bool
    primary_output: int = 0
    kinematics: VehicleKinematics | None = None
    feedforward: float = 0.0

    def measurement(self, x: np.ndarray) -> np.ndarray:
        return self.model.output(x)

    def observation(self, x: np.ndarray) -> np.ndarray:
        return x if self.observes_state else self.model.output(x)

    def advance(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.kinematics is not None:
            self.kinematics.step(float(u[0]) + self.feedforward, self.model.dt)
        return self.model.step(x, u)


def build_plant(cfg: ExperimentConfig, rng: np.random.Generator) -> PlantSetup:
    period = cfg.period
    if cfg.plant == PlantKind.BALL_BEAM:
        servo = BallBeamServo(command_gain=cfg.servo_command_gain)
        model = discretize_zoh(servo_model(BallBeamParams(), servo), period)
        x0 = np.array([cfg.initial_offset, 0.0, 0.0, 0.0])
        # PID gains act on the gear angle
        g = servo.command_gain
        gains = {"kp": cfg.pid_kp / g, "ki": cfg.pid_ki / g, "kd": cfg.pid_kd / g}
        # ball position falls as the gear angle rises
        warmup = pid_warmup(gains, period, cfg.warmup_reference, direction=-1.0, dither=cfg.dither, rng=rng)
        return PlantSetup(model, x0, warmup, observes_state=False)

    if cfg.plant == PlantKind.VEHICLE:
        params = VehicleParams.from_kmh(cfg.speed_kmh, wheelbase=cfg.wheelbase, curvature=cfg.curvature)
        # steering deviation around the feedforward; the feedforward column cancels out of the error model
        model = discretize_zoh(vehicle_error_model(params).select_inputs([0]), period)
        x0 = np.array([0.0, cfg.initial_offset])
        warmup = lqr_warmup(model, cfg.lqr_q * np.eye(2), cfg.lqr_r * np.eye(1), dither=cfg.dither, rng=rng)
        kinematics = VehicleKinematics(params, lateral_offset=cfg.initial_offset)
        return PlantSetup(model, x0, warmup, True, primary_output=1, kinematics=kinematics, feedforward=params.feedforward)

    if cfg.plant == PlantKind.POWER:
        net: PowerNetParams = power_network_params(n_generators=cfg.generators)
        model = discretize_zoh(power_network_model(net), period)
        n = len(net.buses)
        x_ref = np.concatenate([np.full(n, cfg.warmup_reference), np.zeros(n)])
        q = cfg.lqr_q * np.eye(model.state_dim)
        warmup = lqr_warmup(model, q, cfg.lqr_r * np.eye(model.input_dim), x_ref=x_ref, dither=cfg.dither, rng=rng)
        return PlantSetup(model, np.zeros(model.state_dim), warmup, observes_state=True)

    model = random_lti(cfg.random_dim, rng, dt=period)
    warmup = lqr_warmup(
        model, cfg.lqr_q * np.eye(cfg.random_dim), cfg.lqr_r * np.eye(cfg.random_dim), dither=cfg.dither, rng=rng
    )
    return PlantSetup(model, np.full(cfg.random_dim, cfg.initial_offset), warmup, observes_state=True)


class DataWindow:
    """Harness-side copy of the cloud's sliding window"""

    def __init__(self, n_horizon: int, j_cols: int):
        self.n_horizon = n_horizon
        self.j_cols = j_cols
        self.hankel: HankelSet | None = None
        self._pending: list[tuple[np.ndarray, np.ndarray]] = []

    def push(self, u_prev: np.ndarray, y_now: np.ndarray):
        if self.hankel is not None:
            self.hankel = hankel_slide(self.hankel, u_prev, y_now)
            return
        self._pending.append((np.array(u_prev, dtype=float), np.array(y_now, dtype=float)))
        if len(self._pending) == window_length(self.n_horizon, self.j_cols):
            us, ys = zip(*self._pending, strict=True)
            self.hankel = hankel_build(np.array(us), np.array(ys), self.n_horizon, self.j_cols)
            self._pending.clear()


@dataclasses.dataclass(frozen=True)
class CloudResult:
    """One cloud computation on the modeled clock"""

    u_f: np.ndarray
    a_hat_row: np.ndarray
    b_hat_row: np.ndarray
    input_dim: int
    retained_rank: int
    degenerate: bool
    compute_s: float
    uplink: EdgeCost
    downlink: EdgeCost
    nbytes: int
    measured_s: float

    @property
    def comm_s(self) -> float:
        return self.uplink.total_s + self.downlink.total_s

    @property
    def total_s(self) -> float:
        return self.compute_s + self.comm_s

    def packet(self, sent_at: float, delay: float) -> CloudPacket:
        return CloudPacket(
            u_f=self.u_f,
            a_hat_row=self.a_hat_row,
            b_hat_row=self.b_hat_row,
            input_dim=self.input_dim,
            retained_rank=self.retained_rank,
            degenerate=self.degenerate,
            sent_at=sent_at,
            received_at=sent_at + delay,
        )


def _uplink_frame(u_prev: np.ndarray, y_now: np.ndarray, policy: TruncationPolicy, r_f: np.ndarray) -> Frame:
    return Frame(FrameKind.ROUND, 0, 0, (np.atleast_1d(u_prev), np.atleast_1d(y_now), policy.to_vector(), r_f))


def _downlink_frame(u_f: np.ndarray, a_hat_row: np.ndarray, b_hat_row: np.ndarray) -> Frame:
    return Frame(FrameKind.PACKET, 0, 0, (u_f, a_hat_row, b_hat_row, np.zeros(3)))


class NativeCloud:
    """Dense single-process controller on one cloud server"""

    def __init__(self, cfg: ExperimentConfig, warmup: WarmupController):
        self.cfg = cfg
        self.warmup_controller = warmup
        self.link = cfg.link_costs()

    def __enter__(self) -> NativeCloud:
        return self

    def __exit__(self, *exc):
        pass

    def warmup(self, u_prev: np.ndarray, y_now: np.ndarray, observation: np.ndarray) -> np.ndarray:
        return self.warmup_controller.compute(observation)

    def switch(self):
        pass

    def stream(self, u_prev: np.ndarray, y_now: np.ndarray):
        pass

    def compute(
        self, u_prev: np.ndarray, y_now: np.ndarray, window: HankelSet, r_f: np.ndarray, policy: TruncationPolicy
    ) -> CloudResult:
        started = time.perf_counter()
        params = compute_cloud_params(window, policy)
        u_f = control_sequence(params, window.w_p_now(), r_f, self.cfg.lam)  # may raise
        measured = time.perf_counter() - started
        flops = svd_flops(*window.v_p.shape) + coefficient_flops(window, params.retained_rank) + control_flops(window)
        up = _uplink_frame(u_prev, y_now, policy, r_f)
        down = _downlink_frame(u_f, params.a_hat_row, params.b_hat_row)
        return CloudResult(
            u_f=u_f,
            a_hat_row=params.a_hat_row,
            b_hat_row=params.b_hat_row,
            input_dim=params.input_dim,
            retained_rank=params.retained_rank,
            degenerate=params.degenerate,
            compute_s=flops / self.cfg.cloud_flops_per_second,
            uplink=self.link.edge_cost(up.nbytes),
            downlink=self.link.edge_cost(down.nbytes),
            nbytes=up.nbytes + down.nbytes,
            measured_s=measured,
        )


class WorkflowCloud:
    """The workflow engine behind the same interface as NativeCloud"""

    def __init__(self, cfg: ExperimentConfig, warmup: WarmupController):
        self.cfg = cfg
        self.link = cfg.link_costs()
        fold = None if cfg.fold_into_export < 0 else cfg.fold_into_export
        dag = build_dpc_dag(cfg.mpt, fold, cfg.j_cols)
        self.engine = WorkflowEngine(
            dag,
            WorkflowSettings(cfg.n_horizon, cfg.j_cols, cfg.lam),
            costs=cfg.fabric_costs(),
            warmup_controller=warmup.compute,
        )

    def __enter__(self) -> WorkflowCloud:
        self.engine.start()
        return self

    def __exit__(self, *exc):
        self.engine.close()

    def warmup(self, u_prev: np.ndarray, y_now: np.ndarray, observation: np.ndarray) -> np.ndarray:
        u = self.engine.warmup_round(u_prev, y_now, observation)
        assert u is not None
        return u

    def switch(self):
        switch_topology(self.engine, WorkflowMode.DPC)  # may raise

    def stream(self, u_prev: np.ndarray, y_now: np.ndarray):
        self.engine.stream_sample(u_prev, y_now)

    def compute(
        self, u_prev: np.ndarray, y_now: np.ndarray, window: HankelSet, r_f: np.ndarray, policy: TruncationPolicy
    ) -> CloudResult:
        started = time.perf_counter()
        packet, metrics = self.engine.execute_round(u_prev, y_now, r_f, policy)  # may raise
        measured = time.perf_counter() - started
        up = _uplink_frame(u_prev, y_now, policy, r_f)
        return CloudResult(
            u_f=packet.u_f,
            a_hat_row=packet.a_hat_row,
            b_hat_row=packet.b_hat_row,
            input_dim=packet.input_dim,
            retained_rank=packet.retained_rank,
            degenerate=packet.degenerate,
            compute_s=metrics.critical_path_s(self.engine.dag, self.cfg.cloud_flops_per_second),
            uplink=self.link.edge_cost(up.nbytes),
            downlink=self.link.edge_cost(metrics.packet_bytes),
            nbytes=up.nbytes + metrics.packet_bytes + sum(edge.nbytes for edge in metrics.edges),
            measured_s=measured,
        )


def _bounds(cfg: ExperimentConfig, window: HankelSet, result: CloudResult, r_f: np.ndarray) -> ErrorBudget:
    """Bounds for keeping result.retained_rank singular values of the dense factorization"""
    full = svd_dense(window.v_p)
    hat = cloud_params_from_factors(window, do_truncate(full, TruncationPolicy.fixed(max(result.retained_rank, 1))))
    return error_budget(
        window, full, result.retained_rank, hat, result.u_f, r_f, window.w_p_now(), cfg.lam
    )


def trace_columns(input_dim: int, output_dim: int) -> list[str]:
    def series(prefix: str, n: int) -> list[str]:
        return [f"{prefix}_{i}" for i in range(n)]

    return [
        "k",
        "time",
        "started",
        "fresh",
        *series("y", output_dim),
        *series("r", output_dim),
        *series("u", input_dim),
        *series("u_cloud", input_dim),
        *series("d_hat", input_dim),
        "compute_s",
        "comm_s",
        "total_delay_s",
        "bytes",
        "rank",
        "eps2",
        "eps3",
        "eps4",
        "t_compute",
        "t_apply",
        "t_update",
    ]


@dataclasses.dataclass(frozen=True)
class RunSummary:
    steps: int
    diverged: bool
    rmse: float
    overshoot: float
    steady_state_error: float
    rounds: int
    mean_compute_s: float
    max_compute_s: float
    mean_comm_s: float
    max_comm_s: float
    mean_total_delay_s: float
    max_total_delay_s: float
    mean_measured_compute_s: float
    held_ticks: int
    mean_bytes: float
    max_eps2: float
    max_eps3: float
    max_eps4: float

    def to_row(self) -> dict[str, float | int | bool]:
        return dataclasses.asdict(self)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def _max(values) -> float:
    values = [value for value in values if not math.isnan(value)]
    return float(np.max(values)) if values else math.nan


@dataclasses.dataclass
class RunRecord:
    config: ExperimentConfig
    columns: list[str]
    rows: list[dict[str, float]] = dataclasses.field(default_factory=list)
    diverged: bool = False
    primary_output: int = 0
    measured_compute_s: list[float] = dataclasses.field(default_factory=list)
    path: list[tuple[float, float]] = dataclasses.field(default_factory=list)
    reference_path: tuple[np.ndarray, np.ndarray] | None = None

    def trace(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def summary(self) -> RunSummary:
        rows = self.rows
        p = self.primary_output
        outputs = [key for key in self.columns if key.startswith("y_")]
        errors = np.array([[row[y] - row["r" + y[1:]] for y in outputs] for row in rows]) if rows else np.zeros((0, 1))
        rmse = float(np.sqrt(np.mean(errors**2))) if rows else math.nan

        overshoot = math.nan
        steady = math.nan
        if rows:
            y = np.array([row[f"y_{p}"] for row in rows])
            r = rows[-1][f"r_{p}"]
            span = r - y[0]
            overshoot = float(max(0.0, np.max(np.sign(span) * (y - r))) / abs(span)) if span else 0.0
            tail = max(1, len(rows) // 10)
            steady = float(np.mean(np.abs(y[-tail:] - r)))

        started = [row for row in rows if row["started"]]
        return RunSummary(
            steps=len(rows),
            diverged=self.diverged,
            rmse=rmse,
            overshoot=overshoot,
            steady_state_error=steady,
            rounds=len(started),
            mean_compute_s=_mean(row["compute_s"] for row in started),
            max_compute_s=_max(row["compute_s"] for row in started),
            mean_comm_s=_mean(row["comm_s"] for row in started),
            max_comm_s=_max(row["comm_s"] for row in started),
            mean_total_delay_s=_mean(row["total_delay_s"] for row in started),
            max_total_delay_s=_max(row["total_delay_s"] for row in started),
            mean_measured_compute_s=_mean(self.measured_compute_s),
            held_ticks=sum(1 for row in rows if not row["fresh"]),
            mean_bytes=_mean(row["bytes"] for row in started),
            max_eps2=_max(row["eps2"] for row in started),
            max_eps3=_max(row["eps3"] for row in started),
            max_eps4=_max(row["eps4"] for row in started),
        )

    def plot_data(self) -> pd.DataFrame:
        trace = self.trace()
        p = self.primary_output
        return pd.DataFrame(
            {"time": trace["time"], "output": trace[f"y_{p}"], "reference": trace[f"r_{p}"], "input": trace["u_0"]}
        )

    def path_data(self) -> pd.DataFrame | None:
        if not self.path or self.reference_path is None:
            return None
        xs, ys = zip(*self.path, strict=True)
        ref_x, ref_y = self.reference_path
        frame = pd.DataFrame({"x": xs, "y": ys})
        return frame.join(pd.DataFrame({"ref_x": ref_x, "ref_y": ref_y}), how="outer")


@dataclasses.dataclass
class _InFlight:
    result: CloudResult
    tick: int
    sent_at: float
    apply_tick: int
    bounds: ErrorBudget | None


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    """Warm-up, then the cloud-edge loop for cfg.duration ticks"""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    plant = build_plant(cfg, rng)
    input_dim, output_dim = plant.model.input_dim, plant.model.output_dim
    policy = cfg.truncation_policy()
    period = cfg.period
    r_now = np.full(output_dim, cfg.reference)
    r_f = np.tile(r_now, cfg.n_horizon)

    gain, selection = cfg.observer()
    edge = EdgeController(
        cfg.n_horizon,
        input_dim,
        output_dim,
        period,
        gain_l=gain if cfg.method.uses_dob else None,
        selection=selection,
        delay_compensation=cfg.method.uses_delay_compensation,
    )
    window = DataWindow(cfg.n_horizon, cfg.j_cols)
    record = RunRecord(cfg, trace_columns(input_dim, output_dim), primary_output=plant.primary_output)
    cloud = WorkflowCloud(cfg, plant.warmup) if cfg.method.uses_workflow else NativeCloud(cfg, plant.warmup)

    x = plant.x0.astype(float).copy()
    u_prev = np.zeros(input_dim)
    warmup_ticks = window_length(cfg.n_horizon, cfg.j_cols)
    logger.info(f"Running {cfg.method.value} on {cfg.plant.value}: {warmup_ticks} warm-up ticks, {cfg.duration} control ticks")

    with cloud:
        for _ in range(warmup_ticks):
            y = plant.measurement(x)
            window.push(u_prev, y)
            edge.record(u_prev, y)
            u = np.atleast_1d(cloud.warmup(u_prev, y, plant.observation(x)))
            x = plant.advance(x, u)
            if kin := plant.kinematics:
                record.path.append((kin.x, kin.y))
            u_prev = u
        cloud.switch()
        edge.hold(u_prev)

        in_flight: _InFlight | None = None
        in_effect: _InFlight | None = None
        next_start = 0
        now = warmup_ticks * period
        for i in range(cfg.duration):
            y = plant.measurement(x)
            if not np.all(np.isfinite(y)) or np.linalg.norm(y) > cfg.divergence_guard:
                logger.warning(f"Output norm passed {cfg.divergence_guard:g} at control tick {i}, stopping the run")
                record.diverged = True
                break
            window.push(u_prev, y)
            hankel = window.hankel
            assert hankel is not None

            delivered = None
            if in_flight is not None and in_flight.apply_tick == i:
                delivered, in_flight = in_flight, None
            started = None
            if in_flight is None and i >= next_start:
                result = cloud.compute(u_prev, y, hankel, r_f, policy)
                record.measured_compute_s.append(result.measured_s)
                delay = result.total_s if cfg.real_time else 0.0
                apply_tick = i + math.floor(delay / period)
                bounds = _bounds(cfg, hankel, result, r_f) if cfg.compute_bounds else None
                started = _InFlight(result, i, now, apply_tick, bounds)
                next_start = max(apply_tick, i + 1)
                if apply_tick == i:
                    delivered = started
                else:
                    in_flight = started
            else:
                cloud.stream(u_prev, y)

            packet = None
            if delivered is not None:
                in_effect = delivered
                delay = delivered.result.total_s if cfg.real_time else 0.0
                packet = delivered.result.packet(delivered.sent_at, delay)
            step = edge.step(u_prev, y, packet)

            if delivered is not None:
                t_apply = delivered.sent_at + delivered.result.total_s
            else:
                t_apply = now
            t_update = now + period if cfg.real_time else max(now, t_apply) + period
            row: dict[str, float] = {
                "k": step.k,
                "time": now,
                "started": int(started is not None),
                "fresh": int(delivered is not None),
                "compute_s": started.result.compute_s if started else math.nan,
                "comm_s": started.result.comm_s if started else math.nan,
                "total_delay_s": started.result.total_s if started else math.nan,
                "bytes": started.result.nbytes if started else 0,
                "rank": started.result.retained_rank if started else 0,
                "eps2": started.bounds.eps2 if started and started.bounds else math.nan,
                "eps3": started.bounds.eps3 if started and started.bounds else math.nan,
                "eps4": started.bounds.eps4 if started and started.bounds else math.nan,
                "t_compute": (
                    in_effect.sent_at + in_effect.result.uplink.total_s + in_effect.result.compute_s
                    if in_effect
                    else math.nan
                ),
                "t_apply": t_apply,
                "t_update": t_update,
            }
            for prefix, values in (
                ("y", y),
                ("r", r_now),
                ("u", step.u_applied),
                ("u_cloud", step.u_cloud),
                ("d_hat", step.d_hat),
            ):
                for index, value in enumerate(np.atleast_1d(values)):
                    row[f"{prefix}_{index}"] = float(value)
            record.rows.append(row)

            x = plant.advance(x, step.u_applied)
            if kin := plant.kinematics:
                record.path.append((kin.x, kin.y))
            u_prev = np.asarray(step.u_applied, dtype=float)
            now = t_update

    if plant.kinematics is not None:
        record.reference_path = plant.kinematics.reference_circle()
    summary = record.summary()
    logger.info(
        f"Finished {cfg.stem}: {summary.steps} ticks, rmse {summary.rmse:.4g}, "
        f"{summary.held_ticks} held, diverged={summary.diverged}"
    )
    return record


def emit_reports(rec: RunRecord, directory: str | Path | None = None) -> list[Path]:
    """Trace, summary and plot-data CSVs (plus the vehicle path) under directory"""
    out = Path(directory if directory is not None else rec.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = rec.config.stem
    written = []

    def write(frame: pd.DataFrame, name: str):
        path = out / f"{stem}_{name}.csv"
        frame.to_csv(path, index=False, float_format="%.10g")
        written.append(path)

    write(rec.trace(), "trace")
    write(pd.DataFrame([rec.summary().to_row()]), "summary")
    write(rec.plot_data(), "plot")
    if (path := rec.path_data()) is not None:
        write(path, "path")
    logger.info(f"Wrote {len(written)} reports to {out}")
    return written


@dataclasses.dataclass(frozen=True)
class StageTiming:
    dim: int
    cycles: int
    seconds: dict[str, float]

    @property
    def total_s(self) -> float:
        return sum(self.seconds.values())

    def fraction(self, stage: str) -> float:
        return self.seconds[stage] / self.total_s if self.total_s > 0 else 0.0


def _profile_window(dim: int, n_horizon: int, j_cols: int, rng: np.random.Generator) -> HankelSet:
    model = random_lti(dim, rng)
    samples = window_length(n_horizon, j_cols)
    inputs = rng.uniform(-1.0, 1.0, size=(samples, dim))
    outputs = np.empty((samples, dim))
    x = np.zeros(dim)
    for t in range(samples):
        x = model.step(x, inputs[t])
        outputs[t] = model.output(x)
    return hankel_build(inputs, outputs, n_horizon, j_cols)


def profile_stages(
    dims: list[int],
    n_horizon: int = 10,
    j_cols: int = 1000,
    cycles: int = 10,
    seed: int = 0,
    lam: float = 0.01,
    max_matrix_bytes: float = 2e9,
) -> list[StageTiming]:
    """Mean seconds per cycle of each controller stage on random fixtures"""
    if cycles <= 0:
        return []
    for dim in dims:
        # y_f v_p^+ is (dim N) x (3 dim N)
        needed = 8 * 3 * (dim * n_horizon) ** 2
        if needed > max_matrix_bytes:
            raise ConfigError(
                f"dim={dim}, N={n_horizon} needs a {needed / 1e9:.3g} GB coefficient matrix, "
                f"limit {max_matrix_bytes / 1e9:.3g} GB"
            )
    rng = np.random.default_rng(seed)
    report = []
    for dim in dims:
        h = _profile_window(dim, n_horizon, j_cols, rng)
        v_p = h.v_p
        r_f = np.full(h.output_dim * n_horizon, 0.1)
        totals = dict.fromkeys(STAGES, 0.0)
        for _ in range(cycles):
            mark = time.perf_counter()
            factors: SvdFactors = svd_dense(v_p)
            totals["svd"] += time.perf_counter() - mark
            mark = time.perf_counter()
            pinv = pseudo_inverse_from_factors(factors)
            totals["pinv"] += time.perf_counter() - mark
            mark = time.perf_counter()
            params: CloudParams = coefficient_matrices(h, pinv, factors.rank)
            totals["coefficients"] += time.perf_counter() - mark
            mark = time.perf_counter()
            control_sequence(params, h.w_p_now(), r_f, lam)
            totals["control"] += time.perf_counter() - mark
        timing = StageTiming(dim, cycles, {stage: totals[stage] / cycles for stage in STAGES})
        logger.debug(f"dim {dim}: {timing.total_s:.4g}s per cycle, svd {timing.fraction('svd'):.1%}")
        report.append(timing)
    return report


def stage_report(timings: list[StageTiming]) -> pd.DataFrame:
    columns = ["dim", *(f"{stage}_s" for stage in STAGES), "total_s", *(f"{stage}_fraction" for stage in STAGES)]
    rows = [
        {
            "dim": timing.dim,
            **{f"{stage}_s": timing.seconds[stage] for stage in STAGES},
            "total_s": timing.total_s,
            **{f"{stage}_fraction": timing.fraction(stage) for stage in STAGES},
        }
        for timing in timings
    ]
    return pd.DataFrame(rows, columns=columns)


SWEEP_COLUMNS = [
    "keep",
    "method",
    "compute_s",
    "reduction",
    "bytes",
    "rmse",
    "rmse_dob",
    "eps2",
    "eps3",
    "eps4",
]


def sweep_truncation(cfg: ExperimentConfig, keep_counts: list[int]) -> pd.DataFrame:
    """Dense baseline, then the workflow with and without the observer at each retained count"""
    baseline = run_experiment(cfg.with_overrides(method=Method.NATIVE, truncation=TruncationMode.RANK_ONLY)).summary()
    rows = [
        {
            "keep": 0,
            "method": Method.NATIVE.value,
            "compute_s": baseline.mean_compute_s,
            "reduction": 0.0,
            "bytes": baseline.mean_bytes,
            "rmse": baseline.rmse,
            "rmse_dob": math.nan,
            "eps2": math.nan,
            "eps3": math.nan,
            "eps4": math.nan,
        }
    ]
    for keep in keep_counts:
        fixed = cfg.with_overrides(truncation=TruncationMode.FIXED_COUNT, keep_count=keep)
        plain = run_experiment(fixed.with_overrides(method=Method.WORKFLOW, compute_bounds=True)).summary()
        with_dob = run_experiment(fixed.with_overrides(method=Method.WORKFLOW_DOB)).summary()
        rows.append(
            {
                "keep": keep,
                "method": Method.WORKFLOW.value,
                "compute_s": plain.mean_compute_s,
                "reduction": 1.0 - plain.mean_compute_s / baseline.mean_compute_s,
                "bytes": plain.mean_bytes,
                "rmse": plain.rmse,
                "rmse_dob": with_dob.rmse,
                "eps2": plain.max_eps2,
                "eps3": plain.max_eps3,
                "eps4": plain.max_eps4,
            }
        )
        logger.info(f"keep={keep}: compute {plain.mean_compute_s * 1e3:.3f} ms, rmse {plain.rmse:.4g} / {with_dob.rmse:.4g}")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
