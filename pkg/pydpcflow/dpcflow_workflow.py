#!/usr/bin/env python3
"""
DPC Flow Workflow Engine

This module builds the task graph of the partitioned controller computation
(router, column-block SVD leaves, pairwise merges and the export task that
folds the last merges in), publishes it through the key-value registry,
starts one worker thread per task behind a two-stage readiness barrier and
drives warm-up and control rounds through the worker channels.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator
import dataclasses
import enum
import logging
import math
import queue
import threading
import time

import networkx as nx
import numpy as np

from .dpcflow_edge import CloudPacket
from .dpcflow_fabric import (
    Channel,
    ChannelHub,
    EdgeCost,
    FabricCosts,
    Frame,
    FrameError,
    FrameKind,
    KeyValueRegistry,
)
from .dpcflow_linalg import (
    SvdFactors,
    TruncationPolicy,
    block_merge,
    do_truncate,
    merge_flops,
    svd_dense,
    svd_flops,
)
from .dpcflow_predictor import (
    HankelSet,
    NeedsMoreDataError,
    cloud_params_from_factors,
    coefficient_flops,
    control_flops,
    control_sequence,
    hankel_build,
    hankel_slide,
    window_length,
)

logger = logging.getLogger(__name__)

DAG_KEY = "dag"
ENV_KEY = "env"
EDGE_ID = 0
EDGE_NAME = "edge"
# streamed pairs the router holds before forwarding them in one frame
SAMPLE_BATCH = 64


class ConfigError(ValueError):
    """A configuration value is missing or out of range"""


class WorkflowInitError(RuntimeError):
    def __init__(self, task_id: int | None, message: str):
        super().__init__(f"task {task_id}: {message}" if task_id is not None else message)
        self.task_id = task_id


class BarrierTimeoutError(RuntimeError):
    def __init__(self, missing: list[str], timeout: float):
        super().__init__(f"{len(missing)} worker(s) not ready after {timeout}s: {', '.join(missing)}")
        self.missing = missing


class WorkflowRoundError(RuntimeError):
    def __init__(self, task_id: int | None, message: str):
        super().__init__(f"task {task_id}: {message}" if task_id is not None else message)
        self.task_id = task_id


class ImageKind(enum.Enum):
    ROUTER = "A"
    BLOCK_SVD = "B"
    MERGE = "C"
    EXPORT = "D"


class WorkflowMode(enum.Enum):
    WARM_UP = "warm-up"
    DPC = "dpc"


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    task_id: int
    image_kind: ImageKind
    level: int
    parents: tuple[int, ...]
    children: tuple[int, ...] = ()
    column_range: tuple[int, int] | None = None

    @property
    def name(self) -> str:
        return f"task-{self.task_id}"


@dataclasses.dataclass(frozen=True)
class FoldedMerge:
    """A merge executed serially inside the export task"""

    node_id: int
    left: int
    right: int


@dataclasses.dataclass(frozen=True)
class WorkflowDag:
    tasks: tuple[TaskSpec, ...]
    mpt: int
    fold: int
    folded_steps: tuple[FoldedMerge, ...] = ()

    @property
    def router_id(self) -> int:
        return 1

    @property
    def export_id(self) -> int:
        return self.tasks[-1].task_id

    @property
    def depth(self) -> int:
        return max(task.level for task in self.tasks)

    def task(self, task_id: int) -> TaskSpec:
        for spec in self.tasks:
            if spec.task_id == task_id:
                return spec
        raise KeyError(f"No task {task_id} in the DAG")

    def by_kind(self, kind: ImageKind) -> list[TaskSpec]:
        return [spec for spec in self.tasks if spec.image_kind == kind]

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        for spec in self.tasks:
            g.add_node(spec.task_id, kind=spec.image_kind.value, level=spec.level)
        for spec in self.tasks:
            for parent in spec.parents:
                g.add_edge(parent, spec.task_id)
        return g

    def edges(self) -> list[tuple[int, int]]:
        return [(parent, spec.task_id) for spec in self.tasks for parent in spec.parents]


def default_fold(mpt: int) -> int:
    """Fold two merges into export for deep trees, all of them for shallow ones"""
    if mpt < 1:
        raise ConfigError(f"mpt must be >= 1, got {mpt}")
    if mpt > 1 and math.ceil(math.log2(mpt)) > 2:
        return 2
    return mpt - 1


def partition_columns(n_cols: int, mpt: int) -> list[tuple[int, int]]:
    """Even split of n_cols into mpt contiguous ranges, the first n_cols % mpt one wider"""
    if n_cols < mpt:
        raise ConfigError(f"Cannot split {n_cols} columns over {mpt} leaves")
    bounds = np.cumsum([0] + [len(part) for part in np.array_split(np.arange(n_cols), mpt)])
    return [(int(start), int(stop)) for start, stop in zip(bounds[:-1], bounds[1:], strict=True)]


def build_dpc_dag(mpt: int, fold_into_export: int | None = None, n_cols: int | None = None) -> WorkflowDag:
    """Router 1, leaves 2..mpt+1, standalone merges in creation order, then export"""
    fold = default_fold(mpt) if fold_into_export is None else fold_into_export
    n_merges = mpt - 1
    if not 0 <= fold <= n_merges:
        raise ConfigError(f"fold_into_export must be in 0..{n_merges} for mpt={mpt}, got {fold}")

    router = 1
    leaves = list(range(2, mpt + 2))
    steps: list[tuple[int, int, int]] = []
    pending = list(leaves)
    next_id = mpt + 2
    while len(pending) > 1:
        carried = []
        for i in range(0, len(pending) - 1, 2):
            steps.append((next_id, pending[i], pending[i + 1]))
            carried.append(next_id)
            next_id += 1
        if len(pending) % 2:
            carried.append(pending[-1])
        pending = carried

    standalone = steps[: n_merges - fold]
    folded = steps[n_merges - fold :]
    export_id = mpt + 2 + len(standalone)
    virtual = {old: export_id + 1 + i for i, (old, _, _) in enumerate(folded)}
    folded_steps = tuple(
        FoldedMerge(virtual[node], virtual.get(left, left), virtual.get(right, right)) for node, left, right in folded
    )
    if folded:
        feeders = sorted({src for _, left, right in folded for src in (left, right) if src not in virtual})
    else:
        feeders = [pending[0]]

    parents: dict[int, tuple[int, ...]] = {router: ()}
    kinds = {router: ImageKind.ROUTER}
    for leaf in leaves:
        parents[leaf] = (router,)
        kinds[leaf] = ImageKind.BLOCK_SVD
    for node, left, right in standalone:
        parents[node] = (left, right)
        kinds[node] = ImageKind.MERGE
    parents[export_id] = (router, *feeders)
    kinds[export_id] = ImageKind.EXPORT

    levels: dict[int, int] = {}
    for task_id in sorted(parents):
        levels[task_id] = 1 + max((levels[p] for p in parents[task_id]), default=0)
    children: dict[int, list[int]] = {task_id: [] for task_id in parents}
    for task_id, task_parents in parents.items():
        for parent in task_parents:
            children[parent].append(task_id)

    ranges = dict(zip(leaves, partition_columns(n_cols, mpt), strict=True)) if n_cols is not None else {}
    tasks = tuple(
        TaskSpec(
            task_id=task_id,
            image_kind=kinds[task_id],
            level=levels[task_id],
            parents=parents[task_id],
            children=tuple(sorted(children[task_id])),
            column_range=ranges.get(task_id),
        )
        for task_id in sorted(parents)
    )
    dag = WorkflowDag(tasks=tasks, mpt=mpt, fold=fold, folded_steps=folded_steps)
    if not nx.is_directed_acyclic_graph(dag.graph()):
        raise ConfigError("Task graph has a cycle")
    logger.debug(f"Built DAG mpt={mpt} fold={fold}: {len(tasks)} tasks, depth {dag.depth}")
    return dag


def export_topology(dag: WorkflowDag) -> str:
    n_cols = max((spec.column_range[1] for spec in dag.tasks if spec.column_range), default=None)
    header = f"# mpt={dag.mpt} fold={dag.fold}" + (f" cols={n_cols}" if n_cols is not None else "")
    lines = [header]
    for spec in dag.tasks:
        line = f"{spec.task_id} {spec.image_kind.value} {spec.level} parents={','.join(map(str, spec.parents))}"
        if spec.column_range is not None:
            line += f" cols={spec.column_range[0]}:{spec.column_range[1]}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def import_topology(text: str) -> WorkflowDag:
    """Rebuild a DAG from its topology text, rejecting any line that disagrees with the rebuild"""
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ConfigError("Topology text needs a '# mpt=<n> fold=<f>' header")
    try:
        header = dict(field.split("=", 1) for field in lines[0].lstrip("#").split())
        mpt = int(header["mpt"])
        fold = int(header["fold"])
        n_cols = int(header["cols"]) if "cols" in header else None
    except (KeyError, ValueError) as err:
        raise ConfigError(f"Malformed topology header {lines[0]!r}") from err

    dag = build_dpc_dag(mpt, fold, n_cols)
    expected = export_topology(dag).splitlines()[1:]
    if len(expected) != len(lines) - 1:
        raise ConfigError(f"Topology lists {len(lines) - 1} tasks, mpt={mpt} needs {len(expected)}")
    for want, got in zip(expected, lines[1:], strict=True):
        if " ".join(got.split()) != want:
            raise ConfigError(f"Topology line {got!r} does not match the rebuilt task {want!r}")
    return dag


@dataclasses.dataclass(frozen=True)
class WorkflowSettings:
    n_horizon: int
    j_cols: int
    lam: float

    def to_text(self) -> str:
        return f"n_horizon={self.n_horizon}\nj_cols={self.j_cols}\nlam={self.lam!r}\n"

    @classmethod
    def from_text(cls, text: str) -> WorkflowSettings:
        values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        try:
            return cls(int(values["n_horizon"]), int(values["j_cols"]), float(values["lam"]))
        except (KeyError, ValueError) as err:
            raise ConfigError(f"Incomplete workflow environment: {text!r}") from err


def deploy_dag(
    dag: WorkflowDag, registry: KeyValueRegistry, settings: WorkflowSettings, address_space: str = "overlay"
):
    """Publish the topology, the environment and one address per task"""
    registry.set(DAG_KEY, export_topology(dag).encode())
    registry.set(ENV_KEY, settings.to_text().encode())
    registry.set(f"name:{EDGE_NAME}", f"{address_space}/{EDGE_NAME}".encode())
    for spec in dag.tasks:
        registry.set(f"name:{spec.name}", f"{address_space}/{spec.task_id}".encode())
    logger.info(f"Deployed {len(dag.tasks)} tasks under {address_space!r}")


@dataclasses.dataclass(frozen=True)
class TaskMetrics:
    task_id: int
    compute_s: float
    flops: int
    retained_rank: int = 0


@dataclasses.dataclass(frozen=True)
class EdgeMetrics:
    src: int
    dst: int
    nbytes: int


@dataclasses.dataclass
class RoundMetrics:
    round_index: int
    tasks: dict[int, TaskMetrics] = dataclasses.field(default_factory=dict)
    edges: list[EdgeMetrics] = dataclasses.field(default_factory=list)
    costs: FabricCosts = dataclasses.field(default_factory=FabricCosts)
    packet_bytes: int = 0

    def edge_cost(self, edge: EdgeMetrics) -> EdgeCost:
        return self.costs.edge_cost(edge.nbytes)

    @property
    def total_non_compute_s(self) -> float:
        return sum(self.edge_cost(edge).total_s for edge in self.edges)

    @property
    def total_compute_s(self) -> float:
        return sum(task.compute_s for task in self.tasks.values())

    def bytes_between(self, src: int, dst: int) -> int:
        return sum(edge.nbytes for edge in self.edges if edge.src == src and edge.dst == dst)

    def critical_path_s(self, dag: WorkflowDag, flops_per_second: float) -> float:
        """Longest modeled path from router to export: edge costs plus flops / rate per task"""
        costs = {(edge.src, edge.dst): self.edge_cost(edge).total_s for edge in self.edges}
        finish: dict[int, float] = {}
        for task_id in nx.topological_sort(dag.graph()):
            spec = dag.task(task_id)
            start = max((finish[p] + costs.get((p, task_id), 0.0) for p in spec.parents), default=0.0)
            metrics = self.tasks.get(task_id)
            finish[task_id] = start + (metrics.flops / flops_per_second if metrics else 0.0)
        return finish[dag.export_id]

    def to_rows(self) -> list[dict[str, float | int]]:
        rows = []
        for task_id in sorted(self.tasks):
            outgoing = [edge for edge in self.edges if edge.src == task_id]
            costs = [self.edge_cost(edge) for edge in outgoing]
            rows.append(
                {
                    "round": self.round_index,
                    "task_id": task_id,
                    "compute_us": self.tasks[task_id].compute_s * 1e6,
                    "serialize_us": sum(c.serialize_s + c.deserialize_s for c in costs) * 1e6,
                    "transfer_us": sum(c.transfer_s + c.latency_s for c in costs) * 1e6,
                    "bytes": sum(edge.nbytes for edge in outgoing),
                }
            )
        return rows


class RoundCollector:
    """Per-round metrics written concurrently by the workers"""

    def __init__(self):
        self._lock = threading.Lock()
        self._rounds: dict[int, RoundMetrics] = {}

    def _round(self, round_index: int) -> RoundMetrics:
        return self._rounds.setdefault(round_index, RoundMetrics(round_index))

    def task(self, round_index: int, metrics: TaskMetrics):
        with self._lock:
            self._round(round_index).tasks[metrics.task_id] = metrics

    def edge(self, round_index: int, metrics: EdgeMetrics):
        with self._lock:
            self._round(round_index).edges.append(metrics)

    def pop(self, round_index: int) -> RoundMetrics:
        with self._lock:
            return self._rounds.pop(round_index, RoundMetrics(round_index))


RouterControl = Callable[[np.ndarray], np.ndarray]


def _factors_from(frame: Frame) -> tuple[SvdFactors, TruncationPolicy]:
    m_left, s, n_right, policy = frame.arrays
    return SvdFactors(m_left, s, n_right), TruncationPolicy.from_vector(policy)


class Worker:
    """One task of the DAG running on its own thread"""

    def __init__(
        self,
        spec: TaskSpec,
        address: str,
        settings: WorkflowSettings,
        registry: KeyValueRegistry,
        collector: RoundCollector,
        export_id: int,
        folded_steps: tuple[FoldedMerge, ...] = (),
    ):
        self.spec = spec
        self.address = address
        self.settings = settings
        self.registry = registry
        self.collector = collector
        self.export_id = export_id
        self.folded_steps = folded_steps
        self.inbound: dict[int, Channel] = {}
        self.outbound: dict[int, Channel] = {}
        self.warmup_controller: RouterControl | None = None
        self.ready_delay = 0.0
        self.window: HankelSet | None = None
        self._pending: list[tuple[np.ndarray, np.ndarray]] = []
        self._batch: list[tuple[np.ndarray, np.ndarray]] = []
        self._batch_round = 0
        self._last_round: dict[int, int] = {}
        self._thread: threading.Thread | None = None

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def kind(self) -> ImageKind:
        return self.spec.image_kind

    def launch(self, start: threading.Event, abort: threading.Event, errors: queue.Queue):
        self._thread = threading.Thread(target=self._lifecycle, args=(start, abort, errors), name=self.name, daemon=True)
        self._thread.start()

    def join(self, timeout: float):
        if self._thread is not None:
            self._thread.join(timeout)

    def _lifecycle(self, start: threading.Event, abort: threading.Event, errors: queue.Queue):
        if abort.wait(self.ready_delay):
            return
        self.registry.set(f"ready:{self.name}", b"1")
        start.wait()
        if abort.is_set():
            return
        self.registry.set(f"started:{self.name}", b"1")
        try:
            while self._step():
                pass
        except Exception as err:
            logger.warning(f"{self.name} failed: {err}")
            errors.put((self.spec.task_id, err))

    def _receive(self, parent: int) -> Frame:
        channel = self.inbound[parent]
        while True:
            frame = channel.recv()
            last = self._last_round.get(parent, -1)
            if frame.kind != FrameKind.STOP and frame.round_index <= last:
                logger.warning(f"{self.name} dropped stale {frame.kind.name} for round {frame.round_index} from {parent}")
                continue
            self._last_round[parent] = frame.round_index
            return frame

    def _send(self, child: int, frame: Frame):
        if frame.kind in (FrameKind.ROUND, FrameKind.FACTORS) and child != EDGE_ID:
            self.collector.edge(frame.round_index, EdgeMetrics(self.spec.task_id, child, frame.nbytes))
        self.outbound[child].send(frame)

    def _stop(self, round_index: int) -> bool:
        for channel in self.outbound.values():
            channel.send(Frame(FrameKind.STOP, self.spec.task_id, round_index))
        logger.debug(f"{self.name} stopped")
        return False

    def _absorb(self, u: np.ndarray, y: np.ndarray):
        """Slide in one pair, or a batch of them as rows of 2-D arrays"""
        for u_row, y_row in zip(np.atleast_2d(u), np.atleast_2d(y), strict=True):
            if self.window is not None:
                self.window = hankel_slide(self.window, u_row, y_row)
                continue
            self._pending.append((u_row, y_row))
            if len(self._pending) == window_length(self.settings.n_horizon, self.settings.j_cols):
                us, ys = zip(*self._pending, strict=True)
                self.window = hankel_build(np.array(us), np.array(ys), self.settings.n_horizon, self.settings.j_cols)
                self._pending.clear()

    def _require_window(self) -> HankelSet:
        if self.window is None:
            raise NeedsMoreDataError(window_length(self.settings.n_horizon, self.settings.j_cols), len(self._pending))
        return self.window

    def _step(self) -> bool:
        if self.kind == ImageKind.ROUTER:
            return self._route()
        if self.kind == ImageKind.BLOCK_SVD:
            return self._factor_block()
        if self.kind == ImageKind.MERGE:
            return self._merge()
        return self._export()

    def _route(self) -> bool:
        frame = self._receive(EDGE_ID)
        me = self.spec.task_id
        if frame.kind == FrameKind.SAMPLE:
            u, y = frame.arrays[:2]
            self._batch.append((u, y))
            self._batch_round = frame.round_index
            if self.warmup_controller is not None and len(frame.arrays) > 2:
                u_next = np.atleast_1d(np.asarray(self.warmup_controller(frame.arrays[2]), dtype=float))
                self._send(EDGE_ID, Frame(FrameKind.PACKET, me, frame.round_index, (u_next,)))
            if len(self._batch) >= SAMPLE_BATCH:
                self._flush_samples()
            return True

        self._flush_samples()
        if frame.kind == FrameKind.STOP:
            return self._stop(frame.round_index)
        u, y, policy, r_f = frame.arrays
        self.collector.task(frame.round_index, TaskMetrics(me, 0.0, 0))
        for child in self.spec.children:
            arrays = (u, y, policy, r_f) if child == self.export_id else (u, y, policy)
            self._send(child, Frame(FrameKind.ROUND, me, frame.round_index, arrays))
        return True

    def _flush_samples(self):
        if not self._batch:
            return
        us, ys = zip(*self._batch, strict=True)
        batch = (np.array(us, dtype=float), np.array(ys, dtype=float))
        for child in self.spec.children:
            self._send(child, Frame(FrameKind.SAMPLE, self.spec.task_id, self._batch_round, batch))
        self._batch.clear()

    def _factor_block(self) -> bool:
        frame = self._receive(self.spec.parents[0])
        if frame.kind == FrameKind.STOP:
            return self._stop(frame.round_index)
        u, y = frame.arrays[:2]
        self._absorb(u, y)
        if frame.kind == FrameKind.SAMPLE:
            return True

        window = self._require_window()
        start, stop = self.spec.column_range
        policy = TruncationPolicy.from_vector(frame.arrays[2])
        started = time.perf_counter()
        block = window.v_p_columns(start, stop)
        factors = do_truncate(svd_dense(block), policy)
        elapsed = time.perf_counter() - started
        self.collector.task(
            frame.round_index, TaskMetrics(self.spec.task_id, elapsed, svd_flops(*block.shape), factors.rank)
        )
        out = Frame(
            FrameKind.FACTORS,
            self.spec.task_id,
            frame.round_index,
            (factors.m_left, factors.s, factors.n_right, frame.arrays[2]),
        )
        for child in self.spec.children:
            self._send(child, out)
        return True

    def _merge(self) -> bool:
        frames = [self._receive(parent) for parent in self.spec.parents]
        if any(frame.kind == FrameKind.STOP for frame in frames):
            return self._stop(frames[0].round_index)
        round_index = _same_round(self.spec.task_id, frames)
        (left, policy), (right, _) = (_factors_from(frame) for frame in frames)
        started = time.perf_counter()
        merged = block_merge(left, right, policy)
        elapsed = time.perf_counter() - started
        flops = merge_flops(merged.rows, max(left.rank, right.rank))
        self.collector.task(round_index, TaskMetrics(self.spec.task_id, elapsed, flops, merged.rank))
        out = Frame(FrameKind.FACTORS, self.spec.task_id, round_index, (merged.m_left, merged.s, merged.n_right, policy.to_vector()))
        for child in self.spec.children:
            self._send(child, out)
        return True

    def _export(self) -> bool:
        router, *sources = self.spec.parents
        frame = self._receive(router)
        if frame.kind == FrameKind.STOP:
            for source in sources:
                self._receive(source)
            return self._stop(frame.round_index)
        u, y = frame.arrays[:2]
        self._absorb(u, y)
        if frame.kind == FrameKind.SAMPLE:
            return True

        window = self._require_window()
        policy = TruncationPolicy.from_vector(frame.arrays[2])
        r_f = frame.arrays[3]
        incoming = [self._receive(source) for source in sources]
        round_index = _same_round(self.spec.task_id, [frame, *incoming])
        blocks = {source: _factors_from(item)[0] for source, item in zip(sources, incoming, strict=True)}

        started = time.perf_counter()
        flops = 0
        for step in self.folded_steps:
            left, right = blocks[step.left], blocks[step.right]
            blocks[step.node_id] = block_merge(left, right, policy)
            flops += merge_flops(left.rows, max(left.rank, right.rank))
        final = blocks[self.folded_steps[-1].node_id] if self.folded_steps else blocks[sources[0]]
        final = do_truncate(final, policy)
        params = cloud_params_from_factors(window, final)
        u_f = control_sequence(params, window.w_p_now(), r_f, self.settings.lam)
        flops += coefficient_flops(window, final.rank) + control_flops(window)
        elapsed = time.perf_counter() - started
        self.collector.task(round_index, TaskMetrics(self.spec.task_id, elapsed, flops, final.rank))
        meta = np.array([float(params.retained_rank), float(params.degenerate), float(params.input_dim)])
        packet = Frame(FrameKind.PACKET, self.spec.task_id, round_index, (u_f, params.a_hat_row, params.b_hat_row, meta))
        self._send(EDGE_ID, packet)
        return True


def _same_round(task_id: int, frames: list[Frame]) -> int:
    rounds = {frame.round_index for frame in frames}
    if len(rounds) != 1:
        raise FrameError(f"task {task_id} got frames from rounds {sorted(rounds)} in one step")
    return rounds.pop()


@dataclasses.dataclass
class WorkerSet:
    dag: WorkflowDag
    workers: dict[int, Worker]
    registry: KeyValueRegistry
    hub: ChannelHub
    collector: RoundCollector
    ingress: Channel
    egress: Channel
    warmup_egress: Channel
    start: threading.Event = dataclasses.field(default_factory=threading.Event)
    abort: threading.Event = dataclasses.field(default_factory=threading.Event)
    errors: queue.Queue = dataclasses.field(default_factory=queue.Queue)

    def __iter__(self) -> Iterator[Worker]:
        return iter(self.workers[task_id] for task_id in sorted(self.workers))

    def __len__(self) -> int:
        return len(self.workers)


def initialize_workers(
    registry: KeyValueRegistry, hub: ChannelHub, retries: int = 3, interval: float = 0.01
) -> WorkerSet:
    """Per-task initialization from what the registry holds: topology, environment, addresses, channels"""
    topology = registry.get(DAG_KEY)
    if topology is None:
        raise WorkflowInitError(None, "No DAG map in the registry")
    environment = registry.get(ENV_KEY)
    if environment is None:
        raise WorkflowInitError(None, "No workflow environment in the registry")
    dag = import_topology(topology.decode())
    settings = WorkflowSettings.from_text(environment.decode())
    if dag.mpt > settings.j_cols:
        raise ConfigError(f"mpt={dag.mpt} exceeds the {settings.j_cols} data columns")

    def resolve(name: str, task_id: int | None) -> str:
        value = registry.wait_for(f"name:{name}", retries=retries, interval=interval)
        if value is None:
            raise WorkflowInitError(task_id, f"address of {name} unresolved after {retries} retries")
        return value.decode()

    addresses = {spec.task_id: resolve(spec.name, spec.task_id) for spec in dag.tasks}
    edge_address = resolve(EDGE_NAME, None)
    collector = RoundCollector()
    workers: dict[int, Worker] = {}
    for spec in dag.tasks:
        worker = Worker(
            spec,
            addresses[spec.task_id],
            settings,
            registry,
            collector,
            dag.export_id,
            dag.folded_steps if spec.image_kind == ImageKind.EXPORT else (),
        )
        for parent in spec.parents:
            worker.inbound[parent] = hub.open(addresses[parent], worker.address)
        for child in spec.children:
            worker.outbound[child] = hub.open(worker.address, addresses[child])
        workers[spec.task_id] = worker

    router, export = workers[dag.router_id], workers[dag.export_id]
    router.inbound[EDGE_ID] = hub.open(edge_address, router.address)
    router.outbound[EDGE_ID] = hub.open(router.address, edge_address)
    export.outbound[EDGE_ID] = hub.open(export.address, edge_address)
    logger.info(f"Initialized {len(workers)} workers with {len(hub.links())} channels")
    return WorkerSet(
        dag=dag,
        workers=workers,
        registry=registry,
        hub=hub,
        collector=collector,
        ingress=router.inbound[EDGE_ID],
        egress=export.outbound[EDGE_ID],
        warmup_egress=router.outbound[EDGE_ID],
    )


@dataclasses.dataclass(frozen=True)
class StartSignal:
    seq: int
    receivers: tuple[str, ...]


def pyramid_barrier(workers: WorkerSet, timeout: float = 10.0) -> StartSignal:
    """Every worker posts ready, then one START releases them all at once"""
    for worker in workers:
        worker.launch(workers.start, workers.abort, workers.errors)
    names = [worker.name for worker in workers]
    registry = workers.registry

    def all_posted(prefix: str):
        return lambda entries: all(f"{prefix}:{name}" in entries for name in names)

    if not registry.wait_until(all_posted("ready"), timeout):
        missing = [name for name in names if registry.get(f"ready:{name}") is None]
        workers.abort.set()
        workers.start.set()
        raise BarrierTimeoutError(missing, timeout)

    seq = workers.hub.log.record("registry", "*", FrameKind.START, 0, 0)
    workers.start.set()
    if not registry.wait_until(all_posted("started"), timeout):
        missing = [name for name in names if registry.get(f"started:{name}") is None]
        raise BarrierTimeoutError(missing, timeout)
    logger.info(f"START {seq} released {len(names)} workers")
    return StartSignal(seq, tuple(names))


class WorkflowEngine:
    """Owns one deployed DAG: registry, channels, workers and the round loop"""

    def __init__(
        self,
        dag: WorkflowDag,
        settings: WorkflowSettings,
        costs: FabricCosts | None = None,
        registry: KeyValueRegistry | None = None,
        address_space: str = "overlay",
        warmup_controller: RouterControl | None = None,
        round_timeout: float = 60.0,
    ):
        if dag.mpt > settings.j_cols:
            raise ConfigError(f"mpt={dag.mpt} exceeds the {settings.j_cols} data columns")
        if any(spec.column_range is None for spec in dag.by_kind(ImageKind.BLOCK_SVD)):
            dag = build_dpc_dag(dag.mpt, dag.fold, settings.j_cols)
        self.dag = dag
        self.settings = settings
        self.costs = costs if costs is not None else FabricCosts()
        self.registry = registry if registry is not None else KeyValueRegistry()
        self.address_space = address_space
        self.warmup_controller = warmup_controller
        self.round_timeout = round_timeout
        self.hub = ChannelHub(self.costs)
        self.workers: WorkerSet | None = None
        self.mode = WorkflowMode.WARM_UP
        self.samples_seen = 0
        self._round = 0

    @property
    def samples_needed(self) -> int:
        return window_length(self.settings.n_horizon, self.settings.j_cols)

    def start(self, barrier_timeout: float = 10.0, ready_delays: dict[int, float] | None = None) -> StartSignal:
        deploy_dag(self.dag, self.registry, self.settings, self.address_space)
        self.workers = initialize_workers(self.registry, self.hub)
        self.workers.workers[self.dag.router_id].warmup_controller = self.warmup_controller
        for task_id, delay in (ready_delays or {}).items():
            self.workers.workers[task_id].ready_delay = delay
        return pyramid_barrier(self.workers, barrier_timeout)

    def _running(self) -> WorkerSet:
        if self.workers is None:
            raise WorkflowRoundError(None, "Engine not started")
        return self.workers

    def _await(self, channel: Channel) -> Frame:
        workers = self._running()
        deadline = time.monotonic() + self.round_timeout
        while True:
            try:
                task_id, err = workers.errors.get_nowait()
            except queue.Empty:
                pass
            else:
                raise WorkflowRoundError(task_id, str(err)) from err
            try:
                return channel.recv(timeout=0.01)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise WorkflowRoundError(None, f"No reply within {self.round_timeout}s") from None

    def stream_sample(self, u_prev: np.ndarray, y_new: np.ndarray, observation: np.ndarray | None = None):
        """Slide one pair into every task's window without starting a control round"""
        workers = self._running()
        self._round += 1
        arrays = (np.atleast_1d(u_prev), np.atleast_1d(y_new))
        if observation is not None:
            arrays += (np.atleast_1d(observation),)
        workers.ingress.send(Frame(FrameKind.SAMPLE, EDGE_ID, self._round, arrays))
        self.samples_seen += 1

    def warmup_round(self, u_prev: np.ndarray, y_new: np.ndarray, observation: np.ndarray | None = None) -> np.ndarray | None:
        """Stream one pair to every task; the router alone computes the warm-up input"""
        self.stream_sample(u_prev, y_new, observation)
        if observation is None or self.warmup_controller is None:
            return None
        return self._await(self._running().warmup_egress).arrays[0]

    def execute_round(
        self,
        u_new: np.ndarray,
        y_new: np.ndarray,
        r_f: np.ndarray,
        policy: TruncationPolicy,
        costs: FabricCosts | None = None,
    ) -> tuple[CloudPacket, RoundMetrics]:
        if self.mode != WorkflowMode.DPC:
            raise WorkflowRoundError(None, "Engine is still in warm-up mode")
        workers = self._running()
        self._round += 1
        frame = Frame(
            FrameKind.ROUND,
            EDGE_ID,
            self._round,
            (np.atleast_1d(u_new), np.atleast_1d(y_new), policy.to_vector(), np.atleast_1d(r_f)),
        )
        workers.ingress.send(frame)
        self.samples_seen += 1
        reply = self._await(workers.egress)
        u_f, a_hat_row, b_hat_row, meta = reply.arrays
        packet = CloudPacket(
            u_f=u_f,
            a_hat_row=a_hat_row,
            b_hat_row=b_hat_row,
            input_dim=int(meta[2]),
            retained_rank=int(meta[0]),
            degenerate=bool(meta[1]),
        )
        metrics = workers.collector.pop(self._round)
        metrics.costs = costs if costs is not None else self.costs
        metrics.packet_bytes = reply.nbytes
        return packet, metrics

    def close(self, timeout: float = 5.0):
        if self.workers is None:
            return
        workers = self.workers
        self._round += 1
        workers.ingress.send(Frame(FrameKind.STOP, EDGE_ID, self._round))
        for worker in workers:
            worker.join(timeout)
        self.workers = None
        logger.info("Workflow stopped")

    def __enter__(self) -> WorkflowEngine:
        return self

    def __exit__(self, *exc):
        self.close()


def switch_topology(engine: WorkflowEngine, mode: WorkflowMode):
    """Move between warm-up streaming and full control rounds"""
    if mode == WorkflowMode.DPC and engine.samples_seen < engine.samples_needed:
        raise NeedsMoreDataError(engine.samples_needed, engine.samples_seen)
    if mode != engine.mode:
        logger.info(f"Workflow mode {engine.mode.value} -> {mode.value} after {engine.samples_seen} samples")
    engine.mode = mode
