#!/usr/bin/env python3
"""
DPC Flow Fabric Communication Layer

This module handles framing, checksums, point-to-point channels, the shared
key-value registry and the serialization/transfer cost model for messages
exchanged between workflow tasks and the edge node.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import logging
import math
import queue
import struct
import threading
import time
import zlib

import numpy as np

logger = logging.getLogger(__name__)

FRAME_MAGIC = b"DPCF"
FRAME_VERSION = 1
HEADER_SIZE = 64
MAX_ARRAYS = 4
_HEADER_FIXED = struct.Struct("!4sBBHIQQI")  # magic, version, array count, kind, task, round, body, crc
_HEADER_SHAPES = struct.Struct(f"!{2 * MAX_ARRAYS}I")
_BODY_DTYPE = np.dtype(">f8")


class FrameError(ValueError):
    """A blob is not a well-formed frame"""


class FrameKind(enum.IntEnum):
    SAMPLE = 1  # warm-up stream, no compute
    ROUND = 2  # sample plus truncation policy, triggers a factorization
    FACTORS = 3
    PACKET = 4
    STOP = 5
    START = 6


@dataclasses.dataclass(frozen=True)
class Frame:
    kind: FrameKind
    task_id: int
    round_index: int
    arrays: tuple[np.ndarray, ...] = ()

    @property
    def element_count(self) -> int:
        return sum(int(np.size(arr)) for arr in self.arrays)

    @property
    def nbytes(self) -> int:
        """Declared payload size: 8 bytes per element plus the fixed header"""
        return 8 * self.element_count + HEADER_SIZE


def pack_frame(frame: Frame) -> bytes:
    if len(frame.arrays) > MAX_ARRAYS:
        raise FrameError(f"A frame carries at most {MAX_ARRAYS} arrays, got {len(frame.arrays)}")
    shapes: list[int] = []
    chunks: list[bytes] = []
    for arr in frame.arrays:
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            shapes += [arr.shape[0], 0]
        elif arr.ndim == 2:
            shapes += [arr.shape[0], arr.shape[1]]
        else:
            raise FrameError(f"Only 1-D and 2-D arrays can be framed, got shape {arr.shape}")
        chunks.append(arr.astype(_BODY_DTYPE).tobytes())
    shapes += [0, 0] * (MAX_ARRAYS - len(frame.arrays))
    body = b"".join(chunks)
    header = _HEADER_FIXED.pack(
        FRAME_MAGIC,
        FRAME_VERSION,
        len(frame.arrays),
        int(frame.kind),
        frame.task_id,
        frame.round_index,
        len(body),
        zlib.crc32(body),
    ) + _HEADER_SHAPES.pack(*shapes)
    return header + body


def unpack_frame(blob: bytes) -> Frame:
    if len(blob) < HEADER_SIZE:
        raise FrameError(f"Frame too short: {len(blob)} bytes")
    magic, version, count, kind, task_id, round_index, body_len, crc = _HEADER_FIXED.unpack_from(blob)
    if magic != FRAME_MAGIC:
        raise FrameError(f"Bad frame magic {magic!r}")
    if version != FRAME_VERSION:
        raise FrameError(f"Unsupported frame version {version}")
    if count > MAX_ARRAYS:
        raise FrameError(f"Frame claims {count} arrays, at most {MAX_ARRAYS} allowed")
    body = blob[HEADER_SIZE:]
    if len(body) != body_len:
        raise FrameError(f"Frame body is {len(body)} bytes, header says {body_len}")
    if zlib.crc32(body) != crc:
        raise FrameError(f"Invalid checksum, expected 0x{crc:08x}, computed 0x{zlib.crc32(body):08x}")

    shapes = _HEADER_SHAPES.unpack_from(blob, _HEADER_FIXED.size)
    arrays = []
    offset = 0
    for i in range(count):
        rows, cols = shapes[2 * i], shapes[2 * i + 1]
        size = rows * (cols if cols else 1)
        chunk = np.frombuffer(body, dtype=_BODY_DTYPE, count=size, offset=offset)  # may raise
        offset += size * _BODY_DTYPE.itemsize
        arr = chunk.astype(float)
        arrays.append(arr.reshape(rows, cols) if cols else arr)
    if offset != body_len:
        raise FrameError(f"Array shapes cover {offset} body bytes, body has {body_len}")
    return Frame(FrameKind(kind), task_id, round_index, tuple(arrays))  # may raise on unknown kind


@dataclasses.dataclass(frozen=True)
class EdgeCost:
    serialize_s: float
    transfer_s: float
    deserialize_s: float
    latency_s: float

    @property
    def total_s(self) -> float:
        return self.serialize_s + self.transfer_s + self.deserialize_s + self.latency_s


@dataclasses.dataclass(frozen=True)
class FabricCosts:
    """Per-message cost model; rates in bytes/second, latency in seconds"""

    per_message_base_latency: float = 2e-4
    bandwidth: float = 1.25e8
    serialize_rate: float = 1e9
    deserialize_rate: float = 1e9
    real_sleep: bool = False

    def __post_init__(self):
        if self.per_message_base_latency < 0:
            raise ValueError(f"Base latency must be non-negative, got {self.per_message_base_latency}")
        for name in ("bandwidth", "serialize_rate", "deserialize_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def zero(cls) -> FabricCosts:
        return cls(per_message_base_latency=0.0, bandwidth=math.inf, serialize_rate=math.inf, deserialize_rate=math.inf)

    def edge_cost(self, nbytes: int) -> EdgeCost:
        return EdgeCost(
            serialize_s=nbytes / self.serialize_rate,
            transfer_s=nbytes / self.bandwidth,
            deserialize_s=nbytes / self.deserialize_rate,
            latency_s=self.per_message_base_latency,
        )


@dataclasses.dataclass(frozen=True)
class RegistryEntry:
    key: str
    value: bytes


class KeyValueRegistry:
    """Thread-safe in-process stand-in for the shared key-value store"""

    def __init__(self):
        self._entries: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    def set(self, key: str, value: bytes):
        with self._changed:
            self._entries[key] = bytes(value)
            self._changed.notify_all()

    def get(self, key: str) -> bytes | None:
        with self._lock:
            return self._entries.get(key)

    def delete(self, key: str):
        with self._lock:
            self._entries.pop(key, None)

    def entries(self, prefix: str = "") -> list[RegistryEntry]:
        with self._lock:
            return [RegistryEntry(key, value) for key, value in sorted(self._entries.items()) if key.startswith(prefix)]

    def wait_for(self, key: str, retries: int = 3, interval: float = 0.01) -> bytes | None:
        """Look a key up, re-checking up to `retries` times"""
        deadline_step = max(interval, 0.0)
        with self._changed:
            for attempt in range(retries + 1):
                if key in self._entries:
                    return self._entries[key]
                if attempt < retries:
                    self._changed.wait(deadline_step)
        logger.debug(f"Registry key {key!r} unresolved after {retries} retries")
        return None

    def wait_until(self, predicate, timeout: float) -> bool:
        """Block until predicate(entries dict) holds or timeout seconds pass"""
        deadline = time.monotonic() + timeout
        with self._changed:
            while not predicate(self._entries):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._changed.wait(remaining)
            return True


@dataclasses.dataclass(frozen=True)
class LoggedMessage:
    seq: int
    sender: str
    receiver: str
    kind: FrameKind
    round_index: int
    nbytes: int


class MessageLog:
    def __init__(self):
        self._counter = itertools.count(1)
        self._lock = threading.Lock()
        self.messages: list[LoggedMessage] = []

    def record(self, sender: str, receiver: str, kind: FrameKind, round_index: int, nbytes: int) -> int:
        with self._lock:
            seq = next(self._counter)
            self.messages.append(LoggedMessage(seq, sender, receiver, kind, round_index, nbytes))
            return seq

    def of_kind(self, kind: FrameKind) -> list[LoggedMessage]:
        with self._lock:
            return [msg for msg in self.messages if msg.kind == kind]


class Channel:
    """One-directional point-to-point link between two logical addresses"""

    def __init__(self, sender: str, receiver: str, costs: FabricCosts, log: MessageLog):
        self.sender = sender
        self.receiver = receiver
        self.costs = costs
        self.log = log
        self._queue: queue.Queue[bytes] = queue.Queue()

    def send(self, frame: Frame) -> EdgeCost:
        blob = pack_frame(frame)
        cost = self.costs.edge_cost(frame.nbytes)
        self.log.record(self.sender, self.receiver, frame.kind, frame.round_index, frame.nbytes)
        logger.debug(f"{self.sender} -> {self.receiver}: {frame.kind.name} round {frame.round_index}, {frame.nbytes} bytes")
        if self.costs.real_sleep and cost.total_s > 0:
            time.sleep(cost.total_s)
        self._queue.put(blob)
        return cost

    def recv(self, timeout: float | None = None) -> Frame:
        blob = self._queue.get(timeout=timeout)  # may raise queue.Empty
        return unpack_frame(blob)


class ChannelHub:
    """Channel table keyed by (sender, receiver) address pairs"""

    def __init__(self, costs: FabricCosts, log: MessageLog | None = None):
        self.costs = costs
        self.log = log if log is not None else MessageLog()
        self._channels: dict[tuple[str, str], Channel] = {}
        self._lock = threading.Lock()

    def open(self, sender: str, receiver: str) -> Channel:
        with self._lock:
            key = (sender, receiver)
            if key not in self._channels:
                self._channels[key] = Channel(sender, receiver, self.costs, self.log)
            return self._channels[key]

    def links(self) -> list[tuple[str, str]]:
        with self._lock:
            return sorted(self._channels)
