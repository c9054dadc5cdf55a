"""Wireless link emulation over a simulated clock.

The :class:`EventQueue` is the single serialized timeline shared by every
simulated entity: events fire in ``(time, insertion index)`` order.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import math
import random
import socket
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

Point = tuple[float, float, float]


class NetemError(Exception):
    pass


class TerrainBoundsError(NetemError):
    pass


class EventQueue:
    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list = []
        self._counter = itertools.count()

    def schedule(self, at: float, callback: Callable[[], None]) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        heapq.heappush(self._heap, (at, next(self._counter), callback))

    def after(self, delay: float, callback: Callable[[], None]) -> None:
        self.schedule(self.now + delay, callback)

    def __len__(self) -> int:
        return len(self._heap)

    def run_until(self, t_end: float) -> None:
        """Fire every event with time < ``t_end``; the clock ends at ``t_end``."""
        heap = self._heap
        while heap and heap[0][0] < t_end:
            at, _, callback = heapq.heappop(heap)
            self.now = at
            callback()
        self.now = max(self.now, t_end)

    def drain(self) -> None:
        heap = self._heap
        while heap:
            at, _, callback = heapq.heappop(heap)
            self.now = at
            callback()


@dataclass(frozen=True)
class LinkSpec:
    one_way_latency_ms: float = 0.638
    bandwidth_mbps: float = 12.44
    loss_prob: float = 0.000437
    jitter_ms: float = 0.0

    def __post_init__(self):
        if self.one_way_latency_ms < 0:
            raise ValueError("latency must be >= 0")
        # loss_prob == 1 is accepted as a forced-outage test setting
        if not 0 <= self.loss_prob <= 1:
            raise ValueError("loss_prob must be in [0, 1]")
        if not self.bandwidth_mbps > 0:
            raise ValueError("bandwidth must be > 0")
        if self.jitter_ms < 0:
            raise ValueError("jitter must be >= 0")

    @property
    def bytes_per_s(self) -> float:
        return self.bandwidth_mbps * 1e6 / 8

    def serialization_s(self, nbytes: int) -> float:
        return nbytes * 8 / (self.bandwidth_mbps * 1e6)


@dataclass
class TerrainGrid:
    """Ground elevation; ``heights[row][col]`` covers x in col*cell, y in row*cell."""

    cell_size_m: float
    heights: np.ndarray

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        if self.heights.ndim != 2 or 0 in self.heights.shape:
            raise ValueError("terrain heights must be a non-empty 2-D grid")
        if (self.heights < 0).any():
            raise ValueError("terrain heights must be non-negative")
        if not self.cell_size_m > 0:
            raise ValueError("cell size must be positive")

    @classmethod
    def flat(cls, rows: int, cols: int, cell_size_m: float) -> "TerrainGrid":
        return cls(cell_size_m, np.zeros((rows, cols)))

    @property
    def extent(self) -> tuple[float, float]:
        rows, cols = self.heights.shape
        return cols * self.cell_size_m, rows * self.cell_size_m

    def contains(self, x: float, y: float) -> bool:
        width, depth = self.extent
        return 0 <= x <= width and 0 <= y <= depth

    def height_at(self, x, y):
        rows, cols = self.heights.shape
        col = np.minimum((np.asarray(x) // self.cell_size_m).astype(int), cols - 1)
        row = np.minimum((np.asarray(y) // self.cell_size_m).astype(int), rows - 1)
        return self.heights[row, col]


def load_terrain(path) -> TerrainGrid:
    """Read ``rows cols cell_size_m`` then row-major heights."""
    tokens = Path(path).read_text().split()
    if len(tokens) < 3:
        raise ValueError(f"{path}: missing terrain header")
    rows, cols, cell = int(tokens[0]), int(tokens[1]), float(tokens[2])
    values = [float(t) for t in tokens[3:]]
    if len(values) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} heights, found {len(values)}")
    return TerrainGrid(cell, np.array(values).reshape(rows, cols))


def save_terrain(terrain: TerrainGrid, path) -> None:
    rows, cols = terrain.heights.shape
    lines = [f"{rows} {cols} {terrain.cell_size_m:g}"]
    lines += [" ".join(f"{h:g}" for h in row) for row in terrain.heights]
    Path(path).write_text("\n".join(lines) + "\n")


def los_visible(a: Point, b: Point, terrain: Optional[TerrainGrid]) -> bool:
    """True iff the segment a->b never dips below the terrain surface."""
    if terrain is None:
        return True
    for p in (a, b):
        if not terrain.contains(p[0], p[1]):
            raise TerrainBoundsError(f"point {p} outside terrain grid")
    horiz = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(1, math.ceil(horiz / (terrain.cell_size_m / 2)))
    t = np.arange(n + 1) / n
    xs = a[0] + (b[0] - a[0]) * t
    ys = a[1] + (b[1] - a[1]) * t
    zs = a[2] + (b[2] - a[2]) * t
    return bool((zs >= terrain.height_at(xs, ys)).all())


@dataclass(frozen=True)
class CoverageParams:
    base_radius_m: float = 500.0
    radius_per_alt: float = 5.0

    def radius(self, altitude_m: float) -> float:
        return self.base_radius_m + self.radius_per_alt * max(0.0, altitude_m)


@dataclass(frozen=True)
class GroundNode:
    node_id: str
    pos: Point


def in_coverage(uav_pos: Point, attachment: GroundNode,
                params: CoverageParams = CoverageParams(),
                terrain: Optional[TerrainGrid] = None) -> bool:
    dx = uav_pos[0] - attachment.pos[0]
    dy = uav_pos[1] - attachment.pos[1]
    if math.hypot(dx, dy) > params.radius(uav_pos[2]):
        return False
    return los_visible(uav_pos, attachment.pos, terrain)


@dataclass
class PairCounters:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0
    frames_dropped: int = 0
    bytes_dropped: int = 0


@dataclass(frozen=True)
class Delivery:
    src: str
    dst: str
    at: float
    nbytes: int


@dataclass(frozen=True)
class Drop:
    src: str
    dst: str
    reason: str
    nbytes: int


# handler(src_node, datagram, meta); meta carries e.g. the destination port
Handler = Callable[[str, bytes, Any], None]


def derive_rng(seed: int, module: str, entity: str) -> random.Random:
    """Independent stream per (module, entity) under one root seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(module.encode()),
                                                 zlib.crc32(entity.encode())))
    return random.Random(int(ss.generate_state(1, dtype=np.uint64)[0]))


class Network:
    """Nodes joined by links; delivers frames through the shared event queue.

    ``link_up`` lets the caller veto a transmission at send time (coverage,
    line of sight); vetoed frames are dropped with reason ``NoLink``.
    """

    def __init__(self, queue: EventQueue, seed: int = 0,
                 default_link: Optional[LinkSpec] = None):
        self.queue = queue
        self.seed = seed
        self.default_link = default_link
        self.links: dict[tuple[str, str], LinkSpec] = {}
        self.handlers: dict[str, Handler] = {}
        self.accounting: dict[tuple[str, str], PairCounters] = {}
        self.link_up: Optional[Callable[[str, str], bool]] = None
        self._rngs: dict[tuple[str, str], random.Random] = {}

    def attach(self, node: str, handler: Handler) -> None:
        self.handlers[node] = handler

    def connect(self, a: str, b: str, spec: LinkSpec) -> None:
        self.links[(a, b)] = spec
        self.links[(b, a)] = spec

    def link(self, src: str, dst: str) -> Optional[LinkSpec]:
        return self.links.get((src, dst), self.default_link)

    def _rng(self, src: str, dst: str) -> random.Random:
        rng = self._rngs.get((src, dst))
        if rng is None:
            rng = self._rngs[(src, dst)] = derive_rng(self.seed, "netem", f"{src}->{dst}")
        return rng

    def counters(self, src: str, dst: str) -> PairCounters:
        c = self.accounting.get((src, dst))
        if c is None:
            c = self.accounting[(src, dst)] = PairCounters()
        return c

    def transmit(self, src: str, dst: str, frame: bytes, now: Optional[float] = None,
                 meta: Any = None):
        """Send one datagram; returns a :class:`Delivery` or a :class:`Drop`."""
        now = self.queue.now if now is None else now
        nbytes = len(frame)
        counters = self.counters(src, dst)
        counters.bytes_sent += nbytes
        counters.frames_sent += 1
        spec = self.link(src, dst)
        if spec is None or (self.link_up is not None and not self.link_up(src, dst)):
            return self._drop(counters, src, dst, "NoLink", nbytes)
        rng = self._rng(src, dst)
        if spec.loss_prob > 0 and rng.random() < spec.loss_prob:
            return self._drop(counters, src, dst, "Loss", nbytes)
        delay = spec.one_way_latency_ms / 1e3 + spec.serialization_s(nbytes)
        if spec.jitter_ms > 0:
            delay += abs(rng.gauss(0.0, spec.jitter_ms / 1e3))
        delivery = Delivery(src, dst, now + delay, nbytes)
        data = bytes(frame)
        self.queue.schedule(delivery.at, lambda: self._deliver(counters, src, dst, data, meta))
        return delivery

    def _drop(self, counters, src, dst, reason, nbytes) -> Drop:
        counters.frames_dropped += 1
        counters.bytes_dropped += nbytes
        return Drop(src, dst, reason, nbytes)

    def _deliver(self, counters: PairCounters, src: str, dst: str, data: bytes, meta) -> None:
        counters.bytes_received += len(data)
        counters.frames_received += 1
        handler = self.handlers.get(dst)
        if handler is not None:
            handler(src, data, meta)

    def bytes_into(self, node: str) -> int:
        return sum(c.bytes_received for (s, d), c in self.accounting.items() if d == node)

    def bytes_out_of(self, node: str) -> int:
        return sum(c.bytes_sent for (s, d), c in self.accounting.items() if s == node)


ACCOUNTING_FIELDS = ["src", "dst", "bytes_sent", "bytes_received", "frames_dropped"]


def write_accounting(accounting: dict[tuple[str, str], PairCounters], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ACCOUNTING_FIELDS)
        for (src, dst) in sorted(accounting):
            c = accounting[(src, dst)]
            writer.writerow([src, dst, c.bytes_sent, c.bytes_received, c.frames_dropped])


class UdpTransport:
    """Wall-clock loopback transport for demos; one frame per datagram."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def send(self, frame: bytes, endpoint: tuple[str, int]) -> None:
        self.sock.sendto(frame, endpoint)

    def recv(self, timeout: float = 1.0) -> tuple[bytes, tuple[str, int]]:
        self.sock.settimeout(timeout)
        return self.sock.recvfrom(2048)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

