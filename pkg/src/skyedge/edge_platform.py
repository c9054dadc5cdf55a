"""Airborne MEC-style platform: app lifecycle, admission, live reallocation.

Reallocation follows the usual pre-copy / stop-and-copy decomposition. The
service keeps running while state streams to the destination, then freezes
while the dirty remainder is copied::

    precopy   = precopy_fixed_s  + S / B                (service up)
    stopcopy  = stopcopy_fixed_s + dirty_fraction * S / B   (service down)
    S         = base_state_bytes + state_bytes_per_uav * fleet_size
"""
from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Protocol

from .netem import EventQueue, LinkSpec

log = logging.getLogger(__name__)


class PlatformError(Exception):
    pass


class CapacityExceeded(PlatformError):
    pass


class NotFound(PlatformError):
    pass


class MigrationInProgress(PlatformError):
    pass


class LinkDown(PlatformError):
    pass


class InstanceStatus(str, enum.Enum):
    DEPLOYING = "DEPLOYING"
    RUNNING = "RUNNING"
    MIGRATING = "MIGRATING"
    STOPPED = "STOPPED"


@dataclass(frozen=True)
class MigrationConfig:
    precopy_fixed_s: float = 5.0
    state_bytes_per_uav: float = 64 * 1024
    base_state_bytes: float = 1024 * 1024
    stopcopy_fixed_s: float = 1.0
    dirty_fraction: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"MigrationConfig.{name} must be positive, got {value}")

    def state_bytes(self, fleet_size: int) -> float:
        return self.base_state_bytes + self.state_bytes_per_uav * fleet_size


@dataclass(frozen=True)
class PlatformConfig:
    cpu_pct_per_instance: float = 1.43
    cpu_capacity_pct: float = 100.0
    max_instances: int = 60
    deploy_time_s: float = 3.894
    max_connections_per_instance: int = 255
    migration: MigrationConfig = field(default_factory=MigrationConfig)

    def __post_init__(self):
        if not (self.cpu_pct_per_instance > 0 and self.cpu_capacity_pct > 0
                and self.deploy_time_s > 0):
            raise ValueError("platform cpu and deploy figures must be positive")
        if self.max_instances < 1 or self.max_connections_per_instance < 1:
            raise ValueError("max_instances and connection limit must be >= 1")


def calibrate_migration(realloc_s: float, downtime_s: float, fleet_size: int,
                        link: LinkSpec, base: MigrationConfig = MigrationConfig()) -> MigrationConfig:
    """Solve base state size and dirty fraction so that a ``fleet_size`` migration
    over ``link`` takes ``realloc_s`` with ``downtime_s`` of it down.

    Fixed costs and per-UAV state size are taken from ``base``.
    """
    transfer_s = realloc_s - base.precopy_fixed_s - downtime_s
    dirty_s = downtime_s - base.stopcopy_fixed_s
    if transfer_s <= 0 or dirty_s <= 0:
        raise ValueError("targets are not reachable with the given fixed costs")
    state = transfer_s * link.bytes_per_s
    base_bytes = state - base.state_bytes_per_uav * fleet_size
    return replace(base, base_state_bytes=base_bytes, dirty_fraction=dirty_s / transfer_s)


@dataclass(frozen=True)
class MigrationReport:
    instance_id: str
    src_uav: str
    dst_uav: str
    started_at: float
    state_bytes: float
    precopy_s: float
    downtime_s: float
    precopy_transfer_s: float
    stopcopy_transfer_s: float
    bytes_transferred: float

    @property
    def reallocation_time_s(self) -> float:
        return self.precopy_s + self.downtime_s

    @property
    def ratio(self) -> float:
        return self.downtime_s / self.reallocation_time_s


def migration_model(cfg: MigrationConfig, fleet_size: int, link: LinkSpec) -> dict[str, float]:
    state = cfg.state_bytes(fleet_size)
    pre_xfer = state / link.bytes_per_s
    stop_xfer = cfg.dirty_fraction * state / link.bytes_per_s
    return {
        "state_bytes": state,
        "precopy_transfer_s": pre_xfer,
        "stopcopy_transfer_s": stop_xfer,
        "precopy_s": cfg.precopy_fixed_s + pre_xfer,
        "downtime_s": cfg.stopcopy_fixed_s + stop_xfer,
        "bytes_transferred": state * (1 + cfg.dirty_fraction),
    }


class HostedApp(Protocol):
    """What the platform needs from an application to move it."""

    fleet_size: int

    def snapshot(self) -> bytes: ...
    def suspend(self) -> None: ...
    def restore(self, blob: bytes, endpoint: tuple[str, int], now: float) -> None: ...
    def resume(self) -> None: ...


@dataclass
class AppSpec:
    instance_id: str
    app: Any = None
    port: Optional[int] = None


@dataclass
class AppInstance:
    instance_id: str
    host_uav_id: str
    endpoint: tuple[str, int]
    status: InstanceStatus = InstanceStatus.DEPLOYING
    app: Any = None
    state: Optional[bytes] = None
    ready_at: float = 0.0
    phase: Optional[str] = None
    connections: set = field(default_factory=set)
    drops: int = 0

    @property
    def serving(self) -> bool:
        return self.status == InstanceStatus.RUNNING or (
            self.status == InstanceStatus.MIGRATING and self.phase == "precopy")

    def state_hash(self) -> str:
        blob = self.app.snapshot() if self.app is not None else (self.state or b"")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Usage:
    cpu_pct: float
    instance_count: int
    connection_drops: int


@dataclass
class _Migration:
    report: MigrationReport
    src: "Platform"
    dst: "Platform"
    incoming: AppInstance
    link_check: Optional[Callable[[], bool]]
    on_done: Optional[Callable[[MigrationReport, Optional[Exception]], None]]
    error: Optional[Exception] = None
    done: bool = False


class Platform:
    """One airborne edge host. Mutations are serialized through the event queue."""

    def __init__(self, uav_id: str, address: str, queue: EventQueue,
                 config: PlatformConfig = PlatformConfig(), base_port: int = 5800):
        self.uav_id = uav_id
        self.address = address
        self.queue = queue
        self.config = config
        self.instances: dict[str, AppInstance] = {}
        self.unrouted_drops = 0
        self.placements: list[tuple[float, str, str]] = []
        self._next_port = base_port
        self._migrations: dict[str, _Migration] = {}

    # -- ledger ---------------------------------------------------------
    def _occupying(self) -> list[AppInstance]:
        return [i for i in self.instances.values() if i.status != InstanceStatus.STOPPED]

    def admits(self) -> bool:
        n = len(self._occupying())
        cpu = (n + 1) * self.config.cpu_pct_per_instance
        return n < self.config.max_instances and cpu <= self.config.cpu_capacity_pct + 1e-9

    def _check_capacity(self) -> None:
        n = len(self._occupying())
        if n >= self.config.max_instances:
            raise CapacityExceeded(f"{self.uav_id}: instance limit {self.config.max_instances} reached")
        if (n + 1) * self.config.cpu_pct_per_instance > self.config.cpu_capacity_pct + 1e-9:
            raise CapacityExceeded(f"{self.uav_id}: cpu capacity {self.config.cpu_capacity_pct}% exhausted")

    def _allocate_port(self, port: Optional[int]) -> int:
        if port is not None:
            return port
        self._next_port += 1
        return self._next_port

    def _mark(self, instance_id: str, event: str) -> None:
        self.placements.append((self.queue.now, instance_id, event))

    # -- lifecycle ------------------------------------------------------
    def deploy_app(self, spec: AppSpec) -> AppInstance:
        if spec.instance_id in self.instances and \
                self.instances[spec.instance_id].status != InstanceStatus.STOPPED:
            raise PlatformError(f"instance {spec.instance_id} already exists")
        self._check_capacity()
        now = self.queue.now
        inst = AppInstance(spec.instance_id, self.uav_id,
                           (self.address, self._allocate_port(spec.port)),
                           app=spec.app, ready_at=now + self.config.deploy_time_s)
        self.instances[spec.instance_id] = inst

        def ready():
            if inst.status == InstanceStatus.DEPLOYING:
                inst.status = InstanceStatus.RUNNING
                self._mark(inst.instance_id, "up")
                log.debug("%s: %s running at %.3f", self.uav_id, inst.instance_id, self.queue.now)
                if inst.app is not None and hasattr(inst.app, "start"):
                    inst.app.start(inst.endpoint, self.queue.now)

        self.queue.schedule(inst.ready_at, ready)
        return inst

    def get(self, instance_id: str) -> AppInstance:
        inst = self.instances.get(instance_id)
        if inst is None or inst.status == InstanceStatus.STOPPED:
            raise NotFound(instance_id)
        return inst

    def delete_app(self, instance_id: str) -> None:
        inst = self.get(instance_id)
        if inst.status == InstanceStatus.MIGRATING:
            raise MigrationInProgress(instance_id)
        if inst.status == InstanceStatus.RUNNING:
            self._mark(instance_id, "down")
        inst.status = InstanceStatus.STOPPED
        inst.connections.clear()
        if inst.app is not None and hasattr(inst.app, "suspend"):
            inst.app.suspend()

    def admit_connection(self, instance_id: str, peer) -> bool:
        inst = self.instances.get(instance_id)
        if inst is None or inst.status == InstanceStatus.STOPPED:
            self.unrouted_drops += 1
            return False
        if not inst.serving:
            inst.drops += 1
            return False
        if peer not in inst.connections:
            if len(inst.connections) >= self.config.max_connections_per_instance:
                inst.drops += 1
                return False
            inst.connections.add(peer)
        return True

    def instance_at(self, port: int) -> Optional[AppInstance]:
        for inst in self.instances.values():
            if inst.endpoint[1] == port and inst.status != InstanceStatus.STOPPED:
                return inst
        return None

    def platform_usage(self) -> Usage:
        n = len(self._occupying())
        cpu = min(n * self.config.cpu_pct_per_instance, self.config.cpu_capacity_pct)
        drops = self.unrouted_drops + sum(i.drops for i in self.instances.values())
        return Usage(cpu, n, drops)

    # -- migration ------------------------------------------------------
    def abort_migration(self, instance_id: str, reason: Exception) -> None:
        mig = self._migrations.get(instance_id)
        if mig is None or mig.done:
            raise NotFound(f"no migration in progress for {instance_id}")
        _abort(mig, reason)


def reallocate_app(src: Platform, dst: Platform, instance_id: str, link: LinkSpec,
                   fleet_size: Optional[int] = None,
                   link_check: Optional[Callable[[], bool]] = None,
                   on_done: Optional[Callable[[MigrationReport, Optional[Exception]], None]] = None,
                   ) -> MigrationReport:
    """Start a live migration on the shared timeline and return its planned report.

    ``link_check`` is polled at each phase boundary; a ``False`` aborts the
    migration with :class:`LinkDown` and leaves the instance on ``src``.
    """
    if src.queue is not dst.queue:
        raise PlatformError("platforms must share one timeline")
    inst = src.get(instance_id)
    if inst.status != InstanceStatus.RUNNING:
        raise MigrationInProgress(f"{instance_id} is {inst.status.value}")
    if instance_id in dst.instances and dst.instances[instance_id].status != InstanceStatus.STOPPED:
        raise PlatformError(f"{instance_id} already present on {dst.uav_id}")
    dst._check_capacity()
    if fleet_size is None:
        fleet_size = getattr(inst.app, "fleet_size", 0)

    queue = src.queue
    model = migration_model(src.config.migration, fleet_size, link)
    report = MigrationReport(instance_id, src.uav_id, dst.uav_id, queue.now,
                             model["state_bytes"], model["precopy_s"], model["downtime_s"],
                             model["precopy_transfer_s"], model["stopcopy_transfer_s"],
                             model["bytes_transferred"])

    incoming = AppInstance(instance_id, dst.uav_id,
                           (dst.address, dst._allocate_port(inst.endpoint[1])),
                           status=InstanceStatus.MIGRATING, phase="incoming")
    dst.instances[instance_id] = incoming
    inst.status = InstanceStatus.MIGRATING
    inst.phase = "precopy"
    mig = _Migration(report, src, dst, incoming, link_check, on_done)
    src._migrations[instance_id] = mig

    def stop_and_copy():
        if mig.done:
            return
        if link_check is not None and not link_check():
            _abort(mig, LinkDown("link lost during pre-copy"))
            return
        inst.phase = "stopcopy"
        src._mark(instance_id, "down")
        if inst.app is not None:
            inst.app.suspend()
            inst.state = inst.app.snapshot()

    def switch_over():
        if mig.done:
            return
        if link_check is not None and not link_check():
            _abort(mig, LinkDown("link lost during stop-and-copy"))
            return
        mig.done = True
        incoming.app = inst.app
        incoming.state = inst.state
        incoming.status = InstanceStatus.RUNNING
        incoming.phase = None
        inst.status = InstanceStatus.STOPPED
        inst.phase = None
        inst.connections.clear()
        dst._mark(instance_id, "up")
        if incoming.app is not None:
            incoming.app.restore(incoming.state, incoming.endpoint, queue.now)
            incoming.app.resume()
        if on_done is not None:
            on_done(report, None)

    queue.schedule(queue.now + report.precopy_s, stop_and_copy)
    queue.schedule(queue.now + report.reallocation_time_s, switch_over)
    return report


def _abort(mig: _Migration, reason: Exception) -> None:
    inst = mig.src.instances[mig.report.instance_id]
    was_down = inst.phase == "stopcopy"
    mig.done = True
    mig.error = reason
    inst.status = InstanceStatus.RUNNING
    inst.phase = None
    mig.incoming.status = InstanceStatus.STOPPED
    if was_down:
        mig.src._mark(inst.instance_id, "up")
        if inst.app is not None:
            inst.app.resume()
    log.warning("migration of %s aborted: %s", inst.instance_id, reason)
    if mig.on_done is not None:
        mig.on_done(mig.report, reason)
