"""UAV-ACS: fleet monitoring and command-and-control hosted on an edge platform."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

from .autopilot import FlightPlan, Mode, Waypoint
from .netem import EventQueue
from .wire import (AckResult, Cmd, Command, CommandAck, Frame, Heartbeat, Reassign,
                   Telemetry, encode_frame, pack_ipv4)

log = logging.getLogger(__name__)


class AcsError(Exception):
    pass


class UnknownPeer(AcsError):
    pass


class UnexpectedMessage(AcsError):
    pass


class TargetLost(AcsError):
    pass


class EmptyPlan(AcsError):
    pass


class Liveness(str, enum.Enum):
    LIVE = "LIVE"
    LOST = "LOST"


class DispatchStatus(str, enum.Enum):
    PENDING = "PENDING"
    OK = "OK"
    REJECTED = "REJECTED"
    TIMEOUT = "TIMEOUT"


@dataclass(frozen=True)
class AcsConfig:
    heartbeat_hz: float = 1.0
    lost_after_missed: int = 3
    retries: int = 3
    retry_timeout_ms: float = 500.0
    arrival_radius_m: float = 2.0

    @property
    def lost_after_s(self) -> float:
        return self.lost_after_missed / self.heartbeat_hz

    @property
    def retry_budget_s(self) -> float:
        return self.retries * self.retry_timeout_ms / 1e3


@dataclass
class MemberRecord:
    sys_id: int
    telemetry: Optional[dict] = None
    telemetry_at: Optional[float] = None
    last_heartbeat: Optional[float] = None
    last_rx: Optional[float] = None
    mode: Optional[int] = None
    liveness: str = Liveness.LOST.value
    lost_time_s: float = 0.0
    plan: Optional[list] = None
    plan_index: int = 0
    plan_land: bool = False
    arrived_at: Optional[float] = None
    goto_state: str = "none"
    mission: Optional[dict] = None
    mission_stage: str = "none"


@dataclass
class FleetRegistry:
    """Everything the ACS knows; this is the state that migrates."""

    members: dict[int, MemberRecord] = field(default_factory=dict)
    pending: dict[int, dict] = field(default_factory=dict)
    next_cseq: int = 1
    unknown_frames: int = 0

    @classmethod
    def for_roster(cls, roster: Iterable[int]) -> "FleetRegistry":
        return cls(members={s: MemberRecord(s) for s in sorted(roster)})

    def to_json(self) -> bytes:
        doc = {
            "members": {str(k): asdict(v) for k, v in sorted(self.members.items())},
            "pending": {str(k): v for k, v in sorted(self.pending.items())},
            "next_cseq": self.next_cseq,
            "unknown_frames": self.unknown_frames,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, blob: bytes) -> "FleetRegistry":
        doc = json.loads(blob)
        return cls(
            members={int(k): MemberRecord(**v) for k, v in doc["members"].items()},
            pending={int(k): v for k, v in doc["pending"].items()},
            next_cseq=doc["next_cseq"],
            unknown_frames=doc["unknown_frames"],
        )

    def state_hash(self) -> str:
        return hashlib.sha256(self.to_json()).hexdigest()

    def member(self, sys_id: int) -> MemberRecord:
        try:
            return self.members[sys_id]
        except KeyError:
            raise UnknownPeer(f"sys_id {sys_id} not in roster") from None

    def liveness(self, sys_id: int, now: float, cfg: AcsConfig) -> Liveness:
        rec = self.member(sys_id)
        if rec.last_heartbeat is None or now - rec.last_heartbeat > cfg.lost_after_s:
            return Liveness.LOST
        return Liveness.LIVE

    def refresh(self, now: float, cfg: AcsConfig) -> None:
        for sys_id, rec in self.members.items():
            rec.liveness = self.liveness(sys_id, now, cfg).value

    def take_cseq(self) -> int:
        in_flight = set(self.pending)
        cseq = self.next_cseq
        while cseq in in_flight or cseq == 0:
            cseq = cseq % 0xFFFF + 1
        self.next_cseq = cseq % 0xFFFF + 1
        return cseq


def _telemetry_dict(t: Telemetry) -> dict:
    return {k: getattr(t, k) for k in ("pos_x_cm", "pos_y_cm", "alt_mm", "vx_cms",
                                        "vy_cms", "vz_cms", "heading_cdeg", "battery_cpct")}


def ingest_frame(reg: FleetRegistry, frame: Frame, now: float, cfg: AcsConfig = AcsConfig()):
    """Fold one uplink frame into the registry.

    Returns the cleared pending command (for an ack) or ``None``. Frames from
    outside the roster are counted and raise :class:`UnknownPeer`.
    """
    if frame.sys_id not in reg.members:
        reg.unknown_frames += 1
        raise UnknownPeer(f"sys_id {frame.sys_id} not in roster")
    body = frame.body
    if isinstance(body, (Reassign, Command)):
        raise UnexpectedMessage(f"{type(body).__name__} is controller-to-UAV only")
    rec = reg.members[frame.sys_id]
    rec.last_rx = now
    cleared = None
    if isinstance(body, Heartbeat):
        if rec.last_heartbeat is not None:
            gap = now - rec.last_heartbeat
            if gap > cfg.lost_after_s:
                rec.lost_time_s += gap - cfg.lost_after_s
        rec.last_heartbeat = now
        rec.mode = body.mode
    elif isinstance(body, Telemetry):
        rec.telemetry = _telemetry_dict(body)
        rec.telemetry_at = now
    elif isinstance(body, CommandAck):
        pending = reg.pending.get(body.cseq)
        if pending is not None and pending["sys_id"] == frame.sys_id and pending["cmd"] == body.cmd:
            cleared = reg.pending.pop(body.cseq)
            cleared["result"] = body.result
    rec.liveness = reg.liveness(frame.sys_id, now, cfg).value
    return cleared


def fleet_snapshot(reg: FleetRegistry, now: Optional[float] = None,
                   cfg: AcsConfig = AcsConfig()) -> list[dict]:
    out = []
    for sys_id, rec in sorted(reg.members.items()):
        t = rec.telemetry
        liveness = reg.liveness(sys_id, now, cfg).value if now is not None else rec.liveness
        entry = {"sys_id": sys_id, "liveness": liveness, "pos": None, "speed": None,
                 "heading": None, "battery": None}
        if t is not None:
            entry.update(
                pos=[t["pos_x_cm"] / 100, t["pos_y_cm"] / 100, t["alt_mm"] / 1000],
                speed=math.sqrt(t["vx_cms"] ** 2 + t["vy_cms"] ** 2 + t["vz_cms"] ** 2) / 100,
                heading=t["heading_cdeg"] / 100,
                battery=t["battery_cpct"] / 100,
            )
        out.append(entry)
    return out


@dataclass
class DispatchHandle:
    cseq: int
    sys_id: int
    command: Command
    status: DispatchStatus = DispatchStatus.PENDING
    transmissions: int = 0
    callbacks: list = field(default_factory=list)

    def resolve(self, status: DispatchStatus) -> None:
        if self.status != DispatchStatus.PENDING:
            return
        self.status = status
        for cb in self.callbacks:
            cb(self)


Sender = Callable[[int, bytes], None]


class AcsInstance:
    """One ACS application instance bound to a fleet roster.

    All access goes through the owning event loop; the control API takes
    ``lock`` before touching the registry.
    """

    def __init__(self, instance_id: str, roster: Iterable[int], queue: EventQueue,
                 send: Sender, config: AcsConfig = AcsConfig(), sys_id: int = 0):
        self.instance_id = instance_id
        self.queue = queue
        self.send = send
        self.config = config
        self.sys_id = sys_id
        self.registry = FleetRegistry.for_roster(roster)
        self.endpoint: tuple[str, int] = ("0.0.0.0", 0)
        self.lock = threading.RLock()
        self.active = False
        self.handles: dict[int, DispatchHandle] = {}
        self.reassign_log: list[dict] = []
        self.rejected_frames = 0
        self._seq = 0
        self._epoch = 0
        self._resumed_at: Optional[float] = None
        self.restored_hash: Optional[str] = None

    # -- hosted-app protocol ------------------------------------------
    @property
    def fleet_size(self) -> int:
        return len(self.registry.members)

    def start(self, endpoint: tuple[str, int], now: float) -> None:
        self.endpoint = endpoint
        self.active = True

    def snapshot(self) -> bytes:
        return self.registry.to_json()

    def state_hash(self) -> str:
        return self.registry.state_hash()

    def suspend(self) -> None:
        self.active = False
        self._epoch += 1

    def restore(self, blob: bytes, endpoint: tuple[str, int], now: float) -> None:
        self.registry = FleetRegistry.from_json(blob)
        self.endpoint = endpoint
        self.handles = {}
        self.restored_hash = self.registry.state_hash()
        self._resumed_at = now

    def resume(self) -> None:
        self.active = True
        self._epoch += 1
        if self._resumed_at is not None:
            self._resumed_at = None
            self.on_migrated(self.endpoint)
        for cseq in sorted(self.registry.pending):
            p = self.registry.pending[cseq]
            handle = DispatchHandle(cseq, p["sys_id"], Command(p["cmd"], cseq, *p["params"]))
            self.handles[cseq] = handle
            self._transmit(handle)

    # -- I/O ------------------------------------------------------------
    def _emit(self, sys_id: int, body) -> None:
        frame = encode_frame(self._seq, self.sys_id, body)
        self._seq = (self._seq + 1) & 0xFF
        self.send(sys_id, frame)

    def on_frame(self, frame: Frame) -> None:
        if not self.active:
            return
        now = self.queue.now
        with self.lock:
            try:
                cleared = ingest_frame(self.registry, frame, now, self.config)
            except (UnknownPeer, UnexpectedMessage) as exc:
                self.rejected_frames += 1
                log.debug("%s: %s", self.instance_id, exc)
                return
            rec = self.registry.members[frame.sys_id]
            if cleared is not None:
                handle = self.handles.pop(frame.body.cseq, None)
                self._on_ack(rec, cleared)
                if handle is not None:
                    handle.resolve(DispatchStatus.OK if cleared["result"] == AckResult.OK
                                   else DispatchStatus.REJECTED)
            if isinstance(frame.body, Heartbeat):
                self._advance_mission(rec)
            elif isinstance(frame.body, Telemetry):
                self._advance_plan(rec)

    # -- commands -------------------------------------------------------
    def issue_command(self, sys_id: int, cmd: int, p1: int = 0, p2: int = 0,
                      p3: int = 0, p4: int = 0) -> DispatchHandle:
        with self.lock:
            reg = self.registry
            reg.member(sys_id)
            if reg.liveness(sys_id, self.queue.now, self.config) == Liveness.LOST:
                raise TargetLost(f"sys_id {sys_id} is LOST")
            cseq = reg.take_cseq()
            command = Command(int(cmd), cseq, p1, p2, p3, p4)
            reg.pending[cseq] = {"sys_id": sys_id, "cmd": int(cmd), "params": [p1, p2, p3, p4],
                                 "attempts": 0}
            handle = DispatchHandle(cseq, sys_id, command)
            self.handles[cseq] = handle
            self._transmit(handle)
            return handle

    def _transmit(self, handle: DispatchHandle) -> None:
        pending = self.registry.pending.get(handle.cseq)
        if pending is None:
            return
        pending["attempts"] += 1
        handle.transmissions += 1
        self._emit(handle.sys_id, handle.command)
        epoch = self._epoch
        self.queue.after(self.config.retry_timeout_ms / 1e3, lambda: self._on_timeout(handle, epoch))

    def _on_timeout(self, handle: DispatchHandle, epoch: int) -> None:
        if epoch != self._epoch or not self.active:
            return
        with self.lock:
            pending = self.registry.pending.get(handle.cseq)
            if pending is None:
                return
            if pending["attempts"] <= self.config.retries:
                self._transmit(handle)
                return
            del self.registry.pending[handle.cseq]
            self.handles.pop(handle.cseq, None)
            self._on_timeout_final(self.registry.members[handle.sys_id], pending)
            handle.resolve(DispatchStatus.TIMEOUT)

    # -- flight plans ---------------------------------------------------
    def update_flight_path(self, sys_id: int, plan: FlightPlan) -> list[DispatchHandle]:
        with self.lock:
            rec = self.registry.member(sys_id)
            if not plan.waypoints:
                raise EmptyPlan(f"empty plan for sys_id {sys_id}")
            if self.registry.liveness(sys_id, self.queue.now, self.config) == Liveness.LOST:
                raise TargetLost(f"sys_id {sys_id} is LOST")
            rec.plan = [[w.x, w.y, w.z, w.hold_s] for w in plan.waypoints]
            rec.plan_index = 0
            rec.plan_land = plan.land_at_end
            rec.arrived_at = None
            return [self._send_goto(rec)]

    def _send_goto(self, rec: MemberRecord) -> DispatchHandle:
        x, y, z, _ = rec.plan[rec.plan_index]
        rec.goto_state = "sent"
        return self.issue_command(rec.sys_id, Cmd.GOTO, round(x * 100), round(y * 100),
                                  round(z * 1000))

    def _advance_plan(self, rec: MemberRecord) -> None:
        if rec.plan is None or rec.plan_index >= len(rec.plan) or rec.telemetry is None:
            return
        now = self.queue.now
        if rec.goto_state == "failed":
            self._try(self._send_goto, rec)
            return
        if rec.goto_state != "acked":
            return
        x, y, z, hold = rec.plan[rec.plan_index]
        t = rec.telemetry
        pos = (t["pos_x_cm"] / 100, t["pos_y_cm"] / 100, t["alt_mm"] / 1000)
        # telemetry is quantized to 1 cm
        if math.dist(pos, (x, y, z)) > self.config.arrival_radius_m + 0.01:
            return
        if rec.arrived_at is None:
            rec.arrived_at = now
        if now - rec.arrived_at < hold:
            return
        rec.plan_index += 1
        rec.arrived_at = None
        rec.goto_state = "none"
        if rec.plan_index < len(rec.plan):
            self._try(self._send_goto, rec)
        elif rec.plan_land:
            rec.mission_stage = "landing"
            self._try(lambda r: self.issue_command(r.sys_id, Cmd.LAND), rec)

    def _try(self, fn, rec):
        try:
            return fn(rec)
        except TargetLost:
            return None

    # -- scripted missions ---------------------------------------------
    def assign_mission(self, sys_id: int, plan: FlightPlan) -> None:
        """Arm, take off and fly ``plan`` as soon as the UAV reports in."""
        with self.lock:
            rec = self.registry.member(sys_id)
            if not plan.waypoints:
                raise EmptyPlan(f"empty plan for sys_id {sys_id}")
            rec.mission = {"waypoints": [[w.x, w.y, w.z, w.hold_s] for w in plan.waypoints],
                           "land": plan.land_at_end, "mission_id": plan.mission_id}
            rec.mission_stage = "assigned"

    def _advance_mission(self, rec: MemberRecord) -> None:
        if rec.mission is None:
            return
        stage = rec.mission_stage
        if stage == "assigned" and rec.mode in (Mode.IDLE, Mode.LANDED):
            rec.mission_stage = "arming"
            self._try(lambda r: self.issue_command(r.sys_id, Cmd.ARM), rec)
        elif stage == "armed" and rec.mode == Mode.ARMED:
            alt = max(1, round(rec.mission["waypoints"][0][2]))
            rec.mission_stage = "taking_off"
            self._try(lambda r: self.issue_command(r.sys_id, Cmd.TAKEOFF, alt), rec)
        elif stage == "climbing" and rec.telemetry is not None:
            alt = max(1, round(rec.mission["waypoints"][0][2]))
            if rec.telemetry["alt_mm"] / 1000 >= alt - self.config.arrival_radius_m:
                wps = tuple(Waypoint(*w) for w in rec.mission["waypoints"])
                rec.mission_stage = "flying"
                try:
                    self.update_flight_path(rec.sys_id, FlightPlan(wps, rec.mission["mission_id"],
                                                                   rec.mission["land"]))
                except TargetLost:
                    rec.mission_stage = "climbing"

    def _on_ack(self, rec: MemberRecord, cleared: dict) -> None:
        ok = cleared["result"] == AckResult.OK
        cmd = cleared["cmd"]
        if cmd == Cmd.GOTO:
            rec.goto_state = "acked" if ok else "failed"
        elif cmd == Cmd.ARM and rec.mission_stage == "arming":
            rec.mission_stage = "armed" if ok else "assigned"
        elif cmd == Cmd.TAKEOFF and rec.mission_stage == "taking_off":
            rec.mission_stage = "climbing" if ok else "armed"
        elif cmd == Cmd.LAND and rec.mission_stage == "landing":
            rec.mission_stage = "done" if ok else "landing"

    def _on_timeout_final(self, rec: MemberRecord, pending: dict) -> None:
        cmd = pending["cmd"]
        if cmd == Cmd.GOTO:
            rec.goto_state = "failed"
        elif cmd == Cmd.ARM and rec.mission_stage == "arming":
            rec.mission_stage = "assigned"
        elif cmd == Cmd.TAKEOFF and rec.mission_stage == "taking_off":
            rec.mission_stage = "armed"

    # -- queries --------------------------------------------------------
    def fleet_snapshot(self) -> list[dict]:
        with self.lock:
            self.registry.refresh(self.queue.now, self.config)
            return fleet_snapshot(self.registry, self.queue.now, self.config)

    # -- migration ------------------------------------------------------
    def on_migrated(self, new_endpoint: tuple[str, int]) -> list[int]:
        """Tell every roster member to report to ``new_endpoint``.

        Delivery is confirmed implicitly by the first uplink frame reaching
        the new endpoint; unconfirmed members are retried like commands.
        """
        addr = pack_ipv4(new_endpoint[0])
        body = Reassign(addr, new_endpoint[1])
        started = self.queue.now
        epoch = self._epoch
        targets = sorted(self.registry.members)

        def attempt(sys_id: int, n: int) -> None:
            if epoch != self._epoch:
                return
            rec = self.registry.members[sys_id]
            if rec.last_rx is not None and rec.last_rx > started:
                self.reassign_log.append({"sys_id": sys_id, "attempts": n, "confirmed": True})
                return
            if n > self.config.retries:
                self.reassign_log.append({"sys_id": sys_id, "attempts": n, "confirmed": False})
                return
            self._emit(sys_id, body)
            self.queue.after(self.config.retry_timeout_ms / 1e3, lambda: attempt(sys_id, n + 1))

        for sys_id in targets:
            attempt(sys_id, 0)
        return targets

