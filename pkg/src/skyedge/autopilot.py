"""SITL-style UAV agent: straight-line kinematics, linear battery, C&C handling."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .wire import (AckResult, Cmd, Command, CommandAck, Heartbeat, Reassign,
                   Telemetry, unpack_ipv4)

log = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]

I32 = (-(2**31), 2**31 - 1)
I16 = (-(2**15), 2**15 - 1)

LOW_BATTERY_PCT = 20.0
# recently seen command sequence numbers kept for de-duplication
CSEQ_MEMORY = 64


class Mode(enum.IntEnum):
    IDLE = 0
    ARMED = 1
    FLYING = 2
    LANDED = 3


class Status(enum.IntEnum):
    NOMINAL = 0
    LOW_BATTERY = 1


@dataclass(frozen=True)
class UavConfig:
    max_speed_ms: float = 10.0
    max_climb_ms: float = 3.0
    drain_base_pcts: float = 0.02
    drain_k_pct_per_m: float = 0.001
    heartbeat_hz: float = 1.0
    telemetry_hz: float = 4.0
    arrival_radius_m: float = 2.0

    def __post_init__(self):
        for name in ("max_speed_ms", "max_climb_ms", "drain_base_pcts",
                     "drain_k_pct_per_m", "heartbeat_hz", "telemetry_hz",
                     "arrival_radius_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"UavConfig.{name} must be positive")
        if self.telemetry_hz < self.heartbeat_hz:
            raise ValueError("telemetry_hz must be >= heartbeat_hz")


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    z: float
    hold_s: float = 0.0

    @property
    def pos(self) -> Vec3:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class FlightPlan:
    """Ordered waypoints. Plans uploaded as missions land after the last
    waypoint; command-driven plans (``land_at_end=False``) loiter there."""

    waypoints: tuple[Waypoint, ...] = ()
    mission_id: str = ""
    land_at_end: bool = True

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))

    def __len__(self) -> int:
        return len(self.waypoints)

    def remaining(self, index: int) -> "FlightPlan":
        return replace(self, waypoints=self.waypoints[index:])

    def path_length(self, start: Optional[Vec3] = None) -> float:
        pts = ([start] if start is not None else []) + [w.pos for w in self.waypoints]
        return sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))


@dataclass(frozen=True)
class UavState:
    sys_id: int
    config: UavConfig = field(default_factory=UavConfig)
    pos: Vec3 = (0.0, 0.0, 0.0)
    vel: Vec3 = (0.0, 0.0, 0.0)
    heading_deg: float = 0.0
    battery_pct: float = 100.0
    mode: Mode = Mode.IDLE
    plan: FlightPlan = field(default_factory=FlightPlan)
    active_wp_index: int = 0
    hold_left_s: float = 0.0
    landing: bool = False
    acs_endpoint: tuple[str, int] = ("0.0.0.0", 0)
    seen_cseq: tuple[int, ...] = ()
    last_acks: tuple[tuple[int, int, int], ...] = ()

    @property
    def plan_exhausted(self) -> bool:
        return self.active_wp_index >= len(self.plan)


def _clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


def _saturate(value: float, bounds: tuple[int, int]) -> int:
    return int(_clamp(round(value), *bounds))


def _target(plan: FlightPlan, index: int, hold_left: float) -> Optional[Vec3]:
    if hold_left > 0:
        return None
    if index < len(plan):
        return plan.waypoints[index].pos
    if plan.waypoints and not plan.land_at_end:
        return plan.waypoints[-1].pos
    return None


def step(state: UavState, dt: float) -> UavState:
    """Advance one UAV by ``dt`` seconds of simulated time."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    cfg = state.config
    if state.mode not in (Mode.ARMED, Mode.FLYING):
        return replace(state, vel=(0.0, 0.0, 0.0))

    pos = state.pos
    moved = 0.0
    vel = (0.0, 0.0, 0.0)
    heading = state.heading_deg
    hold_left = state.hold_left_s
    index = state.active_wp_index
    plan = state.plan
    mode = state.mode
    landing = state.landing

    if mode == Mode.FLYING:
        # arrival is judged at the start of the step so a waypoint under the
        # UAV is consumed without spending a tick on it
        if not landing:
            while index < len(plan) and hold_left == 0:
                wp = plan.waypoints[index]
                if math.dist(pos, wp.pos) > cfg.arrival_radius_m:
                    break
                index += 1
                hold_left = wp.hold_s
            if index >= len(plan) and plan.land_at_end and plan.waypoints and hold_left == 0:
                landing = True
                plan = FlightPlan(plan.waypoints + (Waypoint(pos[0], pos[1], 0.0),),
                                  plan.mission_id, land_at_end=False)
                index = len(plan) - 1

        if hold_left > 0:
            hold_left = max(0.0, hold_left - dt)
        else:
            target = _target(plan, index, hold_left)
            if target is not None:
                d = (target[0] - pos[0], target[1] - pos[1], target[2] - pos[2])
                dist = math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
                if dist > 0:
                    scale = min(1.0, cfg.max_speed_ms * dt / dist)
                    if d[2] != 0:
                        scale = min(scale, cfg.max_climb_ms * dt / abs(d[2]))
                    disp = (d[0] * scale, d[1] * scale, d[2] * scale)
                    pos = (pos[0] + disp[0], pos[1] + disp[1], pos[2] + disp[2])
                    moved = dist * scale
                    vel = (disp[0] / dt, disp[1] / dt, disp[2] / dt)
                    if disp[0] or disp[1]:
                        heading = math.degrees(math.atan2(disp[0], disp[1])) % 360.0

        if landing and pos[2] <= 1e-9:
            pos = (pos[0], pos[1], 0.0)
            mode = Mode.LANDED
            landing = False
            index = len(plan)
            vel = (0.0, 0.0, 0.0)

    battery = state.battery_pct - (cfg.drain_base_pcts * dt + cfg.drain_k_pct_per_m * moved)
    if battery <= 0:
        battery = 0.0
        mode = Mode.LANDED
        landing = False
        vel = (0.0, 0.0, 0.0)
    return replace(state, pos=pos, vel=vel, heading_deg=heading, battery_pct=battery,
                   mode=mode, plan=plan, active_wp_index=index, hold_left_s=hold_left,
                   landing=landing)


def _remember(state: UavState, ack: CommandAck) -> UavState:
    seen = (state.seen_cseq + (ack.cseq,))[-CSEQ_MEMORY:]
    acks = (state.last_acks + ((ack.cseq, ack.cmd, ack.result),))[-CSEQ_MEMORY:]
    return replace(state, seen_cseq=seen, last_acks=acks)


def handle_command(state: UavState, cmd: Command) -> tuple[UavState, CommandAck]:
    """Apply one C&C command; a repeated ``cseq`` re-sends the original ack."""
    if cmd.cseq in state.seen_cseq:
        for cseq, code, result in reversed(state.last_acks):
            if cseq == cmd.cseq:
                return state, CommandAck(code, cseq, result)

    new = _apply(state, cmd)
    result = AckResult.REJECTED if new is None else AckResult.OK
    ack = CommandAck(cmd.cmd, cmd.cseq, result)
    return _remember(new if new is not None else state, ack), ack


def _apply(state: UavState, cmd: Command) -> Optional[UavState]:
    x, y, z = state.pos
    if cmd.cmd == Cmd.ARM:
        if state.mode in (Mode.IDLE, Mode.LANDED) and state.battery_pct > 0:
            return replace(state, mode=Mode.ARMED)
    elif cmd.cmd == Cmd.TAKEOFF:
        if state.mode == Mode.ARMED and cmd.p1 > 0:
            plan = FlightPlan((Waypoint(x, y, float(cmd.p1)),), "takeoff", land_at_end=False)
            return replace(state, mode=Mode.FLYING, plan=plan, active_wp_index=0,
                           hold_left_s=0.0, landing=False)
    elif cmd.cmd == Cmd.GOTO:
        if state.mode == Mode.FLYING and not state.landing:
            wp = Waypoint(cmd.p1 / 100.0, cmd.p2 / 100.0, cmd.p3 / 1000.0)
            done = state.plan.waypoints[:state.active_wp_index]
            plan = FlightPlan(done + (wp,), state.plan.mission_id or "guided", land_at_end=False)
            return replace(state, plan=plan, hold_left_s=0.0)
    elif cmd.cmd == Cmd.LAND:
        if state.mode == Mode.FLYING:
            plan = FlightPlan(state.plan.waypoints[:state.active_wp_index] + (Waypoint(x, y, 0.0),),
                              state.plan.mission_id, land_at_end=False)
            return replace(state, plan=plan, landing=True, hold_left_s=0.0)
    elif cmd.cmd == Cmd.SET_MODE:
        if cmd.p1 in Mode._value2member_map_:
            mode = Mode(cmd.p1)
            if mode == Mode.FLYING and _target(state.plan, state.active_wp_index, 0.0) is None:
                return None
            return replace(state, mode=mode, landing=False if mode != Mode.FLYING else state.landing)
    return None


def build_telemetry(state: UavState) -> Telemetry:
    x, y, z = state.pos
    vx, vy, vz = state.vel
    return Telemetry(
        pos_x_cm=_saturate(x * 100, I32),
        pos_y_cm=_saturate(y * 100, I32),
        alt_mm=_saturate(z * 1000, I32),
        vx_cms=_saturate(vx * 100, I16),
        vy_cms=_saturate(vy * 100, I16),
        vz_cms=_saturate(vz * 100, I16),
        heading_cdeg=_saturate(state.heading_deg * 100, (0, 35999)),
        battery_cpct=_saturate(state.battery_pct * 100, (0, 10000)),
    )


def build_heartbeat(state: UavState) -> Heartbeat:
    status = Status.LOW_BATTERY if state.battery_pct < LOW_BATTERY_PCT else Status.NOMINAL
    return Heartbeat(int(state.mode), int(status))


def apply_reassign(state: UavState, msg: Reassign) -> UavState:
    """Point the agent at a new controller endpoint; malformed targets are ignored."""
    addr = unpack_ipv4(msg.addr)
    if msg.port == 0 or addr in ("0.0.0.0", "255.255.255.255"):
        log.warning("uav %d: ignoring malformed reassign to %s:%d", state.sys_id, addr, msg.port)
        return state
    if (addr, msg.port) == state.acs_endpoint:
        return state
    log.info("uav %d: controller moved %s -> %s:%d", state.sys_id, state.acs_endpoint, addr, msg.port)
    return replace(state, acs_endpoint=(addr, msg.port))


def upload_mission(state: UavState, plan: FlightPlan) -> UavState:
    """Load a mission directly (pre-flight upload, no C&C round trip)."""
    if not plan.waypoints:
        raise ValueError("empty flight plan")
    return replace(state, mode=Mode.FLYING, plan=plan, active_wp_index=0,
                   hold_left_s=0.0, landing=False)
