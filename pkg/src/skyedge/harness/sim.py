"""Wires agents, platforms and ACS instances onto one simulated timeline."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .. import autopilot
from ..acs import AcsInstance
from ..autopilot import Mode, UavState
from ..edge_platform import (AppSpec, CapacityExceeded, MigrationConfig, MigrationReport,
                             Platform, calibrate_migration, reallocate_app)
from ..netem import EventQueue, LinkSpec, Network, load_terrain, los_visible
from ..wire import (Command, MsgId, ProtocolError, Reassign, decode_frame, encode_frame,
                    frame_size)
from .metrics import MetricsRecord
from .scenario import Scenario

log = logging.getLogger(__name__)

# reference measurements the harness calibrates its migration model against
TARGET_REALLOCATION_S = 51.963
TARGET_DOWNTIME_S = 6.415
TARGET_FLEET = 60

HARNESS_MIGRATION = calibrate_migration(TARGET_REALLOCATION_S, TARGET_DOWNTIME_S,
                                        TARGET_FLEET, LinkSpec())


def uav_node(sys_id: int) -> str:
    return f"uav-{sys_id}"


class UavAgent:
    """Network shell around one emulated autopilot."""

    def __init__(self, world: "World", state: UavState, start_s: float):
        self.world = world
        self.state = state
        self.node = uav_node(state.sys_id)
        self.start_s = start_s
        self.seq = 0
        self.sent = {MsgId.HEARTBEAT: 0, MsgId.TELEMETRY: 0}

    def boot(self) -> None:
        q = self.world.queue
        q.schedule(self.start_s, lambda: self._beat(0))
        q.schedule(self.start_s, lambda: self._report(0))

    def _emit(self, body) -> None:
        frame = encode_frame(self.seq, self.state.sys_id, body)
        self.seq = (self.seq + 1) & 0xFF
        self.world.send_to_endpoint(self.node, self.state.acs_endpoint, frame)

    def _beat(self, k: int) -> None:
        self._emit(autopilot.build_heartbeat(self.state))
        self.sent[MsgId.HEARTBEAT] += 1
        self._schedule(self._beat, k + 1, self.state.config.heartbeat_hz)

    def _report(self, k: int) -> None:
        self._emit(autopilot.build_telemetry(self.state))
        self.sent[MsgId.TELEMETRY] += 1
        self._schedule(self._report, k + 1, self.state.config.telemetry_hz)

    def _schedule(self, fn, k: int, hz: float) -> None:
        at = self.start_s + k / hz
        if at < self.world.duration:
            self.world.queue.schedule(at, lambda: fn(k))

    def on_datagram(self, src: str, data: bytes, meta) -> None:
        try:
            frame = decode_frame(data)
        except ProtocolError:
            self.world.decode_errors += 1
            return
        body = frame.body
        if isinstance(body, Command):
            self.state, ack = autopilot.handle_command(self.state, body)
            self._emit(ack)
        elif isinstance(body, Reassign):
            self.state = autopilot.apply_reassign(self.state, body)


class World:
    def __init__(self, scenario: Scenario, base_dir: Optional[Path] = None):
        self.scenario = scenario
        self.queue = EventQueue()
        self.duration = scenario.duration_s
        self.link = scenario.link.build()
        self.net = Network(self.queue, scenario.seed, default_link=self.link)
        self.decode_errors = 0
        self.no_route = 0
        self.record = MetricsRecord()
        self.deploy_failures: list[dict] = []
        self.deploy_times: dict[str, float] = {}
        self.migrations: list[dict] = []

        self.terrain = None
        if scenario.terrain:
            path = Path(scenario.terrain)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            self.terrain = load_terrain(path)

        self.platforms: dict[str, Platform] = {}
        self.platform_pos: dict[str, tuple] = {}
        self.by_address: dict[str, Platform] = {}
        for p in scenario.platforms:
            plat = Platform(p.uav_id, p.address, self.queue, p.config.build(HARNESS_MIGRATION))
            self.platforms[p.uav_id] = plat
            self.platform_pos[p.uav_id] = p.pos
            self.by_address[p.address] = plat
            self.net.attach(p.uav_id, self._platform_handler(plat))

        self.agents: dict[int, UavAgent] = {}
        self.fleets: dict[str, list[int]] = {}
        for fleet in scenario.fleets:
            self.fleets[fleet.id] = [m.sys_id for m in fleet.members]
            for m in fleet.members:
                state = UavState(m.sys_id, m.config.build(), pos=m.pos, battery_pct=m.battery_pct)
                agent = UavAgent(self, state, fleet.start_s)
                self.agents[m.sys_id] = agent
                self.net.attach(agent.node, agent.on_datagram)

        if self.terrain is not None:
            self.net.link_up = self._line_of_sight

        self.acs: dict[str, AcsInstance] = {}
        self.host: dict[str, str] = {}
        for a in scenario.acs:
            inst = AcsInstance(a.instance_id, self.fleets[a.fleet], self.queue,
                               self._acs_sender(a.instance_id), a.config.build())
            self.acs[a.instance_id] = inst
            self.host[a.instance_id] = a.platform
            plat = self.platforms[a.platform]
            endpoint = (plat.address, a.port)
            for sys_id in self.fleets[a.fleet]:
                agent = self.agents[sys_id]
                agent.state = replace(agent.state, acs_endpoint=endpoint)
            fleet = next(f for f in scenario.fleets if f.id == a.fleet)
            for m in fleet.members:
                if m.plan is not None:
                    inst.assign_mission(m.sys_id, m.plan.build())

    # -- routing --------------------------------------------------------
    def position(self, node: str):
        if node in self.platform_pos:
            return self.platform_pos[node]
        return self.agents[int(node.split("-", 1)[1])].state.pos

    def _line_of_sight(self, src: str, dst: str) -> bool:
        return los_visible(self.position(src), self.position(dst), self.terrain)

    def send_to_endpoint(self, src: str, endpoint: tuple[str, int], frame: bytes) -> None:
        plat = self.by_address.get(endpoint[0])
        if plat is None:
            self.no_route += 1
            return
        self.net.transmit(src, plat.uav_id, frame, meta=endpoint[1])

    def _acs_sender(self, instance_id: str):
        def send(sys_id: int, frame: bytes) -> None:
            # the endpoint moves before the switch-over callback fires, so route
            # by the instance's own address rather than the bookkeeping map
            plat = self.by_address.get(self.acs[instance_id].endpoint[0])
            host = plat.uav_id if plat is not None else self.host[instance_id]
            self.net.transmit(host, uav_node(sys_id), frame)
        return send

    def _platform_handler(self, plat: Platform):
        def handle(src: str, data: bytes, port) -> None:
            inst = plat.instance_at(port)
            key = inst.instance_id if inst is not None else f"port:{port}"
            if not plat.admit_connection(key, src):
                return
            try:
                frame = decode_frame(data)
            except ProtocolError:
                self.decode_errors += 1
                return
            inst.app.on_frame(frame)
        return handle

    # -- lifecycle ------------------------------------------------------
    def _deploy_all(self) -> None:
        for a in self.scenario.acs:
            plat = self.platforms[a.platform]
            try:
                inst = plat.deploy_app(AppSpec(a.instance_id, self.acs[a.instance_id], a.port))
            except CapacityExceeded as exc:
                self.deploy_failures.append({"instance_id": a.instance_id, "platform": a.platform,
                                             "error": type(exc).__name__, "t": self.queue.now})
                self.record.event(self.queue.now, "deploy_rejected", a.instance_id,
                                  type(exc).__name__)
                log.info("deploy of %s rejected: %s", a.instance_id, exc)
                continue
            requested = self.queue.now

            def ready(inst=inst, requested=requested):
                self.deploy_times[inst.instance_id] = self.queue.now - requested
                self.record.event(self.queue.now, "deployed", inst.instance_id, inst.host_uav_id)
            self.queue.schedule(inst.ready_at, ready)

    def _schedule_migrations(self) -> None:
        for m in self.scenario.migrations:
            self.queue.schedule(m.at_s, lambda m=m: self._migrate(m.instance_id, m.dst_platform))

    def _migrate(self, instance_id: str, dst_id: str) -> None:
        src = self.platforms[self.host[instance_id]]
        dst = self.platforms[dst_id]
        acs = self.acs[instance_id]
        entry = {"instance_id": instance_id, "src": src.uav_id, "dst": dst_id,
                 "started_at": self.queue.now, "fleet_size": acs.fleet_size}
        self.migrations.append(entry)
        self.record.event(self.queue.now, "migration_start", instance_id, f"{src.uav_id}->{dst_id}")
        original_suspend = acs.suspend

        def suspend():
            entry["hash_before"] = acs.registry.state_hash()
            entry["down_at"] = self.queue.now
            self.record.event(self.queue.now, "service_down", instance_id)
            original_suspend()
        acs.suspend = suspend

        def done(report: MigrationReport, error):
            acs.suspend = original_suspend
            entry["report"] = report
            entry["error"] = None if error is None else type(error).__name__
            if error is None:
                self.host[instance_id] = dst_id
                entry["up_at"] = self.queue.now
                entry["hash_after"] = acs.restored_hash
                self.record.event(self.queue.now, "service_up", instance_id, dst_id)
            else:
                self.record.event(self.queue.now, "migration_aborted", instance_id,
                                  entry["error"])
        try:
            reallocate_app(src, dst, instance_id, self.link, acs.fleet_size, on_done=done)
        except CapacityExceeded as exc:
            acs.suspend = original_suspend
            entry["error"] = type(exc).__name__
            self.record.event(self.queue.now, "migration_rejected", instance_id, entry["error"])

    # -- stepping -------------------------------------------------------
    def _tick(self, k: int) -> None:
        dt = self.scenario.dt
        for sys_id in sorted(self.agents):
            agent = self.agents[sys_id]
            if agent.state.mode in (Mode.ARMED, Mode.FLYING):
                agent.state = autopilot.step(agent.state, dt)
        at = (k + 1) * dt
        if at < self.duration:
            self.queue.schedule(at, lambda: self._tick(k + 1))

    def run(self) -> MetricsRecord:
        self._deploy_all()
        for sys_id in sorted(self.agents):
            self.agents[sys_id].boot()
        self._schedule_migrations()
        if self.scenario.dt < self.duration:
            self.queue.schedule(self.scenario.dt, lambda: self._tick(1))
        self.queue.run_until(self.duration)
        return self.collect()

    # -- metrics --------------------------------------------------------
    def traffic(self, members: list[int]) -> tuple[int, int]:
        """(bytes ACS->fleet, bytes fleet->ACS) for one fleet."""
        nodes = {uav_node(s) for s in members}
        plats = set(self.platforms)
        sent = sum(c.bytes_sent for (s, d), c in self.net.accounting.items()
                   if s in plats and d in nodes)
        received = sum(c.bytes_received for (s, d), c in self.net.accounting.items()
                       if s in nodes and d in plats)
        return sent, received

    def collect(self) -> MetricsRecord:
        rec = self.record
        now = self.queue.now
        for a in self.scenario.acs:
            members = self.fleets[a.fleet]
            if not members:
                continue
            sent, received = self.traffic(members)
            rec.traffic.append((len(members), "sent", sent))
            rec.traffic.append((len(members), "received", received))
        for uav_id in sorted(self.platforms):
            usage = self.platforms[uav_id].platform_usage()
            rec.usage.append((usage.instance_count, round(usage.cpu_pct, 6), usage.connection_drops))
        for m in self.migrations:
            report = m.get("report")
            if report is not None and m.get("error") is None:
                rec.migration.append((m["fleet_size"], round(report.reallocation_time_s, 6),
                                      round(report.downtime_s, 6), round(report.ratio, 6)))
        for instance_id in sorted(self.acs):
            acs = self.acs[instance_id]
            cfg = acs.config
            for sys_id, member in sorted(acs.registry.members.items()):
                tail = 0.0
                if member.last_heartbeat is not None:
                    tail = max(0.0, now - member.last_heartbeat - cfg.lost_after_s)
                rec.members.append((instance_id, sys_id, round(member.lost_time_s + tail, 6),
                                    member.last_rx is not None, member.mission_stage))
        rec.accounting = dict(self.net.accounting)
        rec.summary.update({
            "duration_s": self.duration,
            "seed": self.scenario.seed,
            "deploy_times_s": {k: round(v, 6) for k, v in sorted(self.deploy_times.items())},
            "deploy_failures": self.deploy_failures,
            "decode_errors": self.decode_errors,
            "no_route": self.no_route,
            "frames_received": sum(c.frames_received for (s, d), c in self.net.accounting.items()
                                   if d in self.platforms),
            "migrations": [_migration_doc(m) for m in self.migrations],
        })
        return rec


def _migration_doc(m: dict) -> dict:
    doc = {k: m[k] for k in ("instance_id", "src", "dst", "started_at", "fleet_size")}
    report = m.get("report")
    doc["error"] = m.get("error")
    if report is not None:
        doc.update(reallocation_s=round(report.reallocation_time_s, 6),
                   downtime_s=round(report.downtime_s, 6), ratio=round(report.ratio, 6),
                   bytes_transferred=round(report.bytes_transferred, 1))
    for key in ("down_at", "up_at", "hash_before", "hash_after"):
        if key in m:
            doc[key] = round(m[key], 6) if isinstance(m[key], float) else m[key]
    return doc


def run_scenario(scenario: Scenario, base_dir: Optional[Path] = None) -> MetricsRecord:
    return World(scenario, base_dir).run()


def expected_uplink_rate(cfg) -> float:
    """Bytes/s one UAV streams: heartbeat and telemetry frames at their rates."""
    return (frame_size(MsgId.HEARTBEAT) * cfg.heartbeat_hz
            + frame_size(MsgId.TELEMETRY) * cfg.telemetry_hz)


__all__ = ["World", "run_scenario", "HARNESS_MIGRATION", "MigrationConfig", "expected_uplink_rate"]
