import math

import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from skyedge.acs import (AcsConfig, AcsInstance, DispatchStatus, EmptyPlan, FleetRegistry,
                         Liveness, TargetLost, UnexpectedMessage, UnknownPeer, fleet_snapshot,
                         ingest_frame)
from skyedge.autopilot import (FlightPlan, Mode, UavState, Waypoint, build_telemetry,
                               handle_command)
from skyedge.harness.scenario import parse_scenario
from skyedge.harness.sim import World
from skyedge.netem import EventQueue
from skyedge.wire import (AckResult, Cmd, Command, CommandAck, Frame, Heartbeat, Reassign,
                          Telemetry, decode_frame, pack_ipv4)


def frame(sys_id, body, seq=0):
    return Frame(seq, sys_id, body)


# -- registry -------------------------------------------------------------------

def test_heartbeat_flips_lost_to_live():
    reg = FleetRegistry.for_roster([1])
    assert reg.liveness(1, 0.0, AcsConfig()) == Liveness.LOST
    ingest_frame(reg, frame(1, Heartbeat(1, 0)), 10.0)
    assert reg.liveness(1, 10.0, AcsConfig()) == Liveness.LIVE
    assert reg.liveness(1, 13.0, AcsConfig()) == Liveness.LIVE
    assert reg.liveness(1, 13.001, AcsConfig()) == Liveness.LOST


def test_ack_clears_pending():
    reg = FleetRegistry.for_roster([1])
    reg.pending[7] = {"sys_id": 1, "cmd": int(Cmd.GOTO), "params": [0, 0, 0, 0], "attempts": 1}
    cleared = ingest_frame(reg, frame(1, CommandAck(Cmd.GOTO, 7, AckResult.OK)), 1.0)
    assert cleared["result"] == AckResult.OK
    assert reg.pending == {}
    # a duplicate ack finds nothing to clear and is harmless
    assert ingest_frame(reg, frame(1, CommandAck(Cmd.GOTO, 7, AckResult.OK)), 1.1) is None


def test_unknown_peer_leaves_registry():
    reg = FleetRegistry.for_roster([1, 2])
    before = reg.state_hash()
    with pytest.raises(UnknownPeer):
        ingest_frame(reg, frame(99, Heartbeat(0, 0)), 1.0)
    assert reg.unknown_frames == 1
    reg.unknown_frames = 0
    assert reg.state_hash() == before


@pytest.mark.parametrize("body", [Reassign(pack_ipv4("10.0.0.1"), 5801),
                                  Command(Cmd.ARM, 1, 0, 0, 0, 0)])
def test_downlink_bodies_rejected(body):
    with pytest.raises(UnexpectedMessage):
        ingest_frame(FleetRegistry.for_roster([1]), frame(1, body), 0.0)


def test_snapshot_units_and_lost_members():
    assert fleet_snapshot(FleetRegistry()) == []
    reg = FleetRegistry.for_roster([1, 2])
    ingest_frame(reg, frame(1, Telemetry(100, -250, 12345, 300, 400, 0, 9000, 7550)), 1.0)
    snap = fleet_snapshot(reg, 1.0)
    assert snap[0]["pos"] == [1.0, -2.5, 12.345]
    assert snap[0]["speed"] == pytest.approx(5.0)
    assert (snap[0]["heading"], snap[0]["battery"]) == (90.0, 75.5)
    assert snap[1] == {"sys_id": 2, "liveness": "LOST", "pos": None, "speed": None,
                       "heading": None, "battery": None}


def test_registry_json_round_trip():
    reg = FleetRegistry.for_roster([3, 1])
    ingest_frame(reg, frame(1, Heartbeat(2, 0)), 4.5)
    reg.pending[2] = {"sys_id": 1, "cmd": 1, "params": [0, 0, 0, 0], "attempts": 2}
    back = FleetRegistry.from_json(reg.to_json())
    assert back == reg
    assert back.state_hash() == reg.state_hash()


def test_take_cseq_skips_in_flight_and_zero():
    reg = FleetRegistry()
    reg.next_cseq = 0xFFFF
    reg.pending[1] = {}
    assert reg.take_cseq() == 0xFFFF
    assert reg.take_cseq() == 2


# -- command dispatch against a scripted UAV --------------------------------------

class Rig:
    """ACS instance plus a UAV that answers commands after a fixed delay."""

    def __init__(self, roster=(1,), deliver=lambda n: True, delay=0.01):
        self.q = EventQueue()
        self.sent = []
        self.uav = {s: UavState(s) for s in roster}
        self.deliver = deliver
        self.delay = delay
        self.acs = AcsInstance("acs", roster, self.q, self.send)
        self.acs.start(("10.0.0.1", 5801), 0.0)
        for s in roster:
            self.acs.on_frame(frame(s, Heartbeat(0, 0)))

    def send(self, sys_id, raw):
        self.sent.append((self.q.now, sys_id, decode_frame(raw).body))
        if not self.deliver(len(self.sent)):
            return
        body = decode_frame(raw).body
        if isinstance(body, Command):
            self.uav[sys_id], ack = handle_command(self.uav[sys_id], body)
            self.q.after(self.delay, lambda: self.acs.on_frame(frame(sys_id, ack)))


def test_lossless_one_transmission():
    rig = Rig()
    h = rig.acs.issue_command(1, Cmd.ARM)
    rig.q.run_until(2.0)
    assert h.status == DispatchStatus.OK and h.transmissions == 1
    assert len(rig.sent) == 1


def test_rejected_ack_resolves_rejected():
    rig = Rig()
    h = rig.acs.issue_command(1, Cmd.TAKEOFF, 10)
    rig.q.run_until(1.0)
    assert h.status == DispatchStatus.REJECTED


def test_total_loss_times_out_after_retries():
    rig = Rig(deliver=lambda n: False)
    h = rig.acs.issue_command(1, Cmd.ARM)
    rig.q.run_until(2.9)
    assert h.status == DispatchStatus.TIMEOUT
    assert h.transmissions == 4
    assert [t for t, _, _ in rig.sent] == pytest.approx([0.0, 0.5, 1.0, 1.5])
    assert rig.acs.registry.pending == {}


def test_target_lost_and_unknown():
    rig = Rig()
    rig.q.run_until(3.5)
    with pytest.raises(TargetLost):
        rig.acs.issue_command(1, Cmd.ARM)
    with pytest.raises(UnknownPeer):
        rig.acs.issue_command(42, Cmd.ARM)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=4, max_size=4), st.floats(0.01, 1.4))
def test_crossed_acks_never_double_apply(pattern, delay):
    "Retransmits crossing slow acks: one effect, one resolution, no error."
    rig = Rig(deliver=lambda n: pattern[(n - 1) % 4], delay=delay)
    h = rig.acs.issue_command(1, Cmd.ARM)
    seen = []
    h.callbacks.append(lambda hd: seen.append(hd.status))
    rig.q.run_until(5.0)
    assert len(seen) == 1
    if any(pattern):
        assert rig.uav[1].mode == Mode.ARMED
        assert rig.uav[1].seen_cseq.count(h.cseq) == 1


def test_plan_validation():
    rig = Rig()
    with pytest.raises(EmptyPlan):
        rig.acs.update_flight_path(1, FlightPlan(()))
    hs = rig.acs.update_flight_path(1, FlightPlan((Waypoint(1, 2, 3),)))
    assert len(hs) == 1 and hs[0].command.cmd == Cmd.GOTO
    assert (hs[0].command.p1, hs[0].command.p2, hs[0].command.p3) == (100, 200, 3000)


def test_on_migrated_broadcasts_once_per_member():
    rig = Rig(roster=tuple(range(1, 11)), deliver=lambda n: True)
    targets = rig.acs.on_migrated(("10.0.0.2", 5802))
    reassigns = [(s, b) for _, s, b in rig.sent if isinstance(b, Reassign)]
    assert targets == list(range(1, 11))
    assert sorted(s for s, _ in reassigns) == list(range(1, 11))
    assert all(b == Reassign(pack_ipv4("10.0.0.2"), 5802) for _, b in reassigns)


def test_suspend_restore_preserves_hash():
    rig = Rig(roster=(1, 2))
    rig.acs.issue_command(1, Cmd.ARM)
    before = rig.acs.state_hash()
    blob = rig.acs.snapshot()
    rig.acs.suspend()
    rig.acs.restore(blob, ("10.0.0.2", 5801), 1.0)
    assert rig.acs.restored_hash == before == rig.acs.state_hash()


# -- end to end over the simulated network ---------------------------------------

def world(members, duration=60.0, loss=0.0, migrations=(), platforms=1):
    plats = [{"uav_id": "edge-1", "address": "10.0.0.1"},
             {"uav_id": "edge-2", "address": "10.0.0.2"}][:platforms]
    return World(parse_scenario({
        "seed": 5, "duration_s": duration, "dt": 0.05, "link": {"loss_prob": loss},
        "platforms": plats,
        "fleets": [{"id": "f", "members": members}],
        "acs": [{"instance_id": "acs-1", "platform": "edge-1", "fleet": "f"}],
        "migrations": list(migrations),
    }))


def test_registry_converges_to_emulator_state():
    w = world([{"sys_id": 1, "pos": [3.0, 4.0, 0.0]}, {"sys_id": 2, "pos": [-1.0, 0.5, 0.0]}],
              duration=5.0)
    w.run()
    for entry in w.acs["acs-1"].fleet_snapshot():
        state = w.agents[entry["sys_id"]].state
        assert entry["liveness"] == "LIVE"
        assert entry["pos"] == pytest.approx(list(state.pos), abs=0.01)
        assert entry["battery"] == pytest.approx(state.battery_pct, abs=0.01)


def test_three_waypoint_plan_dispatched_in_order():
    plan = {"waypoints": [[0, 0, 10], [30, 0, 10], [30, 30, 15]], "land_at_end": True}
    w = world([{"sys_id": 1, "plan": plan}], duration=60.0)
    gotos = []
    orig = w.acs["acs-1"].send

    def spy(sys_id, raw):
        body = decode_frame(raw).body
        if isinstance(body, Command) and body.cmd == Cmd.GOTO and body.cseq not in \
                [g[1] for g in gotos]:
            gotos.append((w.queue.now, body.cseq, (body.p1, body.p2, body.p3),
                          w.agents[1].state.pos))
        orig(sys_id, raw)

    w.acs["acs-1"].send = spy
    w.run()
    assert [g[2] for g in gotos] == [(0, 0, 10000), (3000, 0, 10000), (3000, 3000, 15000)]
    # each GOTO after the first is sent once the previous waypoint was reached
    prev = [(0, 0, 10), (30, 0, 10)]
    for (_, _, _, pos), wp in zip(gotos[1:], prev):
        assert math.dist(pos, wp) <= 2.0 + 0.2
    assert w.agents[1].state.mode == Mode.LANDED
    assert w.acs["acs-1"].registry.members[1].mission_stage == "done"


def test_lossy_link_exactly_once_waypoints():
    plan = {"waypoints": [[0, 0, 10], [20, 0, 10], [20, 20, 10]]}
    w = world([{"sys_id": 1, "plan": plan}], duration=90.0, loss=0.3)
    w.run()
    st_ = w.agents[1].state
    assert st_.mode == Mode.LANDED
    # takeoff point, one waypoint per GOTO despite retransmits, then the landing point
    assert [wp.pos for wp in st_.plan.waypoints] == [
        (0.0, 0.0, 10.0), (0.0, 0.0, 10.0), (20.0, 0.0, 10.0), (20.0, 20.0, 10.0),
        (20.0, 20.0, 0.0)]
    assert len(set(st_.seen_cseq)) == len(st_.seen_cseq)


def test_member_missing_reassign_stays_on_old_endpoint():
    members = [{"sys_id": s} for s in (1, 2, 3)]
    w = world(members, duration=70.0, platforms=2,
              migrations=[{"instance_id": "acs-1", "dst_platform": "edge-2", "at_s": 5.0}])
    w.net.link_up = lambda src, dst: not (src == "edge-2" and dst == "uav-3")
    rec = w.run()
    mig = rec.summary["migrations"][0]
    acs = w.acs["acs-1"]
    assert w.agents[3].state.acs_endpoint == ("10.0.0.1", 5801)
    assert w.agents[1].state.acs_endpoint == ("10.0.0.2", 5801)
    cfg = acs.config
    t_check = mig["up_at"] + cfg.lost_after_s
    assert t_check < w.duration
    assert acs.registry.liveness(3, t_check, cfg) == Liveness.LOST
    assert acs.registry.liveness(1, w.duration, cfg) == Liveness.LIVE
    log = {e["sys_id"]: e for e in acs.reassign_log}
    assert log[3]["confirmed"] is False and log[3]["attempts"] == cfg.retries + 1
    assert log[1]["confirmed"] is True


def test_frames_from_outside_roster_counted():
    w = world([{"sys_id": 1}], duration=6.0)
    w.run()
    acs = w.acs["acs-1"]
    acs.on_frame(frame(77, Heartbeat(0, 0)))
    assert acs.registry.unknown_frames == 1
    assert acs.rejected_frames == 1


def test_build_telemetry_feeds_registry():
    reg = FleetRegistry.for_roster([1])
    s = UavState(1, pos=(12.34, -5.0, 20.0), battery_pct=88.8)
    ingest_frame(reg, frame(1, build_telemetry(s)), 0.0)
    assert fleet_snapshot(reg)[0]["pos"] == [12.34, -5.0, 20.0]
