import csv
import io
import json
import math
import random

import pytest

from skyedge.autopilot import FlightPlan, UavConfig, Waypoint
from skyedge.netem import CoverageParams, GroundNode, in_coverage
from skyedge.orchestrator import (AdjustmentPlan, NoCoverage, ReservationWindow, Resources,
                                  adjust_resources, apply_adjustment, compute_residual_windows,
                                  diff_windows, plan_resources, trajectory, windows_to_csv,
                                  windows_to_json)

CFG = UavConfig()
DEMAND = Resources(1.0, 20.0, 2.0)


def hover(seconds, pos=(0.0, 0.0, 20.0)):
    return FlightPlan((Waypoint(*pos, hold_s=seconds),), "hover", land_at_end=False)


def line_nodes(y=0.0, xs=range(-3000, 3001, 1000)):
    return [GroundNode(f"line{x:+05d}", (float(x), y, 0.0)) for x in xs]


def test_window_rejects_empty_interval():
    with pytest.raises(ValueError):
        ReservationWindow("a", 5.0, 5.0)


def test_stationary_uav_single_window():
    ws = compute_residual_windows(hover(600), CFG, [GroundNode("a", (0.0, 0.0, 0.0))],
                                  demand=DEMAND)
    assert [(w.node_id, w.t_enter, w.t_exit) for w in ws] == [("a", 0.0, 600.0)]
    assert ws[0].resources == DEMAND


def test_outside_all_coverage():
    with pytest.raises(NoCoverage) as err:
        compute_residual_windows(hover(600), CFG, [GroundNode("far", (5000.0, 0.0, 0.0))])
    assert err.value.uncovered == [(0.0, 600.0)]


def test_empty_plan_rejected():
    with pytest.raises(ValueError):
        compute_residual_windows(FlightPlan(()), CFG, [GroundNode("a", (0, 0, 0))])


@pytest.mark.parametrize("offset,alt", [(0.0, 20.0), (300.0, 20.0), (450.0, 60.0), (450.0, 0.0)])
def test_chord_window_length(offset, alt):
    plan = FlightPlan((Waypoint(-3000.0, 0.0, alt), Waypoint(3000.0, 0.0, alt)), "pass",
                      land_at_end=False)
    probe = GroundNode("probe", (0.0, offset, 0.0))
    ws = compute_residual_windows(plan, CFG, line_nodes() + [probe])
    probe_ws = [w for w in ws if w.node_id == "probe"]
    assert len(probe_ws) == 1
    r = CoverageParams().radius(alt)
    chord = 2 * math.sqrt(r * r - offset * offset)
    length = probe_ws[0].t_exit - probe_ws[0].t_enter
    assert abs(length - chord / CFG.max_speed_ms) <= 2 * 1.0


def check_agreement(plan, nodes, ws, dt=1.0):
    pts = trajectory(plan, CFG, dt)
    by_id = {n.node_id: n for n in nodes}
    for k, p in enumerate(pts):
        t = k * dt
        holders = [w for w in ws if w.contains(t)]
        assert holders, f"tick {t} has no window"
        for w in holders:
            assert in_coverage(p, by_id[w.node_id])


def random_route(rng, n=4):
    return FlightPlan(tuple(Waypoint(rng.uniform(-2500, 2500), rng.uniform(-300, 300),
                                     rng.uniform(0, 60)) for _ in range(n)), "r",
                      land_at_end=False)


def grid_nodes():
    return [GroundNode(f"g{i}{j}", (x, y, 0.0)) for i, x in enumerate(range(-3000, 3001, 700))
            for j, y in enumerate((-400.0, 0.0, 400.0))]


@pytest.mark.parametrize("seed", range(5))
def test_windows_agree_with_trajectory(seed):
    rng = random.Random(seed)
    plan = random_route(rng)
    nodes = grid_nodes()
    ws = compute_residual_windows(plan, CFG, nodes)
    check_agreement(plan, nodes, ws)
    # windows for one UAV at one node are disjoint
    for a in ws:
        for b in ws:
            if a is not b and a.node_id == b.node_id:
                assert a.t_exit < b.t_enter or b.t_exit < a.t_enter


def test_windows_deterministic():
    rng = random.Random(4)
    plan = random_route(rng)
    a = compute_residual_windows(plan, CFG, grid_nodes(), demand=DEMAND)
    b = compute_residual_windows(plan, CFG, grid_nodes(), demand=DEMAND)
    assert windows_to_json(a) == windows_to_json(b)
    assert windows_to_csv(a) == windows_to_csv(b)


# -- plan_resources -----------------------------------------------------------

def test_ample_capacity_accepted():
    ws = compute_residual_windows(hover(60), CFG, [GroundNode("a", (0, 0, 0))], demand=DEMAND)
    assert plan_resources(ws, {"a": Resources(10, 100, 100)}).accepted


def test_two_heavy_windows_conflict_at_enter():
    w = ReservationWindow("a", 12.0, 40.0, Resources(cloud_cpu_pct=60.0))
    v = plan_resources([w, w], {"a": Resources(10, 100, 100)})
    assert not v.accepted
    assert (v.conflict.node_id, v.conflict.time) == ("a", 12.0)
    assert v.conflict.overload == {"cloud_cpu_pct": pytest.approx(20.0)}


def brute_verdict(windows, capacity):
    lo = math.ceil(min(w.t_enter for w in windows))
    hi = math.floor(max(w.t_exit for w in windows))
    for t in range(lo, hi + 1):
        for node in sorted({w.node_id for w in windows}):
            cap = capacity.get(node, Resources())
            tot = Resources()
            for w in windows:
                if w.node_id == node and w.t_enter <= t <= w.t_exit:
                    tot = tot + w.resources
            if (tot.radio_units > cap.radio_units + 1e-9
                    or tot.cloud_cpu_pct > cap.cloud_cpu_pct + 1e-9
                    or tot.backhaul_mbps > cap.backhaul_mbps + 1e-9):
                return False, (node, float(t))
    return True, None


@pytest.mark.parametrize("seed", range(100))
def test_plan_resources_matches_tick_brute_force(seed):
    rng = random.Random(seed)
    nodes = ["a", "b", "c"]
    windows = []
    for _ in range(rng.randint(1, 8)):
        t0 = rng.randint(0, 80) / 2
        t1 = t0 + rng.randint(1, 60) / 2
        windows.append(ReservationWindow(rng.choice(nodes), t0, t1,
                                         Resources(rng.randint(0, 3), rng.choice([10, 25, 40]),
                                                   rng.uniform(0, 5))))
    capacity = {n: Resources(4, 100, 10) for n in nodes[:rng.randint(2, 3)]}
    v = plan_resources(windows, capacity)
    ok, where = brute_verdict(windows, capacity)
    assert v.accepted == ok
    if not ok:
        assert (v.conflict.node_id, v.conflict.time) == where


# -- adjustment ---------------------------------------------------------------

def test_identical_route_no_actions():
    nodes = grid_nodes()
    plan = random_route(random.Random(1))
    old = compute_residual_windows(plan, CFG, nodes)
    assert len(adjust_resources(old, plan, CFG, nodes)) == 0


def test_extended_hover_single_extend():
    node = [GroundNode("a", (0.0, 0.0, 0.0))]
    old = compute_residual_windows(hover(600), CFG, node)
    adj = adjust_resources(old, hover(660), CFG, node)
    assert [a.kind for a in adj.actions] == ["EXTEND"]
    assert adj.actions[0].delta == (0.0, 60.0)


def test_handover_relocates():
    old = compute_residual_windows(hover(300), CFG, [GroundNode("A", (0.0, 0.0, 0.0))])
    new_nodes = [GroundNode("B", (100.0, 0.0, 0.0))]
    adj = adjust_resources(old, hover(300), CFG, new_nodes)
    expected = compute_residual_windows(hover(300), CFG, new_nodes)
    assert [a.kind for a in adj.actions] == ["RELOCATE"]
    assert apply_adjustment(old, adj) == expected


def test_uncovered_new_route_rejected():
    node = [GroundNode("a", (0.0, 0.0, 0.0))]
    old = compute_residual_windows(hover(60), CFG, node)
    with pytest.raises(NoCoverage):
        adjust_resources(old, hover(60, pos=(9000.0, 0.0, 20.0)), CFG, node)


@pytest.mark.parametrize("seed", range(20))
def test_adjustment_soundness(seed):
    rng = random.Random(100 + seed)
    nodes = grid_nodes()
    old_route = random_route(rng)
    wps = list(old_route.waypoints)
    k = rng.randrange(len(wps))
    wps[k] = Waypoint(rng.uniform(-2500, 2500), rng.uniform(-300, 300), rng.uniform(0, 60))
    new_route = FlightPlan(tuple(wps), "r2", land_at_end=False)
    old = compute_residual_windows(old_route, CFG, nodes, demand=DEMAND)
    adj = adjust_resources(old, new_route, CFG, nodes, demand=DEMAND)
    assert apply_adjustment(old, adj) == compute_residual_windows(new_route, CFG, nodes,
                                                                  demand=DEMAND)


def min_actions(old, new):
    "Exhaustive search over all legal pairings."
    best = [len(old) + len(new)]

    def pair_cost(o, n):
        if o.key() == n.key():
            return 0
        if o.node_id == n.node_id and o.t_enter <= n.t_exit and n.t_enter <= o.t_exit:
            return 1
        if o.node_id != n.node_id and (o.t_enter, o.t_exit) == (n.t_enter, n.t_exit):
            return 1
        return None

    def go(i, used, cost):
        if cost >= best[0]:
            return
        if i == len(old):
            best[0] = min(best[0], cost + len(new) - len(used))
            return
        go(i + 1, used, cost + 1)
        for j, n in enumerate(new):
            if j not in used:
                c = pair_cost(old[i], n)
                if c is not None:
                    go(i + 1, used | {j}, cost + c)

    go(0, frozenset(), 0)
    return best[0]


def random_windows(rng, n):
    out = []
    for _ in range(n):
        t0 = float(rng.choice([0, 10, 20, 30]))
        out.append(ReservationWindow(rng.choice("AB"), t0, t0 + rng.choice([5, 10, 15])))
    return out


@pytest.mark.parametrize("seed", range(60))
def test_diff_is_minimal_and_sound(seed):
    rng = random.Random(seed)
    old = random_windows(rng, rng.randint(0, 4))
    new = random_windows(rng, rng.randint(0, 4))
    adj = diff_windows(old, new)
    assert len(adj) == min_actions(old, new)
    assert apply_adjustment(old, adj) == sorted(new, key=ReservationWindow.key)


def test_plan_serialization():
    old = [ReservationWindow("A", 0.0, 10.0, DEMAND, 1)]
    new = [ReservationWindow("A", 0.0, 15.0, DEMAND, 1), ReservationWindow("B", 20.0, 30.0, DEMAND, 1)]
    adj = diff_windows(old, new)
    doc = json.loads(adj.to_json())
    assert sorted(a["kind"] for a in doc) == ["ADD", "EXTEND"]
    rows = list(csv.DictReader(io.StringIO(adj.to_csv())))
    assert {r["kind"] for r in rows} == {"ADD", "EXTEND"}
    assert adj.to_json() == diff_windows(old, new).to_json()
    assert AdjustmentPlan().to_json() == "[]"
    back = json.loads(windows_to_json(new))
    assert [w["node_id"] for w in back] == ["A", "B"]
    assert windows_to_csv(new).splitlines()[0] == (
        "uav_id,node_id,t_enter,t_exit,radio_units,cloud_cpu_pct,backhaul_mbps")
