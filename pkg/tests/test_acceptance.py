"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import hashlib
import math
import random
import time

import pytest

from skyedge.harness import run_experiment
from skyedge.harness.experiments import E3_SIZES
from skyedge.orchestrator import (apply_adjustment, adjust_resources, compute_residual_windows,
                                  plan_resources)
from skyedge.unsc import nsa_suggest_replacement, uls_estimate_position
from skyedge.wire import (AckResult, Cmd, Command, CommandAck, Heartbeat, ProtocolError,
                          Reassign, Telemetry, crc16, decode_frame, encode_frame)

from test_orchestrator import CFG, DEMAND, brute_verdict, grid_nodes, random_route
from test_orchestrator import test_chord_window_length as chord_case
from test_unsc import grid_oracle, noiseless, oracle_suggest, random_fleet, simulate
from test_wire import crc16_bitwise


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def e1():
    t0 = time.perf_counter()
    rec = run_experiment("e1")
    return rec.summary["experiment"], time.perf_counter() - t0


def test_1_table_reproduction(e1, report):
    t, wall = e1
    ok = (t["deployment_s"] == 3.894
          and abs(t["reallocation_s"] - 51.963) <= 0.01 * 51.963
          and abs(t["downtime_s"] - 6.415) <= 0.01 * 6.415
          and 0.10 <= t["ratio"] <= 0.14
          and wall < 10.0)
    report(1, "deployment/reallocation/downtime", ok,
           f"deploy {t['deployment_s']} s, realloc {t['reallocation_s']:.3f} s, "
           f"downtime {t['downtime_s']:.3f} s, ratio {t['ratio']:.4f}, wall {wall:.2f} s")


def test_2_capacity_shape(report):
    rows = run_experiment("e2").summary["experiment"]["rows"]
    linear = all(r["cpu_pct"] == pytest.approx(1.43 * r["instances"], abs=1e-9)
                 for r in rows if r["instances"] <= 60)
    last = rows[-1]
    ok = (linear and last["instances"] == 61 and "CapacityExceeded" in last["deploy_errors"]
          and last["drops"] > 0 and all(r["drops"] == 0 for r in rows[:-1]))
    report(2, "cpu linear in instances, 61st rejected", ok,
           f"cpu@60 {rows[-2]['cpu_pct']}, n=61 errors {last['deploy_errors']} "
           f"drops {last['drops']}")


def test_3_traffic_shape(report):
    t = run_experiment("e3").summary["experiment"]
    fit = t["received_fit"]
    ok = (fit["r2"] > 0.99 and fit["slope"] > 0 and fit["max_rel_residual"] < 0.01
          and t["sent_over_received"] < 0.02 and t["max_rate_rel_err"] < 0.01
          and len(t["per_uav_rate_Bps"]) == len(E3_SIZES))
    report(3, "received bytes linear in fleet size", ok,
           f"R2 {fit['r2']:.6f}, sent/recv {t['sent_over_received']:.4f}, "
           f"per-UAV rate err {t['max_rate_rel_err']:.4f} vs {t['oracle_rate_Bps']} B/s")


def random_body(rng):
    kind = rng.randrange(5)
    i32 = lambda: rng.randint(-2**31, 2**31 - 1)
    if kind == 0:
        return Heartbeat(rng.randrange(256), rng.randrange(256))
    if kind == 1:
        return Telemetry(i32(), i32(), i32(), rng.randint(-2**15, 2**15 - 1),
                         rng.randint(-2**15, 2**15 - 1), rng.randint(-2**15, 2**15 - 1),
                         rng.randrange(2**16), rng.randint(0, 10000))
    if kind == 2:
        return Command(rng.choice(list(Cmd)), rng.randrange(2**16), i32(), i32(), i32(), i32())
    if kind == 3:
        return CommandAck(rng.randrange(256), rng.randrange(2**16), rng.choice(list(AckResult)))
    return Reassign(bytes(rng.randrange(256) for _ in range(4)), rng.randrange(2**16))


def test_4_protocol_suite(report):
    rng = random.Random(4)
    trips = 0
    for _ in range(10_000):
        seq, sys_id, body = rng.randrange(256), rng.randrange(256), random_body(rng)
        f = decode_frame(encode_frame(seq, sys_id, body))
        trips += (f.seq, f.sys_id, f.body) == (seq, sys_id, body)
    flips = rejected = 0
    for body in (Telemetry(123, -456, 7890, 1, -2, 3, 9000, 5000), Command(Cmd.GOTO, 7, 1, 2, 3, 4)):
        raw = encode_frame(9, 3, body)
        for bit in range(len(raw) * 8):
            bad = bytearray(raw)
            bad[bit // 8] ^= 1 << (bit % 8)
            flips += 1
            try:
                decode_frame(bytes(bad))
            except ProtocolError:
                rejected += 1
    check = crc16(b"123456789") == crc16_bitwise(b"123456789") == 0x29B1
    ok = trips == 10_000 and rejected == flips and check
    report(4, "codec round-trip, bit flips, check value", ok,
           f"{trips}/10000 round-trips, {rejected}/{flips} flips rejected, crc check {check}")


def test_5_uls(report):
    anchors = [(0.0, 0.0), (100.0, 0.0), (0.0, 100.0)]
    truth = (30.0, 40.0)
    est = uls_estimate_position(noiseless(anchors, truth))
    oracle = grid_oracle(anchors, [math.dist(a, truth) for a in anchors])
    err = math.dist(est.point, oracle)
    study = run_experiment("uls").summary["experiment"]
    ok = err < 1e-6 and study["trials"] == 200 and all(study["monotone"].values())
    report(5, "localization oracle and noise study", ok,
           f"oracle error {err:.2e} m, monotone by sigma {study['monotone']}")


def test_6_nsa(report):
    emitted = sound = agree = 0
    worst = math.inf
    for seed in range(100):
        rng = random.Random(5000 + seed)
        projs, pool = random_fleet(rng)
        got = nsa_suggest_replacement(projs, pool)
        agree += [(s.uav_id, s.replacement_id) for s in got] == oracle_suggest(projs, pool)
        by_id = {c.sys_id: c for c in pool}
        plans = {p.uav_id: p for p in projs}
        for s in got:
            if s.replacement_id is None:
                continue
            emitted += 1
            p = plans[s.uav_id]
            margin = simulate(by_id[s.replacement_id], p.remaining_plan).battery_pct \
                - p.reserve_threshold_pct
            worst = min(worst, margin)
            sound += margin >= -0.1
    ok = agree == 100 and sound == emitted and emitted > 0
    report(6, "replacement soundness and oracle agreement", ok,
           f"{agree}/100 fleets match oracle, {sound}/{emitted} replacements sound, "
           f"worst margin {worst:.3f} points")


def test_7_orchestrator(report):
    from skyedge.orchestrator import ReservationWindow, Resources
    verdicts = sound = 0
    for seed in range(100):
        rng = random.Random(seed)
        windows = []
        for _ in range(rng.randint(1, 8)):
            t0 = rng.randint(0, 80) / 2
            windows.append(ReservationWindow(rng.choice("abc"), t0, t0 + rng.randint(1, 60) / 2,
                                             Resources(rng.randint(0, 3), rng.choice([10, 25, 40]),
                                                       rng.uniform(0, 5))))
        capacity = {n: Resources(4, 100, 10) for n in "abc"[:rng.randint(2, 3)]}
        v = plan_resources(windows, capacity)
        ok, where = brute_verdict(windows, capacity)
        verdicts += v.accepted == ok and (ok or (v.conflict.node_id, v.conflict.time) == where)

        nodes = grid_nodes()
        old_route = random_route(rng)
        new_route = random_route(rng)
        old = compute_residual_windows(old_route, CFG, nodes, demand=DEMAND)
        adj = adjust_resources(old, new_route, CFG, nodes, demand=DEMAND)
        sound += apply_adjustment(old, adj) == compute_residual_windows(new_route, CFG, nodes,
                                                                        demand=DEMAND)
    chords = 0
    for offset, alt in [(0.0, 20.0), (300.0, 20.0), (450.0, 60.0), (450.0, 0.0)]:
        try:
            chord_case(offset, alt)
            chords += 1
        except AssertionError:
            pass
    ok = verdicts == 100 and sound == 100 and chords == 4
    report(7, "plan verdicts, adjustment soundness, chord windows", ok,
           f"{verdicts}/100 verdicts, {sound}/100 adjustments exact, {chords}/4 chords within 2 ticks")


def test_8_migration_transparency(e1, report):
    t, _ = e1
    ok = (t["all_reattached"] and t["hash_unchanged"]
          and t["max_lost_time_s"] <= t["lost_time_budget_s"])
    report(8, "fleet survives reallocation", ok,
           f"max LOST {t['max_lost_time_s']} s <= budget {t['lost_time_budget_s']} s, "
           f"reattached {t['all_reattached']}, hash unchanged {t['hash_unchanged']}")


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.suffix == ".csv"}


def test_9_determinism(tmp_path, report):
    same = {}
    for tag in ("e1", "e2", "e3", "uls"):
        run_experiment(tag, 1, 1, tmp_path / tag / "a")
        run_experiment(tag, 1, 1, tmp_path / tag / "b")
        run_experiment(tag, 1, 2, tmp_path / tag / "c")
        a, b, c = (digest(tmp_path / tag / k) for k in "abc")
        same[tag] = bool(a) and a == b == c
    report(9, "byte-identical CSVs across reruns and worker counts", all(same.values()),
           str(same))
