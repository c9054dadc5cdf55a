"""Travel-plan driven reservation of radio, cloud and backhaul resources."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autopilot import FlightPlan, Mode, UavConfig, UavState, step
from .netem import CoverageParams, GroundNode, TerrainGrid, in_coverage


class NoCoverage(Exception):
    def __init__(self, uncovered: list[tuple[float, float]]):
        super().__init__(f"no attachment covers {uncovered}")
        self.uncovered = uncovered


@dataclass(frozen=True)
class Resources:
    radio_units: float = 0.0
    cloud_cpu_pct: float = 0.0
    backhaul_mbps: float = 0.0

    def __add__(self, other: "Resources") -> "Resources":
        return Resources(self.radio_units + other.radio_units,
                         self.cloud_cpu_pct + other.cloud_cpu_pct,
                         self.backhaul_mbps + other.backhaul_mbps)

    def as_array(self) -> np.ndarray:
        return np.array([self.radio_units, self.cloud_cpu_pct, self.backhaul_mbps])


RESOURCE_NAMES = ("radio_units", "cloud_cpu_pct", "backhaul_mbps")


@dataclass(frozen=True)
class ReservationWindow:
    node_id: str
    t_enter: float
    t_exit: float
    resources: Resources = Resources()
    uav_id: int = 0

    def __post_init__(self):
        if not self.t_enter < self.t_exit:
            raise ValueError(f"window must have t_enter < t_exit ({self.t_enter}, {self.t_exit})")

    def key(self) -> tuple:
        return (self.uav_id, self.node_id, self.t_enter, self.t_exit,
                self.resources.radio_units, self.resources.cloud_cpu_pct,
                self.resources.backhaul_mbps)

    def contains(self, t: float) -> bool:
        return self.t_enter <= t <= self.t_exit


def trajectory(plan: FlightPlan, cfg: UavConfig, dt: float = 1.0,
               max_steps: int = 1_000_000) -> list[tuple[float, float, float]]:
    """Sampled positions at t = 0, dt, 2dt ... until the plan is flown.

    The UAV starts on the first waypoint. Landing is not part of the route.
    """
    if not plan.waypoints:
        raise ValueError("empty flight plan")
    first = plan.waypoints[0]
    state = UavState(0, cfg, pos=first.pos, battery_pct=1e12, mode=Mode.FLYING,
                     plan=replace(plan, land_at_end=False))
    points = [state.pos]
    for _ in range(max_steps):
        if state.plan_exhausted and state.hold_left_s == 0:
            break
        state = step(state, dt)
        points.append(state.pos)
    else:
        raise RuntimeError("trajectory did not terminate")
    return points


def _runs(mask: Sequence[bool]) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def _run_interval(a: int, b: int, n: int, dt: float) -> tuple[float, float]:
    if a < b:
        return a * dt, b * dt
    # a lone covered tick still needs a non-empty window
    if b < n - 1:
        return a * dt, (a + 0.5) * dt
    return (a - 0.5) * dt, a * dt


def compute_residual_windows(plan: FlightPlan, cfg: UavConfig,
                             attachments: Sequence[GroundNode],
                             params: CoverageParams = CoverageParams(),
                             terrain: Optional[TerrainGrid] = None,
                             demand: Resources = Resources(),
                             dt: float = 1.0, uav_id: int = 0) -> list[ReservationWindow]:
    points = trajectory(plan, cfg, dt)
    n = len(points)
    if n == 1:
        # a plan with nothing to fly still occupies one tick
        points = points * 2
        n = 2
    covered_any = [False] * n
    windows = []
    for node in attachments:
        mask = [in_coverage(p, node, params, terrain) for p in points]
        for i, m in enumerate(mask):
            covered_any[i] |= m
        for a, b in _runs(mask):
            t0, t1 = _run_interval(a, b, n, dt)
            windows.append(ReservationWindow(node.node_id, t0, t1, demand, uav_id))
    holes = _runs([not c for c in covered_any])
    if holes:
        raise NoCoverage([(a * dt, b * dt) for a, b in holes])
    return sorted(windows, key=ReservationWindow.key)


# -- capacity check -----------------------------------------------------------

@dataclass(frozen=True)
class Conflict:
    node_id: str
    time: float
    overload: dict


@dataclass(frozen=True)
class PlanVerdict:
    accepted: bool
    conflict: Optional[Conflict] = None


def plan_resources(windows: Sequence[ReservationWindow], capacity: dict[str, Resources],
                   dt: float = 1.0) -> PlanVerdict:
    """Accept iff every node's summed demand fits its capacity at every tick."""
    if not windows:
        return PlanVerdict(True)
    first = math.ceil(min(w.t_enter for w in windows) / dt - 1e-9)
    last = math.floor(max(w.t_exit for w in windows) / dt + 1e-9)
    span = last - first + 1
    best: Optional[Conflict] = None
    for node in sorted({w.node_id for w in windows}):
        load = np.zeros((span + 1, 3))
        for w in windows:
            if w.node_id != node:
                continue
            a = math.ceil(w.t_enter / dt - 1e-9) - first
            b = math.floor(w.t_exit / dt + 1e-9) - first
            if a > b:
                continue
            load[a] += w.resources.as_array()
            load[b + 1] -= w.resources.as_array()
        usage = np.cumsum(load, axis=0)[:span]
        cap = capacity.get(node, Resources()).as_array()
        over = (usage > cap + 1e-9).any(axis=1)
        if over.any():
            k = int(np.argmax(over))
            t = (first + k) * dt
            if best is None or t < best.time:
                excess = {name: float(usage[k, j] - cap[j]) for j, name in enumerate(RESOURCE_NAMES)
                          if usage[k, j] > cap[j] + 1e-9}
                best = Conflict(node, t, excess)
    return PlanVerdict(best is None, best)


# -- adjustment ---------------------------------------------------------------

ACTION_KINDS = ("EXTEND", "SHRINK", "ADD", "REMOVE", "RELOCATE")


@dataclass(frozen=True)
class Action:
    kind: str
    old: Optional[ReservationWindow]
    new: Optional[ReservationWindow]
    delta: tuple = ()


@dataclass(frozen=True)
class AdjustmentPlan:
    actions: tuple[Action, ...] = ()

    def __len__(self) -> int:
        return len(self.actions)

    def to_json(self) -> str:
        return json.dumps([_action_doc(a) for a in self.actions], sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "old_node", "old_enter", "old_exit", "new_node", "new_enter",
                         "new_exit"])
        for a in self.actions:
            o, n = a.old, a.new
            writer.writerow([a.kind,
                             o.node_id if o else "", o.t_enter if o else "", o.t_exit if o else "",
                             n.node_id if n else "", n.t_enter if n else "", n.t_exit if n else ""])
        return buf.getvalue()


def _window_doc(w: Optional[ReservationWindow]):
    return None if w is None else asdict(w)


def _action_doc(a: Action) -> dict:
    return {"kind": a.kind, "old": _window_doc(a.old), "new": _window_doc(a.new),
            "delta": list(a.delta)}


def windows_to_json(windows: Sequence[ReservationWindow]) -> str:
    return json.dumps([asdict(w) for w in sorted(windows, key=ReservationWindow.key)],
                      sort_keys=True, indent=1)


def windows_to_csv(windows: Sequence[ReservationWindow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["uav_id", "node_id", "t_enter", "t_exit", *RESOURCE_NAMES])
    for w in sorted(windows, key=ReservationWindow.key):
        writer.writerow([w.uav_id, w.node_id, w.t_enter, w.t_exit,
                         *(getattr(w.resources, n) for n in RESOURCE_NAMES)])
    return buf.getvalue()


def _overlaps(a: ReservationWindow, b: ReservationWindow) -> bool:
    return a.t_enter <= b.t_exit and b.t_enter <= a.t_exit


def diff_windows(old: Sequence[ReservationWindow],
                 new: Sequence[ReservationWindow]) -> AdjustmentPlan:
    """Fewest actions turning ``old`` into ``new``.

    Unchanged windows cost nothing; a same-node overlapping pair becomes one
    EXTEND/SHRINK; a cross-node pair over the same interval becomes one
    RELOCATE; everything else is a REMOVE plus an ADD. Maximising the number
    of pairs therefore minimises the action count.
    """
    old = sorted(old, key=ReservationWindow.key)
    new = sorted(new, key=ReservationWindow.key)
    new_keys = {}
    for j, w in enumerate(new):
        new_keys.setdefault(w.key(), []).append(j)
    keep_old, keep_new = set(), set()
    for i, w in enumerate(old):
        slots = new_keys.get(w.key())
        if slots:
            keep_old.add(i)
            keep_new.add(slots.pop(0))
    rest_old = [i for i in range(len(old)) if i not in keep_old]
    rest_new = [j for j in range(len(new)) if j not in keep_new]

    pairs = []
    if rest_old and rest_new:
        weight = np.zeros((len(rest_old), len(rest_new)))
        for a, i in enumerate(rest_old):
            for b, j in enumerate(rest_new):
                o, n = old[i], new[j]
                if o.uav_id != n.uav_id:
                    continue
                if o.node_id == n.node_id and _overlaps(o, n):
                    weight[a, b] = 1.001
                elif (o.node_id != n.node_id and o.t_enter == n.t_enter
                      and o.t_exit == n.t_exit):
                    weight[a, b] = 1.0
        rows, cols = linear_sum_assignment(weight, maximize=True)
        pairs = [(rest_old[a], rest_new[b]) for a, b in zip(rows, cols) if weight[a, b] > 0]

    actions = []
    paired_old = {i for i, _ in pairs}
    paired_new = {j for _, j in pairs}
    for i, j in sorted(pairs):
        o, n = old[i], new[j]
        if o.node_id != n.node_id:
            actions.append(Action("RELOCATE", o, n, (n.node_id,)))
        else:
            kind = "EXTEND" if (n.t_exit - n.t_enter) >= (o.t_exit - o.t_enter) else "SHRINK"
            actions.append(Action(kind, o, n, (n.t_enter - o.t_enter, n.t_exit - o.t_exit)))
    for i in rest_old:
        if i not in paired_old:
            actions.append(Action("REMOVE", old[i], None))
    for j in rest_new:
        if j not in paired_new:
            actions.append(Action("ADD", None, new[j]))
    return AdjustmentPlan(tuple(actions))


def apply_adjustment(old: Sequence[ReservationWindow],
                     plan: AdjustmentPlan) -> list[ReservationWindow]:
    current = sorted(old, key=ReservationWindow.key)
    for action in plan.actions:
        if action.old is not None:
            current.remove(action.old)
        if action.new is not None:
            current.append(action.new)
    return sorted(current, key=ReservationWindow.key)


def adjust_resources(old_windows: Sequence[ReservationWindow], new_route: FlightPlan,
                     cfg: UavConfig, attachments: Sequence[GroundNode],
                     params: CoverageParams = CoverageParams(),
                     terrain: Optional[TerrainGrid] = None,
                     demand: Resources = Resources(), dt: float = 1.0,
                     uav_id: int = 0) -> AdjustmentPlan:
    """Recompute windows for a revised route and diff them against the old set.

    Raises :class:`NoCoverage` if the new route leaves coverage; the caller
    keeps the old reservation in that case.
    """
    new_windows = compute_residual_windows(new_route, cfg, attachments, params, terrain,
                                           demand, dt, uav_id)
    return diff_windows(old_windows, new_windows)
