"""UAV network service control: attachment policy, energy assurance, localization.

Every function here is a pure decision over its arguments.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autopilot import FlightPlan, UavConfig, UavState


class UnscError(Exception):
    pass


class EmptyCandidates(UnscError):
    pass


class TooFewAnchors(UnscError):
    pass


class DegenerateGeometry(UnscError):
    pass


class SscMode(str, enum.Enum):
    SSC1 = "SSC1"
    SSC2 = "SSC2"
    SSC3 = "SSC3"


@dataclass(frozen=True)
class AttachmentCandidate:
    node_id: str
    pos: tuple[float, float, float]
    capacity: float = 1.0
    distance_m: float = 0.0
    los: bool = True
    residual_s: float = 0.0
    # optional analytics enrichment, carried but not scored
    expected_load: Optional[float] = None

    def __post_init__(self):
        if self.distance_m < 0:
            raise ValueError("distance must be >= 0")


@dataclass(frozen=True)
class SscDecision:
    mode: SscMode
    node_id: str


@dataclass(frozen=True)
class RankWeights:
    los: float = 0.5
    dist: float = 0.3
    residual: float = 0.2


def candidate_scores(candidates: Sequence[AttachmentCandidate],
                     weights: RankWeights = RankWeights()) -> list[float]:
    d_max = max(c.distance_m for c in candidates)
    r_max = max(c.residual_s for c in candidates)
    scores = []
    for c in candidates:
        dist_term = 1.0 - c.distance_m / d_max if d_max > 0 else 1.0
        res_term = c.residual_s / r_max if r_max > 0 else 0.0
        scores.append(weights.los * float(c.los) + weights.dist * dist_term
                      + weights.residual * res_term)
    return scores


def uprc_rank_attachments(uav_pos, candidates: Sequence[AttachmentCandidate],
                          weights: RankWeights = RankWeights(), *,
                          anchor_onboard: bool = False, critical: bool = False,
                          ) -> tuple[list[AttachmentCandidate], SscDecision]:
    """Order attachment points best-first and pick the session continuity mode.

    ``distance_m`` of zero on a candidate is filled in from ``uav_pos``.
    """
    if not candidates:
        raise EmptyCandidates("no attachment candidates")
    filled = [c if c.distance_m > 0 or uav_pos is None else
              replace(c, distance_m=math.dist(uav_pos, c.pos)) for c in candidates]
    scores = candidate_scores(filled, weights)
    order = sorted(range(len(filled)), key=lambda i: (-scores[i], filled[i].node_id))
    ranked = [filled[i] for i in order]
    if anchor_onboard:
        mode = SscMode.SSC1
    elif critical:
        mode = SscMode.SSC3
    else:
        mode = SscMode.SSC2
    return ranked, SscDecision(mode, ranked[0].node_id)


# -- service assurance -------------------------------------------------------

@dataclass(frozen=True)
class EnergyProjection:
    uav_id: int
    current_battery_pct: float
    projected_end_pct: float
    reserve_threshold_pct: float = 20.0
    remaining_plan: FlightPlan = field(default_factory=FlightPlan)

    @property
    def at_risk(self) -> bool:
        return self.projected_end_pct < self.reserve_threshold_pct


def segment_time(a, b, cfg: UavConfig) -> float:
    """Flight time of a straight leg with horizontal-speed and climb caps."""
    length = math.dist(a, b)
    if length == 0:
        return 0.0
    return max(length / cfg.max_speed_ms, abs(b[2] - a[2]) / cfg.max_climb_ms)


def plan_drain(start, plan: FlightPlan, cfg: UavConfig) -> float:
    drain = 0.0
    here = tuple(start)
    legs = [w.pos for w in plan.waypoints]
    holds = sum(w.hold_s for w in plan.waypoints)
    if plan.land_at_end and plan.waypoints:
        last = plan.waypoints[-1]
        legs.append((last.x, last.y, 0.0))
    for there in legs:
        drain += cfg.drain_base_pcts * segment_time(here, there, cfg)
        drain += cfg.drain_k_pct_per_m * math.dist(here, there)
        here = there
    return drain + cfg.drain_base_pcts * holds


def nsa_project_energy(uav: UavState, remaining_plan: FlightPlan,
                       cfg: Optional[UavConfig] = None,
                       reserve_pct: float = 20.0) -> EnergyProjection:
    cfg = cfg or uav.config
    end = uav.battery_pct - plan_drain(uav.pos, remaining_plan, cfg)
    return EnergyProjection(uav.sys_id, uav.battery_pct, end, reserve_pct, remaining_plan)


@dataclass(frozen=True)
class Suggestion:
    uav_id: int
    replacement_id: Optional[int]
    projected_end_pct: Optional[float] = None
    outcome: str = "Replace"


def nsa_suggest_replacement(projections: Sequence[EnergyProjection],
                            parked_pool: Sequence[UavState],
                            policy: str = "next_waypoint") -> list[Suggestion]:
    """Pair each at-risk UAV with the fullest parked UAV that can take over.

    A candidate flies from its parking spot to the at-risk UAV's next
    waypoint and completes the remainder; it must still end at or above the
    reserve. At-risk UAVs are served in id order, each candidate at most once.
    """
    if policy != "next_waypoint":
        raise ValueError(f"unsupported rendezvous policy {policy!r}")
    free = sorted(parked_pool, key=lambda s: s.sys_id)
    out = []
    for proj in sorted(projections, key=lambda p: p.uav_id):
        if not proj.at_risk:
            continue
        best = None
        best_end = None
        for cand in free:
            if not proj.remaining_plan.waypoints:
                break
            end = nsa_project_energy(cand, proj.remaining_plan, cand.config,
                                     proj.reserve_threshold_pct).projected_end_pct
            if end < proj.reserve_threshold_pct:
                continue
            if best is None or cand.battery_pct > best.battery_pct:
                best, best_end = cand, end
        if best is None:
            out.append(Suggestion(proj.uav_id, None, None, "InfeasibleReplacement"))
        else:
            free = [c for c in free if c.sys_id != best.sys_id]
            out.append(Suggestion(proj.uav_id, best.sys_id, best_end))
    return out


# -- localization -------------------------------------------------------------

@dataclass(frozen=True)
class AnchorMeasurement:
    anchor: tuple[float, ...]
    range_m: float

    def __post_init__(self):
        if self.range_m < 0:
            raise ValueError("range must be >= 0")


@dataclass(frozen=True)
class PositionEstimate:
    point: tuple[float, ...]
    rms_residual_m: float
    iterations: int


def uls_estimate_position(measurements: Sequence[AnchorMeasurement],
                          max_iter: int = 50, step_tol: float = 1e-9,
                          collinear_tol: float = 1e-6) -> PositionEstimate:
    """Range-only multilateration by damped Gauss-Newton from the anchor centroid."""
    if len(measurements) < 3:
        raise TooFewAnchors(f"need at least 3 anchors, got {len(measurements)}")
    anchors = np.array([m.anchor for m in measurements], dtype=float)
    ranges = np.array([m.range_m for m in measurements], dtype=float)
    dim = anchors.shape[1]
    centroid = anchors.mean(axis=0)
    spread = np.linalg.svd(anchors - centroid, compute_uv=False)
    if spread[0] == 0 or len(spread) < dim or spread[dim - 1] / spread[0] < collinear_tol:
        raise DegenerateGeometry("anchors do not span the solution space")

    def residuals(p):
        return np.linalg.norm(anchors - p, axis=1) - ranges

    x = centroid.copy()
    r = residuals(x)
    cost = r @ r
    lam = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        diff = x - anchors
        dist = np.linalg.norm(diff, axis=1)
        dist[dist == 0] = 1e-12
        jac = diff / dist[:, None]
        jtj = jac.T @ jac
        grad = jac.T @ r
        while True:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), -grad)
            trial = x + step
            r_trial = residuals(trial)
            cost_trial = r_trial @ r_trial
            if cost_trial <= cost or lam > 1e12:
                break
            lam *= 10
        if cost_trial <= cost:
            x, r, cost = trial, r_trial, cost_trial
            lam = max(lam / 10, 1e-12)
        if np.linalg.norm(step) < step_tol:
            break
    return PositionEstimate(tuple(float(v) for v in x), float(math.sqrt(cost / len(ranges))), it)
