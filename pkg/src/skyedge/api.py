"""HTTP/JSON control surfaces for the platform, the ACS and the UNSC.

Each factory wraps live objects that share one simulated event queue; the
handlers act at the queue's current time and never advance it.
"""
from __future__ import annotations

from typing import Optional, Union

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .acs import AcsInstance, EmptyPlan, TargetLost, UnknownPeer
from .autopilot import FlightPlan, UavConfig, UavState, Waypoint
from .edge_platform import (AppSpec, CapacityExceeded, LinkDown, MigrationInProgress,
                            NotFound, Platform, PlatformError, reallocate_app)
from .netem import LinkSpec
from .unsc import (AnchorMeasurement, AttachmentCandidate, EnergyProjection, RankWeights,
                   UnscError, nsa_project_energy, nsa_suggest_replacement,
                   uls_estimate_position, uprc_rank_attachments)
from .wire import Cmd


def _http(status: int, exc: Exception) -> HTTPException:
    return HTTPException(status, detail={"error": type(exc).__name__, "message": str(exc)})


# -- platform -----------------------------------------------------------------

class BlobApp:
    """Opaque application state for apps deployed over HTTP."""

    fleet_size = 0

    def __init__(self, state: bytes = b""):
        self.state = state
        self.running = False

    def start(self, endpoint, now) -> None:
        self.running = True

    def snapshot(self) -> bytes:
        return self.state

    def suspend(self) -> None:
        self.running = False

    def restore(self, blob: bytes, endpoint, now) -> None:
        self.state = blob

    def resume(self) -> None:
        self.running = True


class DeployRequest(BaseModel):
    instance_id: str
    port: Optional[int] = Field(None, ge=1, le=65535)
    state: str = ""


class ReallocateRequest(BaseModel):
    dst_uav: str
    fleet_size: Optional[int] = Field(None, ge=0)


def _instance_doc(inst) -> dict:
    return {"instance_id": inst.instance_id, "host": inst.host_uav_id,
            "endpoint": list(inst.endpoint), "status": inst.status.value,
            "ready_at": inst.ready_at}


def platform_api(platform: Platform, peers: dict[str, Platform],
                 link: LinkSpec = LinkSpec()) -> FastAPI:
    app = FastAPI(title=f"platform {platform.uav_id}")

    @app.post("/apps", status_code=201)
    def deploy(req: DeployRequest):
        try:
            inst = platform.deploy_app(AppSpec(req.instance_id, BlobApp(req.state.encode()),
                                               req.port))
        except CapacityExceeded as exc:
            raise _http(409, exc)
        except PlatformError as exc:
            raise _http(409, exc)
        return _instance_doc(inst)

    @app.delete("/apps/{instance_id}")
    def delete(instance_id: str):
        try:
            platform.delete_app(instance_id)
        except NotFound as exc:
            raise _http(404, exc)
        except MigrationInProgress as exc:
            raise _http(409, exc)
        return {"instance_id": instance_id, "status": "STOPPED"}

    @app.post("/apps/{instance_id}/reallocate", status_code=202)
    def reallocate(instance_id: str, req: ReallocateRequest):
        dst = peers.get(req.dst_uav)
        if dst is None or dst is platform:
            raise _http(404, NotFound(f"unknown destination {req.dst_uav!r}"))
        try:
            report = reallocate_app(platform, dst, instance_id, link, req.fleet_size)
        except NotFound as exc:
            raise _http(404, exc)
        except (CapacityExceeded, MigrationInProgress, LinkDown, PlatformError) as exc:
            raise _http(409, exc)
        return {"instance_id": instance_id, "src_uav": report.src_uav,
                "dst_uav": report.dst_uav, "started_at": report.started_at,
                "precopy_s": report.precopy_s, "downtime_s": report.downtime_s,
                "reallocation_time_s": report.reallocation_time_s, "ratio": report.ratio}

    @app.get("/usage")
    def usage():
        u = platform.platform_usage()
        return {"uav_id": platform.uav_id, "cpu_pct": u.cpu_pct,
                "instances": u.instance_count, "drops": u.connection_drops}

    return app


# -- ACS ----------------------------------------------------------------------

class PlanRequest(BaseModel):
    waypoints: list[list[float]] = Field(min_length=1)
    land_at_end: bool = False
    mission_id: str = ""


class CommandRequest(BaseModel):
    cmd: Union[int, str]
    p1: int = 0
    p2: int = 0
    p3: int = 0
    p4: int = 0


def _plan(req: PlanRequest) -> FlightPlan:
    for i, wp in enumerate(req.waypoints):
        if len(wp) not in (3, 4):
            raise HTTPException(422, detail=f"waypoint {i} must have 3 or 4 numbers")
    return FlightPlan(tuple(Waypoint(*wp) for wp in req.waypoints), req.mission_id,
                      req.land_at_end)


def _cmd_code(value) -> int:
    if isinstance(value, str):
        try:
            return int(Cmd[value.upper()])
        except KeyError:
            raise HTTPException(422, detail=f"unknown command {value!r}") from None
    if value not in Cmd._value2member_map_:
        raise HTTPException(422, detail=f"unknown command code {value}")
    return value


def acs_api(acs: AcsInstance) -> FastAPI:
    app = FastAPI(title=f"acs {acs.instance_id}")

    def entry(sys_id: int) -> dict:
        for e in acs.fleet_snapshot():
            if e["sys_id"] == sys_id:
                return e
        raise _http(404, UnknownPeer(f"sys_id {sys_id} not in roster"))

    @app.get("/fleet")
    def fleet():
        return {"instance_id": acs.instance_id, "t": acs.queue.now,
                "members": acs.fleet_snapshot()}

    @app.get("/fleet/{sys_id}/location")
    def location(sys_id: int):
        e = entry(sys_id)
        return {"sys_id": sys_id, "pos": e["pos"], "heading": e["heading"],
                "liveness": e["liveness"]}

    @app.get("/fleet/{sys_id}/battery")
    def battery(sys_id: int):
        e = entry(sys_id)
        return {"sys_id": sys_id, "battery_pct": e["battery"], "liveness": e["liveness"]}

    @app.put("/fleet/{sys_id}/plan", status_code=202)
    def plan(sys_id: int, req: PlanRequest):
        try:
            handles = acs.update_flight_path(sys_id, _plan(req))
        except UnknownPeer as exc:
            raise _http(404, exc)
        except TargetLost as exc:
            raise _http(409, exc)
        except EmptyPlan as exc:
            raise _http(422, exc)
        return {"sys_id": sys_id, "cseq": [h.cseq for h in handles]}

    @app.post("/fleet/{sys_id}/command", status_code=202)
    def command(sys_id: int, req: CommandRequest):
        code = _cmd_code(req.cmd)
        try:
            handle = acs.issue_command(sys_id, code, req.p1, req.p2, req.p3, req.p4)
        except UnknownPeer as exc:
            raise _http(404, exc)
        except TargetLost as exc:
            raise _http(409, exc)
        return {"sys_id": sys_id, "cseq": handle.cseq, "status": handle.status.value}

    return app


# -- UNSC ---------------------------------------------------------------------

class CandidateModel(BaseModel):
    node_id: str
    pos: tuple[float, float, float]
    capacity: float = 1.0
    distance_m: float = Field(0.0, ge=0)
    los: bool = True
    residual_s: float = 0.0
    expected_load: Optional[float] = None


class RankRequest(BaseModel):
    uav_pos: Optional[tuple[float, float, float]] = None
    candidates: list[CandidateModel]
    weights: Optional[dict[str, float]] = None
    anchor_onboard: bool = False
    critical: bool = False


class UavModel(BaseModel):
    sys_id: int
    pos: tuple[float, float, float]
    battery_pct: float = Field(ge=0, le=100)
    config: dict = {}


class ProjectRequest(BaseModel):
    uav: UavModel
    plan: PlanRequest
    reserve_pct: float = 20.0


class ProjectionModel(BaseModel):
    uav_id: int
    current_battery_pct: float
    projected_end_pct: float
    reserve_threshold_pct: float = 20.0
    remaining_plan: PlanRequest


class ReplacementRequest(BaseModel):
    projections: list[ProjectionModel]
    parked_pool: list[UavModel]
    policy: str = "next_waypoint"


class MeasurementModel(BaseModel):
    anchor: list[float]
    range_m: float = Field(ge=0)


class EstimateRequest(BaseModel):
    measurements: list[MeasurementModel]


def _uav(m: UavModel) -> UavState:
    return UavState(m.sys_id, UavConfig(**m.config), pos=m.pos, battery_pct=m.battery_pct)


def _projection_doc(p: EnergyProjection) -> dict:
    return {"uav_id": p.uav_id, "current_battery_pct": p.current_battery_pct,
            "projected_end_pct": p.projected_end_pct,
            "reserve_threshold_pct": p.reserve_threshold_pct, "at_risk": p.at_risk}


def unsc_api() -> FastAPI:
    app = FastAPI(title="unsc")

    @app.post("/uprc/rank")
    def rank(req: RankRequest):
        cands = [AttachmentCandidate(**c.model_dump()) for c in req.candidates]
        try:
            weights = RankWeights(**(req.weights or {}))
            ranked, decision = uprc_rank_attachments(req.uav_pos, cands, weights,
                                                     anchor_onboard=req.anchor_onboard,
                                                     critical=req.critical)
        except TypeError as exc:
            raise HTTPException(422, detail=str(exc))
        except UnscError as exc:
            raise _http(422, exc)
        return {"ranked": [c.node_id for c in ranked],
                "ssc": {"mode": decision.mode.value, "node_id": decision.node_id}}

    @app.post("/nsa/project")
    def project(req: ProjectRequest):
        try:
            proj = nsa_project_energy(_uav(req.uav), _plan(req.plan), reserve_pct=req.reserve_pct)
        except (TypeError, ValueError) as exc:
            raise HTTPException(422, detail=str(exc))
        return _projection_doc(proj)

    @app.post("/nsa/replacement")
    def replacement(req: ReplacementRequest):
        try:
            projs = [EnergyProjection(p.uav_id, p.current_battery_pct, p.projected_end_pct,
                                      p.reserve_threshold_pct, _plan(p.remaining_plan))
                     for p in req.projections]
            out = nsa_suggest_replacement(projs, [_uav(u) for u in req.parked_pool], req.policy)
        except (TypeError, ValueError) as exc:
            raise HTTPException(422, detail=str(exc))
        return {"suggestions": [{"uav_id": s.uav_id, "replacement_id": s.replacement_id,
                                 "projected_end_pct": s.projected_end_pct,
                                 "outcome": s.outcome} for s in out]}

    @app.post("/uls/estimate")
    def estimate(req: EstimateRequest):
        meas = [AnchorMeasurement(tuple(m.anchor), m.range_m) for m in req.measurements]
        if len({len(m.anchor) for m in meas}) > 1:
            raise HTTPException(422, detail="anchors must share one dimension")
        try:
            est = uls_estimate_position(meas)
        except UnscError as exc:
            raise _http(422, exc)
        return {"point": list(est.point), "rms_residual_m": est.rms_residual_m,
                "iterations": est.iterations}

    return app
