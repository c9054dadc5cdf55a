"""Scenario files: JSON, strictly validated, unknown fields rejected."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..acs import AcsConfig
from ..autopilot import FlightPlan, UavConfig, Waypoint
from ..edge_platform import MigrationConfig, PlatformConfig
from ..netem import CoverageParams, LinkSpec


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid scenario:\n  " + "\n  ".join(problems))
        self.problems = problems


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LinkModel(_Strict):
    one_way_latency_ms: float = Field(0.638, ge=0)
    bandwidth_mbps: float = Field(12.44, gt=0)
    loss_prob: float = Field(0.000437, ge=0, le=1)
    jitter_ms: float = Field(0.0, ge=0)

    def build(self) -> LinkSpec:
        return LinkSpec(**self.model_dump())


class MigrationModel(_Strict):
    precopy_fixed_s: float = Field(5.0, gt=0)
    state_bytes_per_uav: float = Field(64 * 1024, gt=0)
    base_state_bytes: float = Field(1024 * 1024, gt=0)
    stopcopy_fixed_s: float = Field(1.0, gt=0)
    dirty_fraction: float = Field(0.1, gt=0)


class PlatformConfigModel(_Strict):
    cpu_pct_per_instance: float = Field(1.43, gt=0)
    cpu_capacity_pct: float = Field(100.0, gt=0)
    max_instances: int = Field(60, ge=1)
    deploy_time_s: float = Field(3.894, gt=0)
    max_connections_per_instance: int = Field(255, ge=1)
    migration: Optional[MigrationModel] = None

    def build(self, default_migration: MigrationConfig) -> PlatformConfig:
        fields = self.model_dump(exclude={"migration"})
        mig = (MigrationConfig(**self.migration.model_dump()) if self.migration
               else default_migration)
        return PlatformConfig(**fields, migration=mig)


class PlatformModel(_Strict):
    uav_id: str
    address: str
    pos: tuple[float, float, float] = (0.0, 0.0, 100.0)
    config: PlatformConfigModel = PlatformConfigModel()


class UavConfigModel(_Strict):
    max_speed_ms: float = Field(10.0, gt=0)
    max_climb_ms: float = Field(3.0, gt=0)
    drain_base_pcts: float = Field(0.02, gt=0)
    drain_k_pct_per_m: float = Field(0.001, gt=0)
    heartbeat_hz: float = Field(1.0, gt=0)
    telemetry_hz: float = Field(4.0, gt=0)
    arrival_radius_m: float = Field(2.0, gt=0)

    @model_validator(mode="after")
    def _rates(self):
        if self.telemetry_hz < self.heartbeat_hz:
            raise ValueError("telemetry_hz must be >= heartbeat_hz")
        return self

    def build(self) -> UavConfig:
        return UavConfig(**self.model_dump())


class PlanModel(_Strict):
    mission_id: str = ""
    land_at_end: bool = True
    # each waypoint: [x, y, z] or [x, y, z, hold_s]
    waypoints: list[list[float]] = Field(min_length=1)

    @model_validator(mode="after")
    def _shape(self):
        for i, wp in enumerate(self.waypoints):
            if len(wp) not in (3, 4):
                raise ValueError(f"waypoint {i} must have 3 or 4 numbers")
        return self

    def build(self) -> FlightPlan:
        return FlightPlan(tuple(Waypoint(*wp) for wp in self.waypoints), self.mission_id,
                          self.land_at_end)


class MemberModel(_Strict):
    sys_id: int = Field(ge=1, le=255)
    pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    battery_pct: float = Field(100.0, ge=0, le=100)
    config: UavConfigModel = UavConfigModel()
    plan: Optional[PlanModel] = None


class FleetModel(_Strict):
    id: str
    start_s: float = Field(0.0, ge=0)
    members: list[MemberModel] = []


class AcsConfigModel(_Strict):
    heartbeat_hz: float = Field(1.0, gt=0)
    lost_after_missed: int = Field(3, ge=1)
    retries: int = Field(3, ge=0)
    retry_timeout_ms: float = Field(500.0, gt=0)
    arrival_radius_m: float = Field(2.0, gt=0)

    def build(self) -> AcsConfig:
        return AcsConfig(**self.model_dump())


class AcsModel(_Strict):
    instance_id: str
    platform: str
    fleet: str
    port: int = Field(5801, ge=1, le=65535)
    config: AcsConfigModel = AcsConfigModel()


class MigrationEventModel(_Strict):
    instance_id: str
    dst_platform: str
    at_s: float = Field(ge=0)


class AttachmentModel(_Strict):
    id: str
    pos: tuple[float, float, float]


class CoverageModel(_Strict):
    base_radius_m: float = Field(500.0, gt=0)
    radius_per_alt: float = Field(5.0, ge=0)

    def build(self) -> CoverageParams:
        return CoverageParams(**self.model_dump())


class Scenario(_Strict):
    seed: int
    duration_s: float = Field(gt=0)
    dt: float = Field(0.05, gt=0)
    experiment: str = ""
    terrain: Optional[str] = None
    coverage: CoverageModel = CoverageModel()
    attachments: list[AttachmentModel] = []
    link: LinkModel = LinkModel()
    platforms: list[PlatformModel] = []
    fleets: list[FleetModel] = []
    acs: list[AcsModel] = []
    migrations: list[MigrationEventModel] = []

    @model_validator(mode="after")
    def _references(self):
        problems = []
        platform_ids = [p.uav_id for p in self.platforms]
        fleet_ids = [f.id for f in self.fleets]
        acs_ids = [a.instance_id for a in self.acs]
        for label, ids in (("platforms", platform_ids), ("fleets", fleet_ids), ("acs", acs_ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            if dupes:
                problems.append(f"{label}: duplicate ids {dupes}")
        addrs = [p.address for p in self.platforms]
        if len(set(addrs)) != len(addrs):
            problems.append("platforms: duplicate addresses")
        sys_ids = [m.sys_id for f in self.fleets for m in f.members]
        dupes = sorted({s for s in sys_ids if sys_ids.count(s) > 1})
        if dupes:
            problems.append(f"fleets: sys_id used more than once {dupes}")
        for i, a in enumerate(self.acs):
            if a.platform not in platform_ids:
                problems.append(f"acs.{i}.platform: unknown platform {a.platform!r}")
            if a.fleet not in fleet_ids:
                problems.append(f"acs.{i}.fleet: unknown fleet {a.fleet!r}")
        for i, m in enumerate(self.migrations):
            if m.instance_id not in acs_ids:
                problems.append(f"migrations.{i}.instance_id: unknown instance {m.instance_id!r}")
            if m.dst_platform not in platform_ids:
                problems.append(f"migrations.{i}.dst_platform: unknown platform {m.dst_platform!r}")
        if problems:
            raise ValueError("; ".join(problems))
        return self


def _format(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{path}: {e['msg']}")
    return out


def parse_scenario(doc: dict) -> Scenario:
    try:
        return Scenario.model_validate(doc)
    except ValidationError as err:
        raise ScenarioError(_format(err)) from None


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ScenarioError([f"<file>: not valid JSON ({err})"]) from None
    return parse_scenario(doc)
