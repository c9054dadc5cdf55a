"""Metrics collected by a run and their on-disk CSV/JSON form."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..netem import PairCounters, write_accounting

CSV_SCHEMAS = {
    "traffic.csv": ("fleet_size", "direction", "bytes"),
    "usage.csv": ("instances", "cpu_pct", "drops"),
    "migration.csv": ("fleet_size", "realloc_s", "downtime_s", "ratio"),
    "uls.csv": ("anchors", "noise_sigma", "median_err_m"),
    "members.csv": ("instance_id", "sys_id", "lost_time_s", "reattached", "mission_stage"),
    "events.csv": ("t", "kind", "subject", "detail"),
}


@dataclass
class MetricsRecord:
    traffic: list[tuple] = field(default_factory=list)
    usage: list[tuple] = field(default_factory=list)
    migration: list[tuple] = field(default_factory=list)
    uls: list[tuple] = field(default_factory=list)
    members: list[tuple] = field(default_factory=list)
    events: list[tuple] = field(default_factory=list)
    accounting: dict[tuple[str, str], PairCounters] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def event(self, t: float, kind: str, subject: str, detail: str = "") -> None:
        if self.events and t < self.events[-1][0]:
            raise ValueError(f"event at {t} precedes {self.events[-1][0]}")
        self.events.append((t, kind, subject, detail))

    def extend(self, other: "MetricsRecord") -> None:
        """Append another run's tabular rows (events and accounting excluded)."""
        self.traffic += other.traffic
        self.usage += other.usage
        self.migration += other.migration
        self.uls += other.uls
        self.members += other.members


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_metrics(record: MetricsRecord, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = {
        "traffic.csv": record.traffic,
        "usage.csv": record.usage,
        "migration.csv": record.migration,
        "uls.csv": record.uls,
        "members.csv": record.members,
        "events.csv": [(round(t, 6), k, s, d) for t, k, s, d in record.events],
    }
    written = []
    for name, rows in tables.items():
        path = out / name
        _write_csv(path, CSV_SCHEMAS[name], rows)
        written.append(path)
    path = out / "accounting.csv"
    write_accounting(dict(sorted(record.accounting.items())), path)
    written.append(path)
    path = out / "summary.json"
    path.write_text(json.dumps(record.summary, sort_keys=True, indent=1) + "\n")
    written.append(path)
    return written
