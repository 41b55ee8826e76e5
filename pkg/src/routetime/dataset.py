"""Dataset schema, line-delimited file I/O, and route splitting.

File format (version 1): UTF-8, one JSON object per line, preceded by a
header line ``{"format": "courier-days", "version": 1}``.  Each record
carries exactly the fields listed in ``RECORD_FIELDS``.  The companion AOI
table uses header ``{"format": "aoi-table", "version": 1}`` and rows of
``{"aoi": int, "lat": float, "lon": float}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ContractError, ParseError, ValidationError

DELIVERY = "delivery"
PICKUP = "pickup"

DATASET_HEADER = {"format": "courier-days", "version": 1}
AOI_HEADER = {"format": "aoi-table", "version": 1}

RECORD_FIELDS = frozenset({
    "courier_id", "package_id", "kind", "lat", "lon", "aoi",
    "dispatched_time", "promised_time", "finish_time", "weight", "volume",
    "courier_profile", "weather", "holiday",
})


@dataclass
class Package:
    """One delivery or pickup task."""

    id: str
    kind: str
    lat: float
    lon: float
    aoi: int
    dispatched_time: int
    promised_time: int
    finish_time: int | None  # None while still pending
    weight: float
    volume: float

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in (DELIVERY, PICKUP):
            problems.append(f"unknown kind '{self.kind}'")
        if self.dispatched_time > self.promised_time:
            problems.append("promised_time earlier than dispatched_time")
        if self.finish_time is not None and self.dispatched_time > self.finish_time:
            problems.append("finish_time earlier than dispatched_time")
        if self.aoi < 0:
            problems.append("negative aoi index")
        if self.weight < 0 or self.volume < 0:
            problems.append("negative weight or volume")
        return problems


@dataclass
class DailyRecord:
    """One courier's completed work on one date, sorted by finish time."""

    courier_id: str
    date: str
    packages: list[Package]
    courier_profile: dict
    weather: dict
    holiday: bool


@dataclass
class Sample:
    """One prediction instance cut from a courier day.

    ``truth_perm[j]`` is the pending-list index completed at step j;
    ``truth_offsets[i]`` is minutes from t to the finish of pending package
    i for deliveries and NaN for pickups.  Both are None for inference
    requests, which carry no ground truth.
    """

    courier_id: str
    t: int
    history: list[Package]
    pending: list[Package]
    truth_perm: np.ndarray | None
    truth_offsets: np.ndarray | None
    courier_profile: dict = field(default_factory=dict)
    weather: dict = field(default_factory=dict)
    holiday: bool = False

    def __post_init__(self):
        # an empty pending set is representable here; the model layer rejects
        # it at encode time
        n = len(self.pending)
        if self.truth_perm is not None:
            if sorted(self.truth_perm.tolist()) != list(range(n)):
                raise ContractError("truth_perm is not a permutation of the pending set")
        for i, pkg in enumerate(self.pending):
            if pkg.dispatched_time > self.t:
                raise ContractError(f"pending package {pkg.id} dispatched after t")
            if self.truth_offsets is not None and pkg.kind == DELIVERY \
                    and not self.truth_offsets[i] > 0:
                raise ContractError(f"non-positive delivery offset for {pkg.id}")
        last = None
        for pkg in self.history:
            if pkg.finish_time is None or pkg.finish_time > self.t:
                raise ContractError("history must be completed before t")
            if last is not None and pkg.finish_time < last:
                raise ContractError("history is not sorted by finish_time")
            last = pkg.finish_time

    @property
    def n_deliveries(self) -> int:
        return sum(1 for p in self.pending if p.kind == DELIVERY)

    @property
    def n_pickups(self) -> int:
        return sum(1 for p in self.pending if p.kind == PICKUP)


def _utc_date(t: int) -> str:
    return datetime.fromtimestamp(int(t), tz=timezone.utc).strftime("%Y-%m-%d")


def _package_from_row(row: dict) -> Package:
    return Package(
        id=str(row["package_id"]),
        kind=row["kind"],
        lat=float(row["lat"]),
        lon=float(row["lon"]),
        aoi=int(row["aoi"]),
        dispatched_time=int(row["dispatched_time"]),
        promised_time=int(row["promised_time"]),
        finish_time=None if row["finish_time"] is None else int(row["finish_time"]),
        weight=float(row["weight"]),
        volume=float(row["volume"]),
    )


def aggregate_duplicates(packages: list[Package], courier_id: str = "") -> list[Package]:
    """Merge same-stop duplicates, summing weight and volume.

    Packages are considered duplicates when they share kind, AOI, exact
    coordinates, promised time and finish time (the same customer visit).
    """
    merged: dict[tuple, Package] = {}
    order: list[tuple] = []
    for pkg in packages:
        key = (courier_id, pkg.kind, pkg.aoi, pkg.lat, pkg.lon,
               pkg.promised_time, pkg.finish_time)
        if key in merged:
            kept = merged[key]
            kept.weight += pkg.weight
            kept.volume += pkg.volume
            kept.dispatched_time = min(kept.dispatched_time, pkg.dispatched_time)
        else:
            merged[key] = pkg
            order.append(key)
    return [merged[k] for k in order]


def parse_dataset(path) -> list[DailyRecord]:
    """Read a courier-days file into per-(courier, date) records.

    Malformed lines are fatal; invariant violations are collected and raised
    together with their line numbers.
    """
    groups: dict[tuple, dict] = {}
    violations: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            return []
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:1: unreadable header: {exc}") from exc
        if header != DATASET_HEADER:
            raise ParseError(f"{path}:1: expected header {DATASET_HEADER}, got {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            fields = set(row)
            if fields != RECORD_FIELDS:
                missing = sorted(RECORD_FIELDS - fields)
                extra = sorted(fields - RECORD_FIELDS)
                raise ParseError(f"{path}:{lineno}: wrong fields "
                                 f"(missing={missing}, extra={extra})")
            try:
                pkg = _package_from_row(row)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad field value: {exc}") from exc
            if pkg.finish_time is None:
                violations.append(f"line {lineno}: dataset rows must be completed "
                                  f"(finish_time missing)")
                continue
            for problem in pkg.validate():
                violations.append(f"line {lineno}: {problem}")
            key = (str(row["courier_id"]), _utc_date(pkg.dispatched_time))
            group = groups.setdefault(key, {
                "packages": [],
                "courier_profile": row["courier_profile"],
                "weather": row["weather"],
                "holiday": bool(row["holiday"]),
            })
            group["packages"].append(pkg)
    if violations:
        raise ValidationError(f"{path}: {len(violations)} invalid rows: "
                              + "; ".join(violations[:20]))
    records = []
    for (courier_id, date), group in sorted(groups.items()):
        packages = sorted(group["packages"],
                          key=lambda p: (p.finish_time, p.id))
        packages = aggregate_duplicates(packages, courier_id)
        records.append(DailyRecord(courier_id=courier_id, date=date,
                                   packages=packages,
                                   courier_profile=group["courier_profile"],
                                   weather=group["weather"],
                                   holiday=group["holiday"]))
    return records


def write_dataset(path, records: list[DailyRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(DATASET_HEADER, sort_keys=True) + "\n")
        for rec in records:
            for pkg in rec.packages:
                row = {
                    "courier_id": rec.courier_id,
                    "package_id": pkg.id,
                    "kind": pkg.kind,
                    "lat": pkg.lat,
                    "lon": pkg.lon,
                    "aoi": pkg.aoi,
                    "dispatched_time": pkg.dispatched_time,
                    "promised_time": pkg.promised_time,
                    "finish_time": pkg.finish_time,
                    "weight": pkg.weight,
                    "volume": pkg.volume,
                    "courier_profile": rec.courier_profile,
                    "weather": rec.weather,
                    "holiday": rec.holiday,
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_aoi_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Read AOI centroids; returns (lats, lons) indexed by AOI id."""
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:1: unreadable header: {exc}") from exc
        if header != AOI_HEADER:
            raise ParseError(f"{path}:1: expected header {AOI_HEADER}, got {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                entries[int(row["aoi"])] = (float(row["lat"]), float(row["lon"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad AOI row: {exc}") from exc
    n = len(entries)
    if sorted(entries) != list(range(n)):
        raise ValidationError(f"{path}: AOI indices must be exactly 0..{n - 1}")
    lats = np.array([entries[i][0] for i in range(n)])
    lons = np.array([entries[i][1] for i in range(n)])
    return lats, lons


def write_aoi_table(path, lats, lons) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(AOI_HEADER, sort_keys=True) + "\n")
        for i, (la, lo) in enumerate(zip(lats, lons)):
            fh.write(json.dumps({"aoi": i, "lat": float(la), "lon": float(lo)}) + "\n")


# ---------------------------------------------------------------------------
# route splitting at newly dispatched pickups

def split_segments(day: DailyRecord) -> list[list[Package]]:
    """Cut the completion sequence immediately before every pickup that was
    dispatched mid-day (strictly after day start and after at least one
    completion).  Concatenating the segments reproduces the original order.
    """
    packages = day.packages
    if not packages:
        return []
    day_start = min(p.dispatched_time for p in packages)
    cuts = []
    for i, pkg in enumerate(packages):
        if pkg.kind != PICKUP or i == 0:
            continue
        if pkg.dispatched_time <= day_start:
            continue
        if any(q.finish_time < pkg.dispatched_time for q in packages[:i]):
            cuts.append(i)
    segments = []
    start = 0
    for cut in cuts:
        if cut > start:
            segments.append(packages[start:cut])
        start = cut
    segments.append(packages[start:])
    return segments


def split_routes(day: DailyRecord) -> list[Sample]:
    """Turn a courier day into prediction samples, one per route segment.

    The query time of the first segment is the day start; later segments are
    queried at the moment their cutting pickup arrived (but never before the
    previous completion).  Pending packages not yet dispatched at the query
    time are dropped from the sample.
    """
    segments = split_segments(day)
    if not segments:
        return []
    packages = day.packages
    day_start = min(p.dispatched_time for p in packages)
    samples = []
    done = 0
    for seg_idx, segment in enumerate(segments):
        if seg_idx == 0:
            t = day_start
        else:
            t = max(segment[0].dispatched_time, packages[done - 1].finish_time)
        history = packages[:done]
        pending = [p for p in segment
                   if p.dispatched_time <= t and p.finish_time > t]
        done += len(segment)
        if not pending:
            continue
        pending = sorted(pending, key=lambda p: (p.dispatched_time, p.id))
        by_finish = sorted(range(len(pending)),
                           key=lambda i: (pending[i].finish_time, pending[i].id))
        offsets = np.full(len(pending), np.nan)
        for i, pkg in enumerate(pending):
            if pkg.kind == DELIVERY:
                offsets[i] = (pkg.finish_time - t) / 60.0
        samples.append(Sample(
            courier_id=day.courier_id,
            t=t,
            history=list(history),
            pending=pending,
            truth_perm=np.array(by_finish, dtype=np.intp),
            truth_offsets=offsets,
            courier_profile=day.courier_profile,
            weather=day.weather,
            holiday=day.holiday,
        ))
    return samples
