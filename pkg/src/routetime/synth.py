"""Synthetic courier world: imbalanced delivery/pickup days with ground truth.

Deliveries are dispatched in bulk at day start with generous deadlines;
pickups arrive through the day by a Poisson process with tight windows.
The simulated courier greedily balances deadline urgency, proximity and a
personal AOI-pair preference, with a hard override that services any pickup
about to expire.  Everything is reproducible bit-for-bit from the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .dataset import (DELIVERY, PICKUP, DailyRecord, Package, write_aoi_table,
                      write_dataset)
from .errors import ConfigError
from .geo import day_of_week, haversine_m

BASE_LAT = 39.90
BASE_LON = 116.40
KM_PER_DEG_LAT = 111.32
DAY_START_HOUR = 8
WORK_WINDOW_H = 8.0


@dataclass
class WorldConfig:
    n_aoi: int = 40
    grid_km: float = 6.0
    n_couriers: int = 6
    n_days: int = 15
    start_date: str = "2024-03-04"
    deliveries_per_day: float = 22.0
    pickup_rate_per_hour: float = 0.2
    pickup_window_min: float = 60.0
    courier_speed_mps: float = 6.0
    service_time_s: float = 120.0
    delivery_window_h_min: float = 2.0
    delivery_window_h_max: float = 9.0
    score_w_urgency: float = 0.5
    score_w_distance: float = 0.3
    score_w_preference: float = 0.2
    override_threshold_min: float = 30.0
    preference_shared_weight: float = 0.7
    zone_size: int = 0  # 0 = whole grid; else tasks come from the courier's
    #                     zone_size nearest AOIs (compact daily rounds)
    seed: int = 0

    def validate(self) -> None:
        positive = ["n_aoi", "grid_km", "n_couriers", "n_days",
                    "deliveries_per_day", "pickup_window_min",
                    "courier_speed_mps", "service_time_s"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"world config '{name}' must be positive")
        if self.pickup_rate_per_hour < 0:
            raise ConfigError("pickup_rate_per_hour must be >= 0")

    @classmethod
    def from_kv(cls, raw: dict[str, str]) -> "WorldConfig":
        cfg = cls()
        for name, value in raw.items():
            if not hasattr(cfg, name):
                raise ConfigError(f"unknown world config key '{name}'")
            current = getattr(cfg, name)
            cast = type(current)
            try:
                setattr(cfg, name, cast(value))
            except ValueError as exc:
                raise ConfigError(f"world config '{name}' has invalid value "
                                  f"'{value}'") from exc
        cfg.validate()
        return cfg


@dataclass
class CourierProfile:
    courier_id: str
    preference: np.ndarray  # (N, N) multipliers in [0.25, 4]
    speed_multiplier: float
    age: float
    tenure_years: float
    home_aoi: int
    zone_aois: np.ndarray = None  # AOIs this courier draws tasks from

    def numerics(self) -> dict:
        return {"age": self.age, "tenure_years": self.tenure_years,
                "speed_multiplier": self.speed_multiplier}


@dataclass
class World:
    config: WorldConfig
    aoi_lats: np.ndarray
    aoi_lons: np.ndarray
    couriers: list[CourierProfile] = field(default_factory=list)


def generate_world(config: WorldConfig) -> World:
    """Lay out AOI centroids in the grid and sample courier profiles."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    lat_span = config.grid_km / KM_PER_DEG_LAT
    lon_span = config.grid_km / (KM_PER_DEG_LAT * np.cos(np.radians(BASE_LAT)))
    lats = BASE_LAT + rng.random(config.n_aoi) * lat_span
    lons = BASE_LON + rng.random(config.n_aoi) * lon_span
    # preference multipliers in [0.25, 4]: convex blend in log2 space between
    # a world-shared field and courier-specific taste
    shared_log = rng.uniform(-2.0, 2.0, size=(config.n_aoi, config.n_aoi))
    couriers = []
    w = config.preference_shared_weight
    for i in range(config.n_couriers):
        own_log = rng.uniform(-2.0, 2.0, size=(config.n_aoi, config.n_aoi))
        home = int(rng.integers(0, config.n_aoi))
        if 0 < config.zone_size < config.n_aoi:
            dists = haversine_m(lats[home], lons[home], lats, lons)
            zone = np.argsort(dists)[:config.zone_size]
        else:
            zone = np.arange(config.n_aoi)
        couriers.append(CourierProfile(
            courier_id=f"courier-{i:03d}",
            preference=np.exp2(w * shared_log + (1.0 - w) * own_log),
            speed_multiplier=float(rng.uniform(0.8, 1.25)),
            age=float(rng.integers(20, 58)),
            tenure_years=float(np.round(rng.uniform(0.2, 12.0), 1)),
            home_aoi=home,
            zone_aois=np.sort(zone),
        ))
    return World(config=config, aoi_lats=lats, aoi_lons=lons, couriers=couriers)


def _date_epoch(date: str) -> int:
    dt = datetime.strptime(date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def date_range(start_date: str, n_days: int) -> list[str]:
    start = datetime.strptime(start_date, "%Y-%m-%d")
    return [(start + timedelta(days=i)).strftime("%Y-%m-%d") for i in range(n_days)]


def sample_weather(world_seed: int, date: str) -> tuple[dict, bool]:
    """Per-date weather numerics and holiday flag, shared across couriers."""
    ordinal = _date_epoch(date) // 86400
    rng = np.random.default_rng(np.random.SeedSequence([world_seed, 202, ordinal]))
    low = float(np.round(rng.uniform(-8.0, 18.0), 1))
    high = float(np.round(low + rng.uniform(3.0, 14.0), 1))
    weather = {
        "temp_low": low,
        "temp_high": high,
        "temp_avg": float(np.round((low + high) / 2.0, 1)),
        "condition_code": float(rng.integers(0, 4)),  # clear/cloud/rain/snow
    }
    holiday = day_of_week(_date_epoch(date)) >= 5
    return weather, holiday


@dataclass
class _Task:
    package: Package
    arrival: int  # epoch seconds at which the task becomes visible


def _draw_tasks(world: World, courier: CourierProfile, date: str,
                rng: np.random.Generator) -> list[_Task]:
    cfg = world.config
    day_start = _date_epoch(date) + DAY_START_HOUR * 3600
    tasks = []
    n_deliv = max(1, int(rng.poisson(cfg.deliveries_per_day)))
    for i in range(n_deliv):
        aoi = int(rng.choice(courier.zone_aois))
        lat = float(world.aoi_lats[aoi] + rng.normal(0.0, 0.0005))
        lon = float(world.aoi_lons[aoi] + rng.normal(0.0, 0.0005))
        promised = day_start + int(rng.uniform(cfg.delivery_window_h_min,
                                               cfg.delivery_window_h_max) * 3600)
        tasks.append(_Task(Package(
            id=f"{courier.courier_id}-{date}-d{i:03d}", kind=DELIVERY,
            lat=lat, lon=lon, aoi=aoi, dispatched_time=day_start,
            promised_time=promised, finish_time=None,
            weight=float(np.round(rng.uniform(0.2, 12.0), 2)),
            volume=float(np.round(rng.uniform(0.5, 40.0), 2)),
        ), arrival=day_start))
    n_pick = int(rng.poisson(cfg.pickup_rate_per_hour * WORK_WINDOW_H))
    arrivals = np.sort(rng.uniform(0.0, WORK_WINDOW_H * 3600, size=n_pick))
    for i, offset in enumerate(arrivals):
        aoi = int(rng.choice(courier.zone_aois))
        lat = float(world.aoi_lats[aoi] + rng.normal(0.0, 0.0005))
        lon = float(world.aoi_lons[aoi] + rng.normal(0.0, 0.0005))
        arrival = day_start + int(offset)
        tasks.append(_Task(Package(
            id=f"{courier.courier_id}-{date}-p{i:03d}", kind=PICKUP,
            lat=lat, lon=lon, aoi=aoi, dispatched_time=arrival,
            promised_time=arrival + int(cfg.pickup_window_min * 60),
            finish_time=None,
            weight=float(np.round(rng.uniform(0.2, 8.0), 2)),
            volume=float(np.round(rng.uniform(0.5, 25.0), 2)),
        ), arrival=arrival))
    return tasks


def _pick_next(open_tasks: list[_Task], now: float, cur_lat: float,
               cur_lon: float, cur_aoi: int, world: World,
               courier: CourierProfile) -> _Task:
    cfg = world.config
    visible = [t for t in open_tasks if t.arrival <= now]
    if not visible:
        nxt = min(open_tasks, key=lambda t: t.arrival)
        return nxt  # caller advances the clock to its arrival
    urgent = [t for t in visible if t.package.kind == PICKUP
              and (t.package.promised_time - now) / 60.0 < cfg.override_threshold_min]
    if urgent:
        return min(urgent, key=lambda t: t.package.promised_time)
    best, best_score = None, -np.inf
    for t in visible:
        pkg = t.package
        remaining_min = max(0.0, (pkg.promised_time - now) / 60.0)
        dist = haversine_m(cur_lat, cur_lon, pkg.lat, pkg.lon)
        urgency = 1.0 / (1.0 + remaining_min / 60.0)
        closeness = 1.0 / (1.0 + dist / 1000.0)
        pref = courier.preference[cur_aoi, pkg.aoi] / 4.0
        score = (cfg.score_w_urgency * urgency
                 + cfg.score_w_distance * closeness
                 + cfg.score_w_preference * pref)
        if score > best_score:
            best, best_score = t, score
    return best


def simulate_day(world: World, courier: CourierProfile, date: str,
                 seed: int) -> DailyRecord:
    """Run one courier day; returns the completed record with ground truth."""
    cfg = world.config
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    tasks = _draw_tasks(world, courier, date, rng)
    now = float(_date_epoch(date) + DAY_START_HOUR * 3600)
    cur_lat = float(world.aoi_lats[courier.home_aoi])
    cur_lon = float(world.aoi_lons[courier.home_aoi])
    cur_aoi = courier.home_aoi
    open_tasks = list(tasks)
    completed: list[Package] = []
    while open_tasks:
        chosen = _pick_next(open_tasks, now, cur_lat, cur_lon, cur_aoi,
                            world, courier)
        now = max(now, float(chosen.arrival))
        pkg = chosen.package
        dist = float(haversine_m(cur_lat, cur_lon, pkg.lat, pkg.lon))
        travel = dist / (cfg.courier_speed_mps * courier.speed_multiplier)
        finish = int(np.ceil(now + travel + cfg.service_time_s))
        if completed and finish <= completed[-1].finish_time:
            finish = completed[-1].finish_time + 1
        pkg.finish_time = finish
        now = float(finish)
        cur_lat, cur_lon, cur_aoi = pkg.lat, pkg.lon, pkg.aoi
        completed.append(pkg)
        open_tasks.remove(chosen)
    weather, holiday = sample_weather(cfg.seed, date)
    return DailyRecord(courier_id=courier.courier_id, date=date,
                       packages=completed, courier_profile=courier.numerics(),
                       weather=weather, holiday=holiday)


def generate_records(world: World) -> list[DailyRecord]:
    """Simulate every courier over every date, each day on its own stream."""
    cfg = world.config
    records = []
    for d_idx, date in enumerate(date_range(cfg.start_date, cfg.n_days)):
        for c_idx, courier in enumerate(world.couriers):
            day_seed = cfg.seed * 1_000_003 + d_idx * 1_009 + c_idx
            records.append(simulate_day(world, courier, date, day_seed))
    return records


def dataset_stats(records: list[DailyRecord]) -> dict:
    deliveries = sum(1 for r in records for p in r.packages if p.kind == DELIVERY)
    pickups = sum(1 for r in records for p in r.packages if p.kind == PICKUP)
    late = sum(1 for r in records for p in r.packages
               if p.finish_time > p.promised_time)
    total = deliveries + pickups
    return {
        "courier_days": len(records),
        "dates": len({r.date for r in records}),
        "deliveries": deliveries,
        "pickups": pickups,
        "pickup_share": pickups / total if total else 0.0,
        "deadline_violation_rate": late / total if total else 0.0,
    }


def emit_dataset(records: list[DailyRecord], out_dir, world: World) -> dict:
    """Write date-disjoint 6:2:2 train/val/test files plus the AOI table.

    Returns the stats dict that is also written to ``stats.json``.
    """
    import json
    import os

    dates = sorted({r.date for r in records})
    if len(dates) < 10:
        raise ConfigError(f"need at least 10 distinct dates for a 6:2:2 split, "
                          f"got {len(dates)}")
    n = len(dates)
    n_train = int(n * 0.6)
    n_val = int(n * 0.2)
    train_dates = set(dates[:n_train])
    val_dates = set(dates[n_train:n_train + n_val])
    os.makedirs(out_dir, exist_ok=True)
    splits = {
        "train": [r for r in records if r.date in train_dates],
        "val": [r for r in records if r.date in val_dates],
        "test": [r for r in records if r.date not in train_dates | val_dates],
    }
    for name, recs in splits.items():
        write_dataset(os.path.join(out_dir, f"{name}.jsonl"), recs)
    write_aoi_table(os.path.join(out_dir, "aoi_table.jsonl"),
                    world.aoi_lats, world.aoi_lons)
    stats = dataset_stats(records)
    stats["split_dates"] = {k: len({r.date for r in v}) for k, v in splits.items()}
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    return stats
