"""Per-package feature rows with z-scoring fitted on the training split.

Row layout: [kind one-hot (2) | z-scored numerics | promised-time slot
one-hot (12) | day-of-week one-hot (7) | holiday flag (1)].  The numeric
block is lat, lon, weight, volume, remaining minutes to the promised time,
haversine meters from the courier's location at query time, then courier
profile and weather numerics in sorted key order.  Zero-variance numerics
are dropped at fit time so every kept column normalises cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DELIVERY, PICKUP, Package, Sample
from .errors import ContractError
from .geo import day_of_week, haversine_m, time_slot
from .mobility import resolve_aoi

BASE_NUMERICS = ["lat", "lon", "weight", "volume", "remaining_min", "dist_m"]


@dataclass
class FeatureStats:
    courier_keys: list[str]
    weather_keys: list[str]
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # bool per numeric feature; zero-variance columns dropped
    dropped: list[str]
    warnings: dict = field(default_factory=lambda: {"unknown_kind": 0,
                                                    "missing_numeric": 0})

    @property
    def feature_names(self) -> list[str]:
        return (BASE_NUMERICS
                + [f"courier:{k}" for k in self.courier_keys]
                + [f"weather:{k}" for k in self.weather_keys])

    @property
    def d_model_input(self) -> int:
        """Width of one encoded package row."""
        return 2 + int(self.kept.sum()) + 12 + 7 + 1

    def to_json(self) -> dict:
        return {
            "courier_keys": self.courier_keys,
            "weather_keys": self.weather_keys,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "kept": self.kept.astype(int).tolist(),
            "dropped": self.dropped,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "FeatureStats":
        return cls(
            courier_keys=list(blob["courier_keys"]),
            weather_keys=list(blob["weather_keys"]),
            mean=np.array(blob["mean"], dtype=np.float64),
            std=np.array(blob["std"], dtype=np.float64),
            kept=np.array(blob["kept"], dtype=bool),
            dropped=list(blob["dropped"]),
        )


@dataclass
class EncodedSample:
    """Model-ready sample: padded feature matrices plus decoding context."""

    h: np.ndarray        # (L_h, D_m)
    h_mask: np.ndarray   # (L_h,) bool
    f: np.ndarray        # (L_f, D_m)
    f_mask: np.ndarray   # (L_f,) bool
    slot: int
    pending_aois: np.ndarray   # (L_f,), -1 on padding
    deliv_mask: np.ndarray     # (L_f,) bool, True where pending is a delivery
    truth_perm: np.ndarray | None     # (n,) step -> pending row, None at inference
    truth_offsets: np.ndarray | None  # (L_f,), minutes, NaN on pickups/padding
    n: int
    t: int
    courier_id: str
    pending_ids: list[str]

    @property
    def has_pickup(self) -> bool:
        return bool((~self.deliv_mask[:self.n]).any())


def courier_location(sample: Sample) -> tuple[float, float]:
    """Courier position at query time: last completion, else the centroid of
    the pending set (sorted before averaging so the value is permutation
    independent to the bit)."""
    if sample.history:
        last = sample.history[-1]
        return last.lat, last.lon
    lats = np.sort(np.array([p.lat for p in sample.pending]))
    lons = np.sort(np.array([p.lon for p in sample.pending]))
    return float(lats.mean()), float(lons.mean())


def _numeric_keys(samples: list[Sample], attr: str) -> list[str]:
    keys = set()
    for s in samples:
        for k, v in getattr(s, attr).items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                keys.add(k)
    return sorted(keys)


def _raw_numerics(pkg: Package, t: int, cloc: tuple[float, float],
                  sample: Sample, stats: FeatureStats) -> np.ndarray:
    row = np.empty(len(stats.feature_names))
    row[0] = pkg.lat
    row[1] = pkg.lon
    row[2] = pkg.weight
    row[3] = pkg.volume
    row[4] = (pkg.promised_time - t) / 60.0
    row[5] = haversine_m(cloc[0], cloc[1], pkg.lat, pkg.lon)
    i = len(BASE_NUMERICS)
    for keys, source in ((stats.courier_keys, sample.courier_profile),
                         (stats.weather_keys, sample.weather)):
        for k in keys:
            v = source.get(k)
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                row[i] = float(v)
            else:
                row[i] = 0.0
                stats.warnings["missing_numeric"] += 1
            i += 1
    return row


def _sample_rows(sample: Sample, stats: FeatureStats):
    cloc = courier_location(sample)
    for pkg in sample.history:
        yield _raw_numerics(pkg, sample.t, cloc, sample, stats)
    for pkg in sample.pending:
        yield _raw_numerics(pkg, sample.t, cloc, sample, stats)


def fit_feature_stats(samples: list[Sample]) -> FeatureStats:
    """Fit per-feature mean/std on the training split only."""
    if not samples:
        raise ContractError("cannot fit feature statistics on an empty split")
    stats = FeatureStats(
        courier_keys=_numeric_keys(samples, "courier_profile"),
        weather_keys=_numeric_keys(samples, "weather"),
        mean=np.zeros(0), std=np.zeros(0), kept=np.zeros(0, dtype=bool), dropped=[],
    )
    width = len(stats.feature_names)
    stats.mean = np.zeros(width)
    stats.std = np.ones(width)
    stats.kept = np.ones(width, dtype=bool)
    rows = np.array([row for s in samples for row in _sample_rows(s, stats)])
    stats.mean = rows.mean(axis=0)
    stats.std = rows.std(axis=0)  # population std, matched by the encoder
    stats.kept = stats.std > 1e-12
    stats.dropped = [name for name, keep in zip(stats.feature_names, stats.kept)
                     if not keep]
    stats.std = np.where(stats.kept, stats.std, 1.0)
    return stats


def _truncate_pending(sample: Sample, l_f: int) -> list[int]:
    """Indices of pending packages kept, in original order.

    Oversized pending sets keep the l_f earliest promised deadlines; history
    truncation (elsewhere) keeps the most recent completions.
    """
    n = len(sample.pending)
    if n <= l_f:
        return list(range(n))
    ranked = sorted(range(n), key=lambda i: (sample.pending[i].promised_time, i))
    return sorted(ranked[:l_f])


def _encode_package(pkg: Package, t: int, cloc, sample, stats: FeatureStats,
                    dow_onehot, holiday_flag) -> np.ndarray:
    kind_onehot = np.zeros(2)
    if pkg.kind == DELIVERY:
        kind_onehot[0] = 1.0
    elif pkg.kind == PICKUP:
        kind_onehot[1] = 1.0
    else:
        stats.warnings["unknown_kind"] += 1  # reserved bucket: all-zero one-hot
    numerics = _raw_numerics(pkg, t, cloc, sample, stats)
    z = (numerics - stats.mean) / stats.std
    slot_onehot = np.zeros(12)
    slot_onehot[time_slot(pkg.promised_time)] = 1.0
    return np.concatenate([kind_onehot, z[stats.kept], slot_onehot,
                           dow_onehot, [holiday_flag]])


def encode_features(sample: Sample, stats: FeatureStats, l_h: int, l_f: int,
                    aoi_lats: np.ndarray | None = None,
                    aoi_lons: np.ndarray | None = None) -> EncodedSample:
    """Build padded feature matrices for one sample.

    When AOI centroids are provided, pending AOI indices outside the known
    vocabulary are remapped to the nearest centroid.
    """
    d_m = stats.d_model_input
    t = sample.t
    cloc = courier_location(sample)
    dow = np.zeros(7)
    dow[day_of_week(t)] = 1.0
    holiday_flag = 1.0 if sample.holiday else 0.0

    hist = sample.history[-l_h:]
    h = np.zeros((l_h, d_m))
    h_mask = np.zeros(l_h, dtype=bool)
    for i, pkg in enumerate(hist):
        h[i] = _encode_package(pkg, t, cloc, sample, stats, dow, holiday_flag)
        h_mask[i] = True

    kept = _truncate_pending(sample, l_f)
    f = np.zeros((l_f, d_m))
    f_mask = np.zeros(l_f, dtype=bool)
    pending_aois = np.full(l_f, -1, dtype=np.intp)
    deliv_mask = np.zeros(l_f, dtype=bool)
    offsets = np.full(l_f, np.nan)
    ids = []
    for row, orig in enumerate(kept):
        pkg = sample.pending[orig]
        f[row] = _encode_package(pkg, t, cloc, sample, stats, dow, holiday_flag)
        f_mask[row] = True
        aoi = pkg.aoi
        if aoi_lats is not None:
            aoi = resolve_aoi(aoi, pkg.lat, pkg.lon, aoi_lats, aoi_lons)
        pending_aois[row] = aoi
        deliv_mask[row] = pkg.kind == DELIVERY
        if sample.truth_offsets is not None:
            offsets[row] = sample.truth_offsets[orig]
        ids.append(pkg.id)

    if sample.truth_perm is None:
        truth = None
    else:
        remap = {orig: row for row, orig in enumerate(kept)}
        truth = np.array([remap[i] for i in sample.truth_perm if i in remap],
                         dtype=np.intp)
    return EncodedSample(
        h=h, h_mask=h_mask, f=f, f_mask=f_mask,
        slot=time_slot(t), pending_aois=pending_aois, deliv_mask=deliv_mask,
        truth_perm=truth, truth_offsets=offsets,
        n=len(kept), t=t, courier_id=sample.courier_id, pending_ids=ids,
    )
