"""Courier mobility and spatial distance matrices over AOIs.

Transitions are mined from consecutive completions within each courier day,
bucketed into twelve 2-hour slots by the destination's finish time.  The
distance matrix holds haversine meters between AOI centroids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DailyRecord
from .errors import ValidationError
from .geo import haversine_m, time_slot

SMOOTHING = 1e-6
N_SLOTS = 12


@dataclass
class MobilityTensors:
    m_c: np.ndarray  # (12, N, N) transition counts, int64
    m_d: np.ndarray  # (N, N) meters, symmetric, zero diagonal

    @property
    def n_aoi(self) -> int:
        return self.m_d.shape[0]


def distance_matrix(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    m_d = haversine_m(lats[:, None], lons[:, None], lats[None, :], lons[None, :])
    np.fill_diagonal(m_d, 0.0)
    return (m_d + m_d.T) / 2.0  # enforce exact symmetry


def build_mobility(days: list[DailyRecord], lats: np.ndarray,
                   lons: np.ndarray) -> MobilityTensors:
    """Count AOI transitions per time slot and build the distance matrix."""
    n = len(lats)
    m_c = np.zeros((N_SLOTS, n, n), dtype=np.int64)
    for day in days:
        for prev, nxt in zip(day.packages, day.packages[1:]):
            if not (0 <= prev.aoi < n and 0 <= nxt.aoi < n):
                raise ValidationError(f"AOI index out of range in day "
                                      f"{day.courier_id}/{day.date}")
            m_c[time_slot(nxt.finish_time), prev.aoi, nxt.aoi] += 1
    return MobilityTensors(m_c=m_c, m_d=distance_matrix(lats, lons))


def resolve_aoi(aoi: int, lat: float, lon: float, lats: np.ndarray,
                lons: np.ndarray) -> int:
    """Map an AOI index into the known vocabulary.

    Unseen indices fall back to the nearest known centroid by haversine.
    """
    if 0 <= aoi < len(lats):
        return int(aoi)
    return int(np.argmin(haversine_m(lat, lon, lats, lons)))


def _normalise_rows(block: np.ndarray) -> np.ndarray:
    """Row-normalise then apply additive smoothing so rows sum to one.

    Smoothing happens after normalisation, which keeps the result invariant
    to a common positive rescaling of the raw matrix; an all-zero row comes
    out exactly uniform.
    """
    n = block.shape[0]
    sums = block.sum(axis=1, keepdims=True)
    probs = np.where(sums > 0, block / np.where(sums > 0, sums, 1.0), 1.0 / n)
    return (probs + SMOOTHING) / (1.0 + n * SMOOTHING)


def slice_mobility(tensors: MobilityTensors, pending_aois: np.ndarray,
                   slot: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather the pending packages' rows/columns and row-normalise.

    ``pending_aois`` has fixed length with -1 marking padding; padded rows
    and columns are zero in both outputs.
    """
    if not 0 <= slot < N_SLOTS:
        raise ValidationError(f"time slot {slot} out of range")
    pending_aois = np.asarray(pending_aois)
    l_f = len(pending_aois)
    valid = np.flatnonzero(pending_aois >= 0)
    m_c_out = np.zeros((l_f, l_f))
    m_d_out = np.zeros((l_f, l_f))
    if len(valid) == 0:
        return m_c_out, m_d_out
    aois = pending_aois[valid]
    c_block = tensors.m_c[slot][np.ix_(aois, aois)].astype(np.float64)
    d_block = tensors.m_d[np.ix_(aois, aois)]
    m_c_out[np.ix_(valid, valid)] = _normalise_rows(c_block)
    m_d_out[np.ix_(valid, valid)] = _normalise_rows(d_block)
    return m_c_out, m_d_out
