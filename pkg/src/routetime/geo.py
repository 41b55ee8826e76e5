"""Great-circle geometry helpers."""

import numpy as np

EARTH_RADIUS_M = 6_371_000.0


def haversine_m(lat1, lon1, lat2, lon2):
    """Haversine distance in meters; accepts scalars or numpy arrays (degrees)."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=np.float64))
                              for x in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return EARTH_RADIUS_M * 2.0 * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def time_slot(t) -> int:
    """Two-hour UTC slot index in [0, 12) for an epoch-seconds timestamp."""
    return int((int(t) // 7200) % 12)


def day_of_week(t) -> int:
    """UTC day of week for an epoch-seconds timestamp, Monday = 0."""
    return int(((int(t) // 86400) + 3) % 7)
