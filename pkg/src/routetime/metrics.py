"""Evaluation metrics, the historical-average baseline, and report output.

Time metrics (RMSE, MAPE) pool every predicted delivery across samples;
route metrics compare permutations, pooling per-package displacements for
LMD and averaging per-sample overlap for HR@k.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataset import DELIVERY, Sample
from .errors import ContractError, RouteTimeError
from .geo import time_slot


class UndefinedMetricError(RouteTimeError):
    """The metric has no defined value on this input (e.g. empty set)."""


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise UndefinedMetricError("rmse needs equal-length non-empty vectors")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


MAPE_FLOOR_MIN = 1.0  # targets below one minute are excluded


def mape(y_true, y_pred) -> tuple[float, int]:
    """Mean absolute percentage error; returns (percent, n_filtered)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise UndefinedMetricError("mape needs equal-length vectors")
    keep = y_true >= MAPE_FLOOR_MIN
    if not keep.any():
        raise UndefinedMetricError("every target fell below the MAPE floor")
    value = float(np.mean(np.abs(y_true[keep] - y_pred[keep]) / y_true[keep]) * 100.0)
    return value, int((~keep).sum())


def _check_permutation(perm, n: int, name: str) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    if sorted(perm.tolist()) != list(range(n)):
        raise ContractError(f"{name} is not a permutation of 0..{n - 1}")
    return perm


def lmd(perm_true, perm_pred) -> float:
    """Mean absolute displacement of each package's route position."""
    perm_true = np.asarray(perm_true, dtype=np.intp)
    n = len(perm_true)
    perm_true = _check_permutation(perm_true, n, "perm_true")
    perm_pred = _check_permutation(perm_pred, n, "perm_pred")
    pos_true = np.empty(n, dtype=np.intp)
    pos_pred = np.empty(n, dtype=np.intp)
    pos_true[perm_true] = np.arange(n)
    pos_pred[perm_pred] = np.arange(n)
    return float(np.mean(np.abs(pos_true - pos_pred)))


def hr_at_k(perm_true, perm_pred, k: int) -> float:
    """Overlap fraction of the first k chosen packages; k capped at length."""
    perm_true = np.asarray(perm_true, dtype=np.intp)
    n = len(perm_true)
    perm_true = _check_permutation(perm_true, n, "perm_true")
    perm_pred = _check_permutation(perm_pred, n, "perm_pred")
    if k < 1:
        raise ContractError("k must be >= 1")
    k = min(k, n)
    return len(set(perm_true[:k].tolist()) & set(perm_pred[:k].tolist())) / k


@dataclass
class EvalResult:
    rmse_min: float
    mape_pct: float
    lmd: float
    hr1: float
    hr3: float
    n_deliveries: int
    n_routes: int
    n_mape_filtered: int
    inference_seconds: float = 0.0

    def row(self, name: str) -> dict:
        return {
            "model": name,
            "rmse_min": round(self.rmse_min, 6),
            "mape_pct": round(self.mape_pct, 6),
            "lmd": round(self.lmd, 6),
            "hr3_pct": round(self.hr3 * 100.0, 6),
            "inference_seconds": round(self.inference_seconds, 3),
        }


def aggregate(y_true_all, y_pred_all, route_pairs,
              inference_seconds: float = 0.0) -> EvalResult:
    """Pool per-delivery time errors and per-route permutation metrics."""
    displacements = []
    hr1s, hr3s = [], []
    for perm_true, perm_pred in route_pairs:
        n = len(perm_true)
        pos_true = np.empty(n, dtype=np.intp)
        pos_pred = np.empty(n, dtype=np.intp)
        pos_true[np.asarray(perm_true, dtype=np.intp)] = np.arange(n)
        pos_pred[np.asarray(perm_pred, dtype=np.intp)] = np.arange(n)
        displacements.extend(np.abs(pos_true - pos_pred).tolist())
        hr1s.append(hr_at_k(perm_true, perm_pred, 1))
        hr3s.append(hr_at_k(perm_true, perm_pred, 3))
    y_true_all = np.asarray(y_true_all, dtype=np.float64)
    y_pred_all = np.asarray(y_pred_all, dtype=np.float64)
    mape_value, filtered = mape(y_true_all, y_pred_all)
    return EvalResult(
        rmse_min=rmse(y_true_all, y_pred_all),
        mape_pct=mape_value,
        lmd=float(np.mean(displacements)) if displacements else 0.0,
        hr1=float(np.mean(hr1s)) if hr1s else 0.0,
        hr3=float(np.mean(hr3s)) if hr3s else 0.0,
        n_deliveries=int(y_true_all.size),
        n_routes=len(route_pairs),
        n_mape_filtered=filtered,
        inference_seconds=inference_seconds,
    )


# ---------------------------------------------------------------------------
# baselines

class AvgBaseline:
    """Historical mean delivery offset keyed by (AOI, time slot of t)."""

    def __init__(self):
        self.table: dict[tuple[int, int], float] = {}
        self.global_mean = 0.0

    @classmethod
    def fit(cls, samples: list[Sample]) -> "AvgBaseline":
        sums: dict[tuple[int, int], list[float]] = {}
        all_offsets = []
        for s in samples:
            slot = time_slot(s.t)
            for i, pkg in enumerate(s.pending):
                if pkg.kind != DELIVERY:
                    continue
                offset = float(s.truth_offsets[i])
                sums.setdefault((pkg.aoi, slot), []).append(offset)
                all_offsets.append(offset)
        baseline = cls()
        if not all_offsets:
            raise ContractError("AVG baseline needs at least one delivery")
        baseline.global_mean = float(np.mean(all_offsets))
        baseline.table = {k: float(np.mean(v)) for k, v in sums.items()}
        return baseline

    def predict(self, sample: Sample) -> np.ndarray:
        """Offset minutes for every pending package (NaN for pickups)."""
        slot = time_slot(sample.t)
        out = np.full(len(sample.pending), np.nan)
        for i, pkg in enumerate(sample.pending):
            if pkg.kind == DELIVERY:
                out[i] = self.table.get((pkg.aoi, slot), self.global_mean)
        return out


def nearest_deadline_route(sample: Sample) -> np.ndarray:
    """Heuristic route: serve pending packages by ascending promised time."""
    order = sorted(range(len(sample.pending)),
                   key=lambda i: (sample.pending[i].promised_time, i))
    return np.array(order, dtype=np.intp)


# ---------------------------------------------------------------------------
# report output

REPORT_COLUMNS = ["model", "rmse_min", "mape_pct", "lmd", "hr3_pct",
                  "inference_seconds"]


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})
    return buf.getvalue()


def report_table(rows: list[dict]) -> str:
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows))
              for c in REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in REPORT_COLUMNS))
    for row in rows:
        lines.append("  ".join(str(row.get(c, "")).ljust(widths[c])
                               for c in REPORT_COLUMNS))
    return "\n".join(lines)
