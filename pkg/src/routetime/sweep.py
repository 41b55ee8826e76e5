"""Hyperparameter sweep harness over pattern count and pending length.

Each setting trains and evaluates end to end on a generated dataset
directory and contributes one row to a comparison table.  Every run is
seed-deterministic, so the emitted table is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io

from .model import ModelConfig
from .pipeline import prepare_data
from .training import TrainConfig, evaluate_model, train

L_M_VALUES = (12, 16, 20, 24, 28)
L_F_VALUES = (5, 10, 15, 20, 25, 30)

SWEEP_COLUMNS = ["parameter", "value", "rmse_min", "mape_pct", "lmd", "hr3_pct"]


def _run_one(data_dir, l_h: int, l_f: int, l_m: int, d_model: int,
             epochs: int, batch_size: int, lr: float, seed: int) -> dict:
    prep = prepare_data(data_dir, l_h=l_h, l_f=l_f)
    config = ModelConfig(d_input=prep.stats.d_model_input, d_model=d_model,
                         l_h=l_h, l_f=l_f, l_m=l_m)
    tc = TrainConfig(batch_size=batch_size, lr=lr, epochs=epochs, seed=seed)
    result = train(prep.encoded["train"], prep.encoded["val"], config, tc,
                   prep.tensors)
    ev = evaluate_model(result.params, config, prep.encoded["test"],
                        prep.tensors)
    return {"rmse_min": round(ev.rmse_min, 6), "mape_pct": round(ev.mape_pct, 6),
            "lmd": round(ev.lmd, 6), "hr3_pct": round(ev.hr3 * 100.0, 6)}


def run_sweep(data_dir, d_model: int = 16, epochs: int = 2,
              batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
              l_h: int = 15, l_f_default: int = 15, l_m_default: int = 20,
              l_m_values=L_M_VALUES, l_f_values=L_F_VALUES) -> list[dict]:
    """Vary the pattern count, then the pending length, one axis at a time."""
    rows = []
    for l_m in l_m_values:
        metrics = _run_one(data_dir, l_h, l_f_default, l_m, d_model, epochs,
                           batch_size, lr, seed)
        rows.append({"parameter": "l_m", "value": l_m, **metrics})
    for l_f in l_f_values:
        metrics = _run_one(data_dir, l_h, l_f, l_m_default, d_model, epochs,
                           batch_size, lr, seed)
        rows.append({"parameter": "l_f", "value": l_f, **metrics})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
