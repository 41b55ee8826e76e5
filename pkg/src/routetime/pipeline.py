"""End-to-end glue: dataset directory -> encoded splits -> trained artifacts.

An artifact directory holds everything inference needs: the parameter
checkpoint (with the model config in its meta), fitted feature statistics,
mobility tensors with the AOI table, and the training history.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import Sample, parse_dataset, read_aoi_table, split_routes
from .errors import ParseError
from .features import EncodedSample, FeatureStats, encode_features, fit_feature_stats
from .mobility import MobilityTensors, build_mobility
from .model import MODEL_VERSION, ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .training import TrainResult, history_to_csv

CHECKPOINT_FILE = "checkpoint.ckpt"
STATS_FILE = "feature_stats.json"
MOBILITY_FILE = "mobility.npz"
HISTORY_FILE = "history.csv"


@dataclass
class PreparedData:
    stats: FeatureStats
    tensors: MobilityTensors
    aoi_lats: np.ndarray
    aoi_lons: np.ndarray
    raw: dict[str, list[Sample]] = field(default_factory=dict)
    encoded: dict[str, list[EncodedSample]] = field(default_factory=dict)


def samples_from_file(path) -> list[Sample]:
    return [s for record in parse_dataset(path) for s in split_routes(record)
            if len(s.pending) > 0]


def prepare_data(data_dir, l_h: int, l_f: int,
                 splits=("train", "val", "test")) -> PreparedData:
    """Parse a generated dataset directory into encoded, model-ready splits.

    Feature statistics and mobility tensors come from the training split
    only.
    """
    aoi_lats, aoi_lons = read_aoi_table(os.path.join(data_dir, "aoi_table.jsonl"))
    raw = {name: samples_from_file(os.path.join(data_dir, f"{name}.jsonl"))
           for name in splits}
    train_records = parse_dataset(os.path.join(data_dir, "train.jsonl"))
    stats = fit_feature_stats(raw["train"])
    tensors = build_mobility(train_records, aoi_lats, aoi_lons)
    prepared = PreparedData(stats=stats, tensors=tensors,
                            aoi_lats=aoi_lats, aoi_lons=aoi_lons, raw=raw)
    for name, samples in raw.items():
        prepared.encoded[name] = [
            encode_features(s, stats, l_h, l_f, aoi_lats, aoi_lons)
            for s in samples]
    return prepared


def save_artifacts(out_dir, result: TrainResult, config: ModelConfig,
                   stats: FeatureStats, tensors: MobilityTensors,
                   aoi_lats: np.ndarray, aoi_lons: np.ndarray,
                   seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = {"model_version": MODEL_VERSION, "seed": seed,
            "config": config.to_meta()}
    save_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE), result.params, meta)
    with open(os.path.join(out_dir, STATS_FILE), "w", encoding="utf-8") as fh:
        json.dump(stats.to_json(), fh, indent=2, sort_keys=True)
    np.savez(os.path.join(out_dir, MOBILITY_FILE), m_c=tensors.m_c,
             m_d=tensors.m_d, aoi_lats=aoi_lats, aoi_lons=aoi_lons)
    with open(os.path.join(out_dir, HISTORY_FILE), "w", encoding="utf-8") as fh:
        fh.write(history_to_csv(result.history))


@dataclass
class Artifacts:
    params: dict[str, np.ndarray]
    config: ModelConfig
    stats: FeatureStats
    tensors: MobilityTensors
    aoi_lats: np.ndarray
    aoi_lons: np.ndarray
    meta: dict


def load_artifacts(artifact_dir) -> Artifacts:
    params, meta = load_checkpoint(os.path.join(artifact_dir, CHECKPOINT_FILE))
    if meta.get("model_version") != MODEL_VERSION:
        raise ParseError(f"checkpoint was written by "
                         f"'{meta.get('model_version')}', expected "
                         f"'{MODEL_VERSION}'")
    config = ModelConfig.from_meta(meta["config"])
    with open(os.path.join(artifact_dir, STATS_FILE), "r", encoding="utf-8") as fh:
        stats = FeatureStats.from_json(json.load(fh))
    blob = np.load(os.path.join(artifact_dir, MOBILITY_FILE))
    tensors = MobilityTensors(m_c=blob["m_c"], m_d=blob["m_d"])
    return Artifacts(params=params, config=config, stats=stats,
                     tensors=tensors, aoi_lats=blob["aoi_lats"],
                     aoi_lons=blob["aoi_lons"], meta=meta)
