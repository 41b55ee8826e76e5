"""Command-line front end: generate, train, evaluate, predict, serve."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .config import parse_kv_file, take
from .errors import ConfigError, RouteTimeError
from .metrics import (AvgBaseline, aggregate, nearest_deadline_route,
                      report_csv, report_table)
from .model import ModelConfig
from .pipeline import (load_artifacts, prepare_data, samples_from_file,
                       save_artifacts)
from .serve import ServeConfig, serve_forever
from .synth import WorldConfig, emit_dataset, generate_records, generate_world
from .training import TrainConfig, evaluate_model, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

MODEL_KEYS = {"d_model": int, "n_blocks": int, "n_heads": int, "l_h": int,
              "l_f": int, "l_m": int, "dropout": float, "use_memory": bool,
              "use_mobility": bool}
TRAIN_KEYS = {"batch_size": int, "lr": float, "epochs": int, "patience": int,
              "clip_norm": float, "seed": int}


def _load_train_config(path) -> tuple[dict, TrainConfig]:
    """Split a key=value file into model overrides and a train config."""
    raw = parse_kv_file(path) if path else {}
    unknown = set(raw) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    model_overrides = {k: take(raw, k, cast, getattr(ModelConfig(d_input=1), k))
                       for k, cast in MODEL_KEYS.items()}
    tc = TrainConfig(**{k: take(raw, k, cast, getattr(TrainConfig(), k))
                        for k, cast in TRAIN_KEYS.items()})
    return model_overrides, tc


def cmd_generate(args) -> int:
    raw = parse_kv_file(args.config) if args.config else {}
    config = WorldConfig.from_kv(raw)
    if args.seed is not None:
        config.seed = args.seed
    world = generate_world(config)
    records = generate_records(world)
    stats = emit_dataset(records, args.out, world)
    print(f"wrote {args.out}: {stats['courier_days']} courier-days, "
          f"{stats['deliveries']} deliveries, {stats['pickups']} pickups "
          f"(pickup share {stats['pickup_share']:.1%}, "
          f"late rate {stats['deadline_violation_rate']:.1%})")
    return EXIT_OK


def cmd_train(args) -> int:
    model_overrides, tc = _load_train_config(args.config)
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.seed is not None:
        tc.seed = args.seed
    prep = prepare_data(args.data, l_h=model_overrides["l_h"],
                        l_f=model_overrides["l_f"])
    config = ModelConfig(d_input=prep.stats.d_model_input, **model_overrides)
    result = train(prep.encoded["train"], prep.encoded["val"], config, tc,
                   prep.tensors)
    save_artifacts(args.out, result, config, prep.stats, prep.tensors,
                   prep.aoi_lats, prep.aoi_lons, tc.seed)
    best = (f"best epoch {result.best_epoch} "
            f"(val RMSE {result.best_val_rmse:.3f} min)"
            if result.history else "no epochs run")
    print(f"wrote {args.out}: {best}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    artifacts = load_artifacts(args.artifacts)
    prep = prepare_data(args.data, l_h=artifacts.config.l_h,
                        l_f=artifacts.config.l_f)
    split = args.split
    ev = evaluate_model(artifacts.params, artifacts.config,
                        prep.encoded[split], artifacts.tensors)
    rows = [ev.row("model")]
    raw = prep.raw[split]
    baseline = AvgBaseline.fit(prep.raw["train"])
    y_true, y_pred, routes = [], [], []
    for s in raw:
        pred = baseline.predict(s)
        for i in range(len(s.pending)):
            if np.isfinite(pred[i]) and np.isfinite(s.truth_offsets[i]):
                y_true.append(float(s.truth_offsets[i]))
                y_pred.append(float(pred[i]))
        routes.append((s.truth_perm, nearest_deadline_route(s)))
    rows.append(aggregate(y_true, y_pred, routes).row("avg-baseline"))
    text = report_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(report_table(rows))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .features import encode_features
    from .model import predict_batch

    artifacts = load_artifacts(args.artifacts)
    cfg = artifacts.config
    samples = samples_from_file(args.data)
    fieldnames = ["courier_id", "t", "package_id", "kind", "route_position",
                  "predicted_minutes", "predicted_finish"]
    rows = []
    for lo in range(0, len(samples), 64):
        chunk_raw = samples[lo:lo + 64]
        chunk = [encode_features(s, artifacts.stats, cfg.l_h, cfg.l_f,
                                 artifacts.aoi_lats, artifacts.aoi_lons)
                 for s in chunk_raw]
        trace = predict_batch(artifacts.params, cfg, chunk, artifacts.tensors)
        for b, enc in enumerate(chunk):
            route = trace.sample_route(b)
            minutes = trace.sample_minutes(b)
            for position, row_idx in enumerate(route):
                rows.append({
                    "courier_id": enc.courier_id,
                    "t": enc.t,
                    "package_id": enc.pending_ids[row_idx],
                    "kind": "delivery" if enc.deliv_mask[row_idx] else "pickup",
                    "route_position": position,
                    "predicted_minutes": repr(round(float(minutes[position]), 6)),
                    "predicted_finish": enc.t + int(round(minutes[position] * 60)),
                })
    out = args.out or "predictions.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out}: {len(rows)} predictions over {len(samples)} samples")
    return EXIT_OK


def cmd_serve(args) -> int:
    config = ServeConfig(host=args.host, port=args.port,
                         batch_max=args.batch_max, flush_ms=args.flush_ms,
                         queue_capacity=args.queue_capacity)
    serve_forever(args.artifacts, config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routetime",
        description="courier route and delivery-time prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a synthetic courier world")
    p.add_argument("--config", help="key=value world config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="artifact output directory")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--seed", type=int, help="override training seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate artifacts on a split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--artifacts", required=True, help="artifact directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="write the report CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="offline batch predictions for a file")
    p.add_argument("--data", required=True, help="dataset file (jsonl)")
    p.add_argument("--artifacts", required=True, help="artifact directory")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="start the batch-inference service")
    p.add_argument("--artifacts", required=True, help="artifact directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7777)
    p.add_argument("--batch-max", type=int, default=16)
    p.add_argument("--flush-ms", type=float, default=20.0)
    p.add_argument("--queue-capacity", type=int, default=256)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RouteTimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
