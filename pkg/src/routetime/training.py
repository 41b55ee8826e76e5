"""Multi-task loss assembly and the Adam training loop.

The main loss is mean squared minutes over supervised delivery steps of a
teacher-forced decode; the auxiliary loss is cross entropy of the true next
package.  They are combined as main + softplus(a) * aux with a learnable,
positivity-constrained weight initialised at one.  Pickup steps advance the
decoder but are excluded from the time loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .batch_decode import batch_loss_aux, batch_loss_main, decode_batch_fast
from .decoder import DecodeTrace
from .errors import ConfigError, NumericError
from .features import EncodedSample
from .metrics import EvalResult, aggregate
from .mobility import MobilityTensors
from .model import (ModelConfig, bind, encode_batch, init_params,
                    mobility_slices, predict_batch)
from .optim import AdamState, adam_step, clip_global_norm

PROB_FLOOR = 1e-12


def _mean_scalar(terms: list[ad.Tensor]) -> ad.Tensor:
    stacked = ad.concat(terms, axis=0) if len(terms) > 1 else terms[0]
    return ad.mean(stacked)


def loss_main(traces: list[DecodeTrace], batch: list[EncodedSample],
              tape: ad.Tape) -> tuple[ad.Tensor, int]:
    """Mean squared minutes over delivery steps, averaged per sample then
    over the batch; all-pickup samples contribute zero and are counted."""
    sample_means = []
    skipped = 0
    for trace, sample in zip(traces, batch):
        terms = []
        for step, chosen in enumerate(trace.chosen):
            offset = sample.truth_offsets[chosen]
            if not sample.deliv_mask[chosen] or not np.isfinite(offset):
                continue
            diff = ad.add_const(trace.y_tensors[step], -float(offset))
            terms.append(ad.mul(diff, diff))
        if terms:
            sample_means.append(ad.reshape(_mean_scalar(terms), (1, 1)))
        else:
            skipped += 1
    if not sample_means:
        return tape.tensor(0.0), skipped
    total = ad.mul_const(ad.sum(ad.concat(sample_means, axis=0)),
                         1.0 / len(batch))
    return total, skipped


def loss_aux(traces: list[DecodeTrace], batch: list[EncodedSample]) -> ad.Tensor:
    """Mean negative log-probability of the true package over all steps."""
    sample_means = []
    for trace, sample in zip(traces, batch):
        terms = []
        for step, p in enumerate(trace.p_tensors):
            true_next = int(sample.truth_perm[step])
            picked = ad.narrow(p, 1, true_next, 1)
            terms.append(ad.neg(ad.log(ad.clamp_min(picked, PROB_FLOOR))))
        sample_means.append(ad.reshape(_mean_scalar(terms), (1, 1)))
    return ad.mul_const(ad.sum(ad.concat(sample_means, axis=0)),
                        1.0 / len(batch))


def combined_loss(main: ad.Tensor, aux: ad.Tensor,
                  alpha_raw: ad.Tensor) -> tuple[ad.Tensor, float]:
    """main + softplus(a) * aux; gradient flows into the raw weight."""
    alpha = ad.softplus(alpha_raw)
    total = ad.add(ad.reshape(main, (1,)), ad.mul(alpha, ad.reshape(aux, (1,))))
    return total, float(alpha.data[0])


def alpha_value(params: dict[str, np.ndarray]) -> float:
    return float(np.logaddexp(0.0, params["loss.alpha_raw"][0]))


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 30
    patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.clip_norm <= 0:
            raise ConfigError("lr must be >= 0 and clip_norm positive")


HISTORY_COLUMNS = ["epoch", "train_loss", "train_main", "train_aux", "alpha",
                   "val_rmse", "val_mape", "val_lmd", "val_hr3"]


def history_to_csv(history: list[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = float("inf")
    no_delivery_samples: int = 0


def collect_predictions(params: dict[str, np.ndarray], config: ModelConfig,
                        samples: list[EncodedSample],
                        tensors: MobilityTensors | None,
                        batch_size: int = 64) -> list[dict]:
    """Greedy decode; one record per sample with routes and delivery times."""
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        trace = predict_batch(params, config, chunk, tensors)
        for b, sample in enumerate(chunk):
            route = trace.sample_route(b)
            y_true, y_pred = [], []
            for step, chosen in enumerate(route):
                offset = sample.truth_offsets[chosen]
                if sample.deliv_mask[chosen] and np.isfinite(offset):
                    y_true.append(float(offset))
                    y_pred.append(float(trace.y_tensors[step].data[b, 0]))
            out.append({"truth_perm": sample.truth_perm, "route": route,
                        "y_true": y_true, "y_pred": y_pred,
                        "has_pickup": sample.has_pickup})
    return out


def metrics_from_predictions(predictions: list[dict],
                             inference_seconds: float = 0.0) -> EvalResult:
    y_true = [v for p in predictions for v in p["y_true"]]
    y_pred = [v for p in predictions for v in p["y_pred"]]
    route_pairs = [(p["truth_perm"], p["route"]) for p in predictions]
    return aggregate(y_true, y_pred, route_pairs,
                     inference_seconds=inference_seconds)


def evaluate_model(params: dict[str, np.ndarray], config: ModelConfig,
                   samples: list[EncodedSample],
                   tensors: MobilityTensors | None,
                   batch_size: int = 64) -> EvalResult:
    """Greedy decode and pooled metrics over an evaluation split."""
    started = time.perf_counter()
    predictions = collect_predictions(params, config, samples, tensors,
                                      batch_size)
    seconds = time.perf_counter() - started
    return metrics_from_predictions(predictions, inference_seconds=seconds)


def train(train_samples: list[EncodedSample], val_samples: list[EncodedSample],
          model_config: ModelConfig, train_config: TrainConfig,
          tensors: MobilityTensors | None) -> TrainResult:
    """Mini-batch Adam over teacher-forced decoding, deterministic per seed.

    Keeps the parameters with the best validation RMSE; stops early after
    ``patience`` epochs without improvement.
    """
    train_config.validate()
    model_config.validate()
    params = init_params(model_config, train_config.seed)
    state = AdamState(params)
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 23]))
    slices_all = mobility_slices(
        train_samples, tensors if model_config.use_mobility else None)
    result = TrainResult(params={k: v.copy() for k, v in params.items()})
    bad_epochs = 0
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(train_samples))
        epoch_loss, epoch_main, epoch_aux, n_batches = 0.0, 0.0, 0.0, 0
        for lo in range(0, len(order), train_config.batch_size):
            idx = order[lo:lo + train_config.batch_size]
            chunk = [train_samples[i] for i in idx]
            slices = [slices_all[i] for i in idx]
            try:
                tape = ad.Tape()
                bp = bind(tape, params)
                a_t = encode_batch(tape, bp, chunk, model_config)
                trace = decode_batch_fast(a_t, chunk, slices, bp, model_config,
                                          mode="teacher", train=True, rng=rng)
                main, skipped = batch_loss_main(trace, chunk, tape)
                aux = batch_loss_aux(trace, chunk, PROB_FLOOR)
                total, _ = combined_loss(main, aux, bp["loss.alpha_raw"])
                grads = ad.backward(tape, total)
            except NumericError as exc:
                couriers = sorted({s.courier_id for s in chunk})
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {n_batches} "
                    f"(couriers {couriers[:5]}): {exc}") from exc
            result.no_delivery_samples += skipped
            named = {k: grads[bp[k].id] for k in params if bp[k].id in grads}
            named = clip_global_norm(named, train_config.clip_norm)
            params = adam_step(params, named, state, train_config.lr)
            epoch_loss += float(total.data.reshape(-1)[0])
            epoch_main += float(main.data.reshape(-1)[0])
            epoch_aux += float(aux.data.reshape(-1)[0])
            n_batches += 1
        val = evaluate_model(params, model_config, val_samples, tensors)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "train_main": epoch_main / max(n_batches, 1),
            "train_aux": epoch_aux / max(n_batches, 1),
            "alpha": alpha_value(params),
            "val_rmse": val.rmse_min,
            "val_mape": val.mape_pct,
            "val_lmd": val.lmd,
            "val_hr3": val.hr3,
        }
        result.history.append(row)
        if val.rmse_min < result.best_val_rmse:
            result.best_val_rmse = val.rmse_min
            result.best_epoch = epoch
            result.params = {k: v.copy() for k, v in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_config.patience:
                break
    if train_config.epochs == 0:
        result.params = params
    return result
