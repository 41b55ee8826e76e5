"""Vectorised pointer decoding over a whole batch.

Numerically this mirrors the per-sample ``decoder.decode_route`` (every
operation is row-parallel across samples), but runs each decode step once
for the entire batch.  Samples with fewer pending packages than the longest
one keep stepping against a sentinel position; their surplus steps are never
read by losses or metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .features import EncodedSample


@dataclass
class BatchTrace:
    """Step-major record of a batched decode."""

    n_steps: np.ndarray                      # (B,) valid steps per sample
    chosen: np.ndarray                       # (B, max_n) selected rows
    p_tensors: list[ad.Tensor] = field(default_factory=list)   # (B, L_f) per step
    y_tensors: list[ad.Tensor] = field(default_factory=list)   # (B, 1) per step
    u_values: list[np.ndarray] = field(default_factory=list)
    available: list[np.ndarray] = field(default_factory=list)  # (B, L_f) per step

    def sample_route(self, b: int) -> np.ndarray:
        return self.chosen[b, :self.n_steps[b]]

    def sample_minutes(self, b: int) -> np.ndarray:
        return np.array([float(self.y_tensors[j].data[b, 0])
                         for j in range(self.n_steps[b])])


def _batched_lstm(x, h, c, bp, d_model, train, dropout, rng):
    gates = ad.add(ad.add(ad.matmul(x, bp["dec.lstm.wx"]),
                          ad.matmul(h, bp["dec.lstm.wh"])),
                   bp["dec.lstm.b"])
    i = ad.sigmoid(ad.narrow(gates, 1, 0, d_model))
    f = ad.sigmoid(ad.narrow(gates, 1, d_model, d_model))
    g = ad.tanh(ad.narrow(gates, 1, 2 * d_model, d_model))
    o = ad.sigmoid(ad.narrow(gates, 1, 3 * d_model, d_model))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    e = h_new
    if train and dropout > 0.0:
        e = ad.dropout(e, dropout, True, rng)
    return e, h_new, c_new


def decode_batch_fast(a_t: ad.Tensor, batch: list[EncodedSample], slices,
                      bp: dict, config, mode: str, train: bool = False,
                      rng: np.random.Generator | None = None) -> BatchTrace:
    """Teacher-forced or greedy decode of the whole batch on one tape."""
    if mode not in ("teacher", "greedy"):
        raise ContractError(f"unknown decode mode '{mode}'")
    tape = a_t.tape
    n_batch = len(batch)
    l_f = config.l_f
    f_mask = np.stack([s.f_mask for s in batch])          # (B, L_f)
    n_steps = f_mask.sum(axis=1).astype(np.intp)
    if (n_steps < 1).any():
        raise ContractError("decode: a sample has no valid pending packages")
    max_n = int(n_steps.max())
    if mode == "teacher":
        truth = np.zeros((n_batch, max_n), dtype=np.intp)
        for b, s in enumerate(batch):
            if s.truth_perm is None:
                raise ContractError("teacher-forced decoding requires ground truth")
            truth[b, :n_steps[b]] = s.truth_perm

    # step-invariant pieces
    counts = f_mask.sum(axis=1, keepdims=True).astype(np.float64)
    x = ad.mul_const(ad.sum(ad.mul_const(a_t, f_mask[:, :, None].astype(np.float64)),
                            axis=1), 1.0 / counts)        # (B, d_in) mean row
    h = ad.broadcast_to(bp["dec.h0"], (n_batch, config.d_model))
    c = ad.broadcast_to(bp["dec.c0"], (n_batch, config.d_model))
    attn_proj = ad.matmul(a_t, bp["dec.ptr.w2"])          # (B, L_f, d_model)
    if config.use_mobility:
        m_c = tape.tensor(np.stack([s[0] for s in slices]))
        m_d = tape.tensor(np.stack([s[1] for s in slices]))
        s_c = ad.sigmoid(ad.affine(m_c, bp["dec.mob.wc"], bp["dec.mob.bc"]))
        s_d = ad.sigmoid(ad.affine(m_d, bp["dec.mob.wd"], bp["dec.mob.bd"]))

    emitted = np.zeros_like(f_mask)
    chosen_all = np.zeros((n_batch, max_n), dtype=np.intp)
    trace = BatchTrace(n_steps=n_steps, chosen=chosen_all)
    rows = np.arange(n_batch)
    for step in range(max_n):
        active = step < n_steps
        e, h, c = _batched_lstm(x, h, c, bp, config.d_model, train,
                                config.dropout, rng)
        available = f_mask & ~emitted
        # finished samples point at a sentinel so the softmax stays defined
        available[~active, :] = False
        available[~active, 0] = True
        mix = ad.add(attn_proj, ad.reshape(ad.matmul(e, bp["dec.ptr.w1"]),
                                           (n_batch, 1, config.d_model)))
        scores = ad.reshape(ad.matmul(mix, bp["dec.ptr.v"]), (n_batch, l_f))
        u = ad.masked_softmax(scores, available)
        if config.use_mobility:
            r_c = ad.reshape(ad.matmul(ad.reshape(u, (n_batch, 1, l_f)), s_c),
                             (n_batch, l_f))
            r_d = ad.reshape(ad.matmul(ad.reshape(u, (n_batch, 1, l_f)), s_d),
                             (n_batch, l_f))
            p = ad.masked_softmax(ad.add(u, ad.add(r_c, r_d)), available)
        else:
            p = ad.masked_softmax(u, available)
        if mode == "teacher":
            chosen = truth[:, step].copy()
            chosen[~active] = 0
        else:
            chosen = np.argmax(np.where(available, p.data, -1.0), axis=1)
            chosen[~active] = 0
        a_rows = ad.select_rows(a_t, chosen)              # (B, d_in)
        y = ad.relu(ad.affine(ad.concat([e, a_rows], axis=1),
                              bp["dec.time.w"], bp["dec.time.b"]))
        chosen_all[:, step] = chosen
        trace.p_tensors.append(p)
        trace.y_tensors.append(y)
        trace.u_values.append(u.data.copy())
        trace.available.append(available.copy())
        emitted = emitted.copy()
        emitted[rows[active], chosen[active]] = True
        x = a_rows
    return trace


def batch_loss_main(trace: BatchTrace, batch: list[EncodedSample],
                    tape: ad.Tape) -> tuple[ad.Tensor, int]:
    """Vectorised counterpart of ``training.loss_main`` (identical value)."""
    n_batch = len(batch)
    max_n = trace.chosen.shape[1]
    weights = np.zeros((n_batch, max_n))
    targets = np.zeros((n_batch, max_n))
    skipped = 0
    for b, s in enumerate(batch):
        hits = 0
        for j in range(trace.n_steps[b]):
            k = trace.chosen[b, j]
            if s.deliv_mask[k] and np.isfinite(s.truth_offsets[k]):
                weights[b, j] = 1.0
                targets[b, j] = s.truth_offsets[k]
                hits += 1
        if hits:
            weights[b] /= hits
        else:
            skipped += 1
    total = None
    for j in range(max_n):
        if not weights[:, j].any():
            continue
        diff = ad.add_const(trace.y_tensors[j], -targets[:, j:j + 1])
        term = ad.mul_const(ad.mul(diff, diff), weights[:, j:j + 1])
        total = term if total is None else ad.add(total, term)
    if total is None:
        return tape.tensor(0.0), skipped
    return ad.mul_const(ad.sum(total), 1.0 / n_batch), skipped


def batch_loss_aux(trace: BatchTrace, batch: list[EncodedSample],
                   floor: float = 1e-12) -> ad.Tensor:
    """Vectorised counterpart of ``training.loss_aux`` (identical value)."""
    n_batch = len(batch)
    max_n = trace.chosen.shape[1]
    weights = np.zeros((n_batch, max_n))
    truth = np.zeros((n_batch, max_n), dtype=np.intp)
    for b, s in enumerate(batch):
        n = trace.n_steps[b]
        weights[b, :n] = 1.0 / n
        truth[b, :n] = s.truth_perm
    total = None
    for j in range(max_n):
        picked = ad.reshape(ad.select_rows(trace.p_tensors[j], truth[:, j]),
                            (n_batch, 1))
        nll = ad.neg(ad.log(ad.clamp_min(picked, floor)))
        term = ad.mul_const(nll, weights[:, j:j + 1])
        total = term if total is None else ad.add(total, term)
    return ad.mul_const(ad.sum(total), 1.0 / n_batch)
