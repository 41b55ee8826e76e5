"""LSTM pointer decoder with mobility fusion and a per-step time head.

Decoding selects pending packages one at a time: an LSTM consumes the
representation of the previously chosen package, pointer attention scores
the remaining candidates, the scores are reweighted by the courier's
sliced mobility and distance matrices, and a fully connected head turns the
step state into a minutes-from-now estimate for the chosen package.
Already-emitted and padded positions stay at exactly zero probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import glorot
from .errors import ContractError

def init_decoder_params(rng: np.random.Generator, d_model: int, d_in: int,
                        l_f: int) -> dict[str, np.ndarray]:
    """d_in is the width of one pending-row representation (4*d_model with
    the pattern memory enabled, 2*d_model without)."""
    params = {
        "dec.lstm.wx": glorot(rng, d_in, 4 * d_model),
        "dec.lstm.wh": glorot(rng, d_model, 4 * d_model),
        "dec.lstm.b": np.zeros(4 * d_model),
        "dec.h0": rng.standard_normal((1, d_model)) * 0.02,
        "dec.c0": rng.standard_normal((1, d_model)) * 0.02,
        "dec.ptr.w1": glorot(rng, d_model, d_model),
        "dec.ptr.w2": glorot(rng, d_in, d_model),
        "dec.ptr.v": glorot(rng, d_model, 1),
        # zero-initialised so sigma(affine) is a constant 1/2 and the fused
        # probabilities start exactly equal to the pointer's; the mobility
        # pathway only moves them once it has learned to
        "dec.mob.wc": np.zeros((l_f, l_f)),
        "dec.mob.bc": np.zeros(l_f),
        "dec.mob.wd": np.zeros((l_f, l_f)),
        "dec.mob.bd": np.zeros(l_f),
        "dec.time.w": glorot(rng, d_model + d_in, 1),
        "dec.time.b": np.zeros(1),
    }
    return params


def init_state(a_t: ad.Tensor, f_mask: np.ndarray,
               bp: dict) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """First decoder input is the mean of valid rows; h0/c0 are learned."""
    mask = np.asarray(f_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("init_state: no valid pending packages")
    col = mask[:, None].astype(np.float64)
    x0 = ad.mul_const(ad.sum(ad.mul_const(a_t, col), axis=0, keepdims=True),
                      1.0 / n)
    return x0, bp["dec.h0"], bp["dec.c0"]


def lstm_step(x: ad.Tensor, h: ad.Tensor, c: ad.Tensor, bp: dict,
              d_model: int, train: bool = False, dropout: float = 0.1,
              rng: np.random.Generator | None = None):
    """One LSTM cell update; gate order [input, forget, candidate, output].

    Returns (e, h_new, c_new) where e is the (possibly dropout-regularised)
    output vector used by the pointer and time heads.
    """
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


def pointer_scores(e: ad.Tensor, attn_proj: ad.Tensor, available: np.ndarray,
                   bp: dict) -> tuple[ad.Tensor, np.ndarray]:
    """Additive pointer scores v^T(W1 e + W2 A_t^i) for available packages.

    ``attn_proj`` is the step-invariant A_t @ W2, precomputed per sample.
    Emitted and padded packages are excluded through the returned mask
    rather than literal -inf, which keeps the tape clean of non-finite
    values.
    """
    mix = ad.add(attn_proj, ad.matmul(e, bp["dec.ptr.w1"]))
    scores = ad.swap_last(ad.matmul(mix, bp["dec.ptr.v"]))  # (1, L_f)
    return scores, np.asarray(available, dtype=bool)[None, :]


def intermediate_probs(scores: ad.Tensor, available: np.ndarray) -> ad.Tensor:
    """Masked softmax of the pointer scores over available packages."""
    return ad.masked_softmax(scores, available)


def mobility_gates(m_c_slice: np.ndarray, m_d_slice: np.ndarray, tape: ad.Tape,
                   bp: dict) -> tuple[ad.Tensor, ad.Tensor]:
    """sigmoid(affine(M')) for both sliced matrices, once per sample."""
    s_c = ad.sigmoid(ad.affine(tape.tensor(m_c_slice),
                               bp["dec.mob.wc"], bp["dec.mob.bc"]))
    s_d = ad.sigmoid(ad.affine(tape.tensor(m_d_slice),
                               bp["dec.mob.wd"], bp["dec.mob.bd"]))
    return s_c, s_d


def mobility_fuse(u: ad.Tensor, s_c: ad.Tensor, s_d: ad.Tensor,
                  available: np.ndarray) -> ad.Tensor:
    """Final step probabilities: softmax(u + u@S_C + u@S_D) over available."""
    r_c = ad.matmul(u, s_c)
    r_d = ad.matmul(u, s_d)
    return ad.masked_softmax(ad.add(u, ad.add(r_c, r_d)), available)


def select_next(probs: np.ndarray, available: np.ndarray) -> int:
    """Argmax over available packages; ties break to the lowest index."""
    masked = np.where(available, probs, -1.0)
    return int(np.argmax(masked))


def time_head(e: ad.Tensor, a_row: ad.Tensor, bp: dict) -> ad.Tensor:
    """Non-negative minutes-from-query-time for the chosen package."""
    z = ad.concat([e, a_row], axis=1)
    return ad.relu(ad.affine(z, bp["dec.time.w"], bp["dec.time.b"]))


@dataclass
class DecodeTrace:
    """Per-step record of one decoded sample."""

    chosen: list[int] = field(default_factory=list)
    u_values: list[np.ndarray] = field(default_factory=list)
    p_values: list[np.ndarray] = field(default_factory=list)
    p_tensors: list[ad.Tensor] = field(default_factory=list)
    y_tensors: list[ad.Tensor] = field(default_factory=list)
    available_masks: list[np.ndarray] = field(default_factory=list)

    @property
    def y_minutes(self) -> np.ndarray:
        return np.array([float(y.data.reshape(-1)[0]) for y in self.y_tensors])


def decode_route(a_t: ad.Tensor, f_mask: np.ndarray, m_c_slice: np.ndarray,
                 m_d_slice: np.ndarray, bp: dict, d_model: int,
                 mode: str = "greedy", truth_perm: np.ndarray | None = None,
                 use_mobility: bool = True, train: bool = False,
                 dropout: float = 0.1,
                 rng: np.random.Generator | None = None) -> DecodeTrace:
    """Run the full pointer decode for one sample (2-d ``a_t``: L_f x d_in).

    ``teacher`` mode follows the ground-truth permutation for both the next
    LSTM input and the emitted mask; ``greedy`` mode follows its own argmax.
    Exactly n steps are taken, n being the number of valid pending packages.
    """
    if mode not in ("teacher", "greedy"):
        raise ContractError(f"unknown decode mode '{mode}'")
    if mode == "teacher" and truth_perm is None:
        raise ContractError("teacher-forced decoding requires the true permutation")
    mask = np.asarray(f_mask, dtype=bool)
    n = int(mask.sum())
    if n < 1:
        raise ContractError("decode_route: no valid pending packages")
    tape = a_t.tape
    x, h, c = init_state(a_t, mask, bp)
    attn_proj = ad.matmul(a_t, bp["dec.ptr.w2"])
    if use_mobility:
        s_c, s_d = mobility_gates(m_c_slice, m_d_slice, tape, bp)
    emitted = np.zeros_like(mask)
    trace = DecodeTrace()
    for step in range(n):
        e, h, c = lstm_step(x, h, c, bp, d_model, train=train,
                            dropout=dropout, rng=rng)
        available = mask & ~emitted
        scores, avail_row = pointer_scores(e, attn_proj, available, bp)
        u = intermediate_probs(scores, avail_row)
        if use_mobility:
            p = mobility_fuse(u, s_c, s_d, avail_row)
        else:
            p = ad.masked_softmax(u, avail_row)
        if mode == "teacher":
            chosen = int(truth_perm[step])
            if not available[chosen]:
                raise ContractError("ground-truth permutation revisits a package")
        else:
            chosen = select_next(p.data[0], available)
        a_row = ad.gather_rows(a_t, np.array([chosen]))
        y = time_head(e, a_row, bp)
        trace.chosen.append(chosen)
        trace.u_values.append(u.data[0].copy())
        trace.p_values.append(p.data[0].copy())
        trace.p_tensors.append(p)
        trace.y_tensors.append(y)
        trace.available_masks.append(available.copy())
        emitted = emitted.copy()
        emitted[chosen] = True
        x = a_row
    return trace
