"""Learnable pattern memory queried by attention.

A small bank of pattern vectors is matched against each fused pending-row
representation with unscaled inner products; the softmax-weighted mixture of
patterns is concatenated back onto the query.  The bank is where regularities
of the scarce pickup behaviour accumulate during training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_memory_params(rng: np.random.Generator, n_patterns: int,
                       width: int) -> dict[str, np.ndarray]:
    # pattern bank sized to the fused width so the inner product is well formed
    return {"mem.patterns": rng.standard_normal((n_patterns, width)) * 0.02}


def memory_lookup(t_c: ad.Tensor, f_mask: np.ndarray,
                  patterns: ad.Tensor) -> ad.Tensor:
    """Softmax(T_c . M^T) x M, with padded rows forced back to zero."""
    mask = np.asarray(f_mask, dtype=bool)
    scores = ad.matmul(t_c, ad.swap_last(patterns))
    weights = ad.masked_softmax(scores, np.ones(scores.data.shape[-1], dtype=bool))
    mem = ad.matmul(weights, patterns)
    return ad.mul_const(mem, mask[..., None].astype(np.float64))


def memory_scores(t_c: ad.Tensor, patterns: ad.Tensor) -> ad.Tensor:
    """Attention weights over the pattern bank (rows sum to one)."""
    scores = ad.matmul(t_c, ad.swap_last(patterns))
    return ad.masked_softmax(scores, np.ones(scores.data.shape[-1], dtype=bool))


def concat_output(t_c: ad.Tensor, mem: ad.Tensor) -> ad.Tensor:
    """Final pending-package representation [T_c || Mem]."""
    return ad.concat([t_c, mem], axis=-1)
