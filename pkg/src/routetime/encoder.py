"""Two-branch Transformer encoder over package feature matrices.

The historical branch carries sinusoidal positional encoding (completion
order matters); the pending branch deliberately does not, keeping it
permutation equivariant.  Each branch embeds rows to the model width and
stacks post-norm blocks of masked multi-head self-attention and a
position-wise feed-forward.  The fused representation broadcasts the last
valid historical row onto every pending row.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateInputError

FF_RATIO = 4  # feed-forward inner width multiplier


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table: sin on even dims, cos on odd dims."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None
                       else (fan_in, fan_out))


def init_branch_params(rng, prefix: str, d_input: int, d_model: int,
                       n_blocks: int, n_heads: int) -> dict[str, np.ndarray]:
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    params = {
        f"{prefix}.embed.w": glorot(rng, d_input, d_model),
        f"{prefix}.embed.b": np.zeros(d_model),
    }
    for blk in range(n_blocks):
        p = f"{prefix}.block{blk}"
        for h in range(n_heads):
            params[f"{p}.head{h}.wq"] = glorot(rng, d_model, d_head)
            params[f"{p}.head{h}.wk"] = glorot(rng, d_model, d_head)
            params[f"{p}.head{h}.wv"] = glorot(rng, d_model, d_head)
        params[f"{p}.attn_out.w"] = glorot(rng, d_model, d_model)
        params[f"{p}.attn_out.b"] = np.zeros(d_model)
        params[f"{p}.ln1.gamma"] = np.ones(d_model)
        params[f"{p}.ln1.beta"] = np.zeros(d_model)
        params[f"{p}.ff1.w"] = glorot(rng, d_model, FF_RATIO * d_model)
        params[f"{p}.ff1.b"] = np.zeros(FF_RATIO * d_model)
        params[f"{p}.ff2.w"] = glorot(rng, FF_RATIO * d_model, d_model)
        params[f"{p}.ff2.b"] = np.zeros(d_model)
        params[f"{p}.ln2.gamma"] = np.ones(d_model)
        params[f"{p}.ln2.beta"] = np.zeros(d_model)
    return params


def encoder_block(x: ad.Tensor, mask: np.ndarray, bp: dict, prefix: str,
                  n_heads: int, d_model: int,
                  attn_mask: np.ndarray | None = None) -> ad.Tensor:
    """One post-norm block; key-side masking, padded rows re-zeroed.

    ``attn_mask`` (defaults to ``mask``) is what the softmax sees; rows are
    re-zeroed with the real ``mask`` afterwards.  The split lets a batch
    containing empty histories run: those samples attend to a sentinel key
    and their rows are discarded.
    """
    mask = np.asarray(mask, dtype=bool)
    if attn_mask is None:
        attn_mask = mask
    if not attn_mask.any():
        raise DegenerateInputError("encoder_block: every row is masked")
    key_mask = attn_mask[..., None, :]  # broadcast over query rows
    scale = 1.0 / np.sqrt(d_model / n_heads)
    heads = []
    for h in range(n_heads):
        q = ad.matmul(x, bp[f"{prefix}.head{h}.wq"])
        k = ad.matmul(x, bp[f"{prefix}.head{h}.wk"])
        v = ad.matmul(x, bp[f"{prefix}.head{h}.wv"])
        scores = ad.mul_const(ad.matmul(q, ad.swap_last(k)), scale)
        attn = ad.masked_softmax(scores, key_mask)
        heads.append(ad.matmul(attn, v))
    mh = ad.affine(ad.concat(heads, axis=-1),
                   bp[f"{prefix}.attn_out.w"], bp[f"{prefix}.attn_out.b"])
    x = ad.layer_norm(ad.add(x, mh),
                      bp[f"{prefix}.ln1.gamma"], bp[f"{prefix}.ln1.beta"])
    ff = ad.affine(ad.relu(ad.affine(x, bp[f"{prefix}.ff1.w"],
                                     bp[f"{prefix}.ff1.b"])),
                   bp[f"{prefix}.ff2.w"], bp[f"{prefix}.ff2.b"])
    x = ad.layer_norm(ad.add(x, ff),
                      bp[f"{prefix}.ln2.gamma"], bp[f"{prefix}.ln2.beta"])
    return ad.mul_const(x, mask[..., None].astype(np.float64))


def encode_branch(x: ad.Tensor, mask: np.ndarray, bp: dict, prefix: str,
                  n_blocks: int, n_heads: int, d_model: int,
                  use_positions: bool,
                  attn_mask: np.ndarray | None = None) -> ad.Tensor:
    """Embed rows, optionally add positional encoding, then run the stack."""
    mask = np.asarray(mask, dtype=bool)
    out = ad.affine(x, bp[f"{prefix}.embed.w"], bp[f"{prefix}.embed.b"])
    if use_positions:
        out = ad.add_const(out, positional_encoding(x.data.shape[-2], d_model))
    out = ad.mul_const(out, mask[..., None].astype(np.float64))
    for blk in range(n_blocks):
        out = encoder_block(out, mask, bp, f"{prefix}.block{blk}",
                            n_heads, d_model, attn_mask=attn_mask)
    return out


def encode_history(h: ad.Tensor, h_mask: np.ndarray, bp: dict, n_blocks: int,
                   n_heads: int, d_model: int) -> ad.Tensor:
    """Historical branch: positional encoding applied.

    Samples with no completed packages still flow through: attention sees a
    sentinel first row, the output rows stay zero, and ``fuse`` swaps in the
    learned start-of-history representation.
    """
    mask = np.asarray(h_mask, dtype=bool)
    attn_mask = mask
    empty = ~mask.any(axis=-1)
    if empty.any():
        attn_mask = mask.copy()
        attn_mask[..., 0] = attn_mask[..., 0] | empty
    return encode_branch(h, mask, bp, "hist", n_blocks, n_heads, d_model,
                         use_positions=True, attn_mask=attn_mask)


def encode_pending(f: ad.Tensor, f_mask: np.ndarray, bp: dict, n_blocks: int,
                   n_heads: int, d_model: int) -> ad.Tensor:
    """Pending branch: no positional encoding (order is unknown at inference)."""
    if not np.asarray(f_mask, dtype=bool).any():
        raise DegenerateInputError("encode_pending: sample has no pending packages")
    return encode_branch(f, f_mask, bp, "fut", n_blocks, n_heads, d_model,
                         use_positions=False)


def last_history_row(t_h: ad.Tensor, h_mask: np.ndarray,
                     bp: dict) -> ad.Tensor:
    """Representation of the last completed package, batched.

    Samples with an empty history fall back to the learned start-of-history
    row instead.
    """
    mask = np.asarray(h_mask, dtype=bool)
    if t_h.data.ndim == 2:  # single sample: lift to a batch of one
        t_h = ad.reshape(t_h, (1,) + t_h.data.shape)
        mask = mask[None, :]
    counts = mask.sum(axis=1)
    idx = np.maximum(counts - 1, 0)
    has_history = (counts > 0).astype(np.float64)[:, None]
    gathered = ad.select_rows(t_h, idx)
    start = bp["hist.start_row"]  # (1, d_model)
    return ad.add(ad.mul_const(gathered, has_history),
                  ad.mul_const(start, 1.0 - has_history))


def fuse(t_h: ad.Tensor, h_mask: np.ndarray, t_f: ad.Tensor,
         f_mask: np.ndarray, bp: dict) -> ad.Tensor:
    """Broadcast-concatenate the last historical row onto every pending row."""
    f_mask = np.asarray(f_mask, dtype=bool)
    h_star = last_history_row(t_h, h_mask, bp)
    if t_f.data.ndim == 2:
        l_f = t_f.data.shape[0]
        h_be = ad.broadcast_to(h_star, (l_f, h_star.data.shape[-1]))
    else:
        b, l_f = t_f.data.shape[0], t_f.data.shape[1]
        h_be = ad.broadcast_to(ad.reshape(h_star, (b, 1, h_star.data.shape[-1])),
                               (b, l_f, h_star.data.shape[-1]))
    t_c = ad.concat([h_be, t_f], axis=-1)
    return ad.mul_const(t_c, f_mask[..., None].astype(np.float64))
