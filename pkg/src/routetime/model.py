"""Full model assembly: config, parameter init, batched forward passes.

The encoder and pattern memory run batched over stacked sample matrices;
pointer decoding is inherently sequential per sample, so it loops over the
batch on the same tape.  Ablation flags drop the pattern memory (narrower
decoder input) or the mobility reweighting (pointer-only probabilities).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .decoder import DecodeTrace, decode_route, init_decoder_params
from .encoder import encode_history, encode_pending, fuse, init_branch_params
from .errors import ConfigError
from .features import EncodedSample
from .memory import concat_output, init_memory_params, memory_lookup
from .mobility import MobilityTensors, slice_mobility

MODEL_VERSION = "routetime-1"

# raw value whose softplus is exactly 1, the initial loss weight
ALPHA_RAW_INIT = float(np.log(np.expm1(1.0)))


@dataclass
class ModelConfig:
    d_input: int
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    l_h: int = 15
    l_f: int = 15
    l_m: int = 20
    dropout: float = 0.1
    use_memory: bool = True
    use_mobility: bool = True

    @property
    def d_in(self) -> int:
        """Width of one decoder input row."""
        return (4 if self.use_memory else 2) * self.d_model

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for positional encoding")
        for name in ("d_input", "l_h", "l_f", "l_m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model config '{name}' must be >= 1")

    def to_meta(self) -> dict:
        return asdict(self)

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(**{k: meta[k] for k in cls.__dataclass_fields__})


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    params = {}
    params.update(init_branch_params(rng, "hist", config.d_input,
                                     config.d_model, config.n_blocks,
                                     config.n_heads))
    params.update(init_branch_params(rng, "fut", config.d_input,
                                     config.d_model, config.n_blocks,
                                     config.n_heads))
    params["hist.start_row"] = rng.standard_normal((1, config.d_model)) * 0.02
    if config.use_memory:
        params.update(init_memory_params(rng, config.l_m, 2 * config.d_model))
    params.update(init_decoder_params(rng, config.d_model, config.d_in,
                                      config.l_f))
    params["loss.alpha_raw"] = np.array([ALPHA_RAW_INIT])
    return params


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(config, 0).items()}


def bind(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    """Bind current parameter values onto a fresh tape."""
    return {k: tape.tensor(v) for k, v in params.items()}


def stack_batch(batch: list[EncodedSample]):
    h = np.stack([s.h for s in batch])
    h_mask = np.stack([s.h_mask for s in batch])
    f = np.stack([s.f for s in batch])
    f_mask = np.stack([s.f_mask for s in batch])
    return h, h_mask, f, f_mask


def encode_batch(tape: ad.Tape, bp: dict, batch: list[EncodedSample],
                 config: ModelConfig) -> ad.Tensor:
    """Run both encoder branches, fuse, and (optionally) query the memory.

    Returns A_t of shape (B, L_f, d_in); padded rows are zero.
    """
    h, h_mask, f, f_mask = stack_batch(batch)
    t_h = encode_history(tape.tensor(h), h_mask, bp, config.n_blocks,
                         config.n_heads, config.d_model)
    t_f = encode_pending(tape.tensor(f), f_mask, bp, config.n_blocks,
                         config.n_heads, config.d_model)
    t_c = fuse(t_h, h_mask, t_f, f_mask, bp)
    if not config.use_memory:
        return t_c
    mem = memory_lookup(t_c, f_mask, bp["mem.patterns"])
    return concat_output(t_c, mem)


def mobility_slices(batch: list[EncodedSample],
                    tensors: MobilityTensors | None):
    """Per-sample sliced (M_C', M_D'); zero matrices when mobility is off."""
    out = []
    for s in batch:
        if tensors is None:
            l_f = len(s.f_mask)
            out.append((np.zeros((l_f, l_f)), np.zeros((l_f, l_f))))
        else:
            out.append(slice_mobility(tensors, s.pending_aois, s.slot))
    return out


def decode_batch(a_t: ad.Tensor, batch: list[EncodedSample], slices,
                 bp: dict, config: ModelConfig, mode: str,
                 train: bool = False,
                 rng: np.random.Generator | None = None) -> list[DecodeTrace]:
    traces = []
    l_f, d_in = config.l_f, config.d_in
    for b, sample in enumerate(batch):
        a_b = ad.reshape(ad.narrow(a_t, 0, b, 1), (l_f, d_in))
        m_c, m_d = slices[b]
        traces.append(decode_route(
            a_b, sample.f_mask, m_c, m_d, bp, config.d_model, mode=mode,
            truth_perm=sample.truth_perm if mode == "teacher" else None,
            use_mobility=config.use_mobility, train=train,
            dropout=config.dropout, rng=rng))
    return traces


def predict_batch(params: dict[str, np.ndarray], config: ModelConfig,
                  batch: list[EncodedSample],
                  tensors: MobilityTensors | None):
    """Greedy inference for a batch; deterministic, no dropout.

    Returns a ``BatchTrace`` from the vectorised decoder.
    """
    from .batch_decode import decode_batch_fast

    tape = ad.Tape()
    bp = bind(tape, params)
    a_t = encode_batch(tape, bp, batch, config)
    slices = mobility_slices(batch, tensors if config.use_mobility else None)
    return decode_batch_fast(a_t, batch, slices, bp, config, mode="greedy",
                             train=False)
