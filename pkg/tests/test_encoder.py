import math

import numpy as np
import pytest

from routetime import autodiff as ad
from routetime.encoder import (
    encode_history, encode_pending, encoder_block, fuse, init_branch_params,
    positional_encoding,
)
from routetime.errors import ConfigError, DegenerateInputError

from helpers import fd_gradient, rel_err

D_MODEL = 8
N_HEADS = 2
N_BLOCKS = 2
D_INPUT = 5


def branch_params(seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    params.update(init_branch_params(rng, "hist", D_INPUT, D_MODEL, N_BLOCKS,
                                     N_HEADS))
    params.update(init_branch_params(rng, "fut", D_INPUT, D_MODEL, N_BLOCKS,
                                     N_HEADS))
    params["hist.start_row"] = rng.standard_normal((1, D_MODEL)) * 0.02
    return params


class TestPositionalEncoding:
    def test_position_zero(self):
        pe = positional_encoding(4, 6)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_scalar_value_pos1_dim0(self):
        pe = positional_encoding(2, 8)
        assert abs(pe[1, 0] - math.sin(1.0)) < 1e-12
        assert abs(pe[1, 0] - 0.84147) < 1e-5

    def test_entries_bounded(self):
        pe = positional_encoding(50, 16)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            positional_encoding(4, 7)


class TestEncoderBlock:
    def test_single_valid_token(self):
        # softmax over one key is 1, so attention output is that row's V
        # projection for every head
        params = branch_params()
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        x = np.zeros((3, D_MODEL))
        x[0] = np.random.default_rng(1).normal(size=D_MODEL)
        mask = np.array([True, False, False])
        xt = tape.tensor(x)
        heads = []
        for h in range(N_HEADS):
            v = ad.matmul(xt, bp[f"hist.block0.head{h}.wv"])
            heads.append(v.data[0])
        out = encoder_block(xt, mask, bp, "hist.block0", N_HEADS, D_MODEL)
        # reconstruct: attention output for the valid row must equal its V
        # projection; verify through the first residual by recomputing
        q = x[0] @ params["hist.block0.head0.wq"]
        k = x[0] @ params["hist.block0.head0.wk"]
        attn_out_head0 = x[0] @ params["hist.block0.head0.wv"]  # weight is 1
        mh = np.concatenate([x[0] @ params[f"hist.block0.head{h}.wv"]
                             for h in range(N_HEADS)])
        assert np.allclose(mh[:D_MODEL // N_HEADS], attn_out_head0)
        assert out.data.shape == (3, D_MODEL)
        np.testing.assert_array_equal(out.data[1:], 0.0)

    def test_masked_rows_stay_zero_and_do_not_influence(self):
        params = branch_params()
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, D_INPUT))
        mask = np.array([True, True, False, False])

        def run(x_input):
            tape = ad.Tape()
            bp = {k: tape.tensor(v) for k, v in params.items()}
            out = encode_pending(tape.tensor(x_input), mask, bp, N_BLOCKS,
                                 N_HEADS, D_MODEL)
            return out.data

        base = run(x)
        poisoned = x.copy()
        poisoned[2:] = 1e3  # junk in padded rows
        after = run(poisoned)
        np.testing.assert_array_equal(base[:2], after[:2])
        np.testing.assert_array_equal(after[2:], 0.0)

    def test_all_rows_masked_rejected(self):
        params = branch_params()
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        with pytest.raises(DegenerateInputError):
            encoder_block(tape.tensor(np.ones((2, D_MODEL))),
                          np.array([False, False]), bp, "hist.block0",
                          N_HEADS, D_MODEL)

    def test_permutation_equivariance_without_positions(self):
        params = branch_params()
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, D_INPUT))
        mask = np.ones(5, dtype=bool)
        perm = rng.permutation(5)

        def run(x_input):
            tape = ad.Tape()
            bp = {k: tape.tensor(v) for k, v in params.items()}
            return encode_pending(tape.tensor(x_input), mask, bp, N_BLOCKS,
                                  N_HEADS, D_MODEL).data

        base = run(x)
        permuted = run(x[perm])
        assert rel_err(permuted, base[perm]) < 1e-9


class TestBranches:
    def test_empty_history_uses_learned_start_row(self):
        params = branch_params()
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        t_h = encode_history(tape.tensor(np.zeros((3, D_INPUT))),
                             np.zeros(3, dtype=bool), bp, N_BLOCKS, N_HEADS,
                             D_MODEL)
        t_f = encode_pending(tape.tensor(np.random.default_rng(0).normal(
            size=(2, D_INPUT))), np.ones(2, dtype=bool), bp, N_BLOCKS,
            N_HEADS, D_MODEL)
        t_c = fuse(t_h, np.zeros(3, dtype=bool), t_f, np.ones(2, dtype=bool), bp)
        np.testing.assert_array_equal(t_c.data[0, :D_MODEL],
                                      params["hist.start_row"][0])

    def test_history_is_position_sensitive(self):
        params = branch_params()
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, D_INPUT))
        mask = np.ones(4, dtype=bool)

        def run(x_input):
            tape = ad.Tape()
            bp = {k: tape.tensor(v) for k, v in params.items()}
            return encode_history(tape.tensor(x_input), mask, bp, N_BLOCKS,
                                  N_HEADS, D_MODEL).data

        base = run(x)
        swapped = x.copy()
        swapped[[0, 1]] = swapped[[1, 0]]
        other = run(swapped)
        assert np.max(np.abs(base - other)) > 1e-9

    def test_deterministic(self):
        params = branch_params()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, D_INPUT))
        mask = np.ones(4, dtype=bool)

        def run():
            tape = ad.Tape()
            bp = {k: tape.tensor(v) for k, v in params.items()}
            return encode_history(tape.tensor(x), mask, bp, N_BLOCKS,
                                  N_HEADS, D_MODEL).data

        assert run().tobytes() == run().tobytes()

    def test_empty_pending_rejected(self):
        params = branch_params()
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        with pytest.raises(DegenerateInputError):
            encode_pending(tape.tensor(np.zeros((2, D_INPUT))),
                           np.zeros(2, dtype=bool), bp, N_BLOCKS, N_HEADS,
                           D_MODEL)


class TestFuse:
    def test_rows_are_concatenation(self):
        params = branch_params()
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        rng = np.random.default_rng(6)
        t_h = tape.tensor(rng.normal(size=(3, D_MODEL)))
        t_f = tape.tensor(rng.normal(size=(4, D_MODEL)))
        h_mask = np.array([True, True, False])
        f_mask = np.ones(4, dtype=bool)
        t_c = fuse(t_h, h_mask, t_f, f_mask, bp)
        h_star = t_h.data[1]  # last valid row
        for i in range(4):
            np.testing.assert_array_equal(t_c.data[i, :D_MODEL], h_star)
            np.testing.assert_array_equal(t_c.data[i, D_MODEL:], t_f.data[i])

    def test_zero_history_rows_give_zero_left_half(self):
        params = branch_params()
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        t_h = tape.tensor(np.zeros((2, D_MODEL)))
        t_f = tape.tensor(np.random.default_rng(7).normal(size=(3, D_MODEL)))
        t_c = fuse(t_h, np.array([True, True]), t_f, np.ones(3, dtype=bool), bp)
        np.testing.assert_array_equal(t_c.data[:, :D_MODEL], 0.0)
        np.testing.assert_array_equal(t_c.data[:, D_MODEL:], t_f.data)

    def test_paper_scale_shapes(self):
        # L_f = 15 pending rows at width 64 fuse to 15 x 128
        rng = np.random.default_rng(8)
        params = {}
        params.update(init_branch_params(rng, "hist", 10, 64, 1, 4))
        params.update(init_branch_params(rng, "fut", 10, 64, 1, 4))
        params["hist.start_row"] = np.zeros((1, 64))
        tape = ad.Tape()
        bp = {k: tape.tensor(v) for k, v in params.items()}
        t_h = encode_history(tape.tensor(rng.normal(size=(15, 10))),
                             np.ones(15, dtype=bool), bp, 1, 4, 64)
        t_f = encode_pending(tape.tensor(rng.normal(size=(15, 10))),
                             np.ones(15, dtype=bool), bp, 1, 4, 64)
        t_c = fuse(t_h, np.ones(15, dtype=bool), t_f, np.ones(15, dtype=bool), bp)
        assert t_c.data.shape == (15, 128)


class TestEncoderGradients:
    def test_full_encoder_matches_finite_differences(self):
        params = branch_params(seed=9)
        rng = np.random.default_rng(10)
        h = rng.normal(size=(3, D_INPUT))
        f = rng.normal(size=(4, D_INPUT))
        h_mask = np.array([True, True, False])
        f_mask = np.array([True, True, True, False])

        # a plain sum over the post-norm output is constant in the inputs
        # (unit-gamma layer norm rows always sum to sum(beta)), so scalarise
        # with fixed random weights instead
        scal = rng.normal(size=(4, 2 * D_MODEL))

        def build(arrs):
            tape = ad.Tape()
            bp = {k: tape.tensor(v) for k, v in arrs.items()}
            t_h = encode_history(tape.tensor(h), h_mask, bp, N_BLOCKS,
                                 N_HEADS, D_MODEL)
            t_f = encode_pending(tape.tensor(f), f_mask, bp, N_BLOCKS,
                                 N_HEADS, D_MODEL)
            t_c = fuse(t_h, h_mask, t_f, f_mask, bp)
            return tape, bp, ad.sum(ad.mul_const(t_c, scal))

        tape, bp, loss = build(params)
        grads = ad.backward(tape, loss)
        # a representative spread of parameter tensors, checked coordinatewise
        for name in ("hist.embed.w", "fut.block1.head0.wq", "hist.start_row",
                     "fut.block0.ff1.w", "hist.block1.ln2.gamma",
                     "fut.block1.attn_out.b"):
            fd = fd_gradient(lambda arrs: float(build(arrs)[2].data), params, name)
            analytic = grads.get(bp[name].id, np.zeros_like(params[name]))
            assert rel_err(analytic, fd) < 1e-4, name
