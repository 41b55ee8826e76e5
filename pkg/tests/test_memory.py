import numpy as np

from routetime import autodiff as ad
from routetime.memory import (
    concat_output, init_memory_params, memory_lookup, memory_scores,
)
from routetime.optim import AdamState, adam_step

from helpers import rel_err

WIDTH = 16  # fused representation width (2 * d_model)


class TestLookup:
    def test_single_pattern_collapses_softmax(self):
        rng = np.random.default_rng(0)
        tape = ad.Tape()
        patterns = tape.tensor(rng.normal(size=(1, WIDTH)))
        t_c = tape.tensor(rng.normal(size=(3, WIDTH)))
        mem = memory_lookup(t_c, np.ones(3, dtype=bool), patterns)
        for row in mem.data:
            np.testing.assert_allclose(row, patterns.data[0], atol=1e-12)

    def test_orthogonal_query_gives_uniform_scores(self):
        tape = ad.Tape()
        patterns = np.zeros((4, WIDTH))
        patterns[:, :4] = np.eye(4)  # patterns live in the first 4 dims
        query = np.zeros((1, WIDTH))
        query[0, -1] = 3.0  # orthogonal to every pattern
        scores = memory_scores(tape.tensor(query), tape.tensor(patterns))
        np.testing.assert_allclose(scores.data[0], 0.25, atol=1e-12)

    def test_scores_sum_to_one_and_mem_is_convex_combination(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            l_m = int(rng.integers(2, 8))
            n = int(rng.integers(1, 6))
            tape = ad.Tape()
            patterns = tape.tensor(rng.normal(size=(l_m, WIDTH)))
            t_c = tape.tensor(rng.normal(size=(n, WIDTH)))
            scores = memory_scores(t_c, patterns)
            mem = memory_lookup(t_c, np.ones(n, dtype=bool), patterns)
            np.testing.assert_allclose(scores.data.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(scores.data >= 0.0)
            # explicit convex-combination recomputation
            for i in range(n):
                mix = np.zeros(WIDTH)
                for j in range(l_m):
                    mix += scores.data[i, j] * patterns.data[j]
                assert rel_err(mem.data[i], mix) < 1e-12

    def test_padded_rows_zero(self):
        rng = np.random.default_rng(2)
        tape = ad.Tape()
        patterns = tape.tensor(rng.normal(size=(5, WIDTH)))
        t_c = np.zeros((4, WIDTH))
        t_c[:2] = rng.normal(size=(2, WIDTH))
        mem = memory_lookup(tape.tensor(t_c), np.array([True, True, False, False]),
                            patterns)
        np.testing.assert_array_equal(mem.data[2:], 0.0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        patterns_arr = rng.normal(size=(6, WIDTH))
        rows = rng.normal(size=(5, WIDTH))
        perm = rng.permutation(5)

        def run(x):
            tape = ad.Tape()
            return memory_lookup(tape.tensor(x), np.ones(5, dtype=bool),
                                 tape.tensor(patterns_arr)).data

        base = run(rows)
        permuted = run(rows[perm])
        assert rel_err(permuted, base[perm]) < 1e-12

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        patterns_arr = rng.normal(size=(6, WIDTH))
        batch = rng.normal(size=(3, 4, WIDTH))
        mask = np.ones((3, 4), dtype=bool)
        tape = ad.Tape()
        out = memory_lookup(tape.tensor(batch), mask, tape.tensor(patterns_arr))
        for b in range(3):
            tape2 = ad.Tape()
            single = memory_lookup(tape2.tensor(batch[b]), mask[b],
                                   tape2.tensor(patterns_arr))
            assert rel_err(out.data[b], single.data) < 1e-12


class TestConcatOutput:
    def test_paper_scale_shape(self):
        # d_model = 64: fused rows are 128 wide, final representation 256
        tape = ad.Tape()
        t_c = tape.tensor(np.zeros((15, 128)))
        mem = tape.tensor(np.zeros((15, 128)))
        assert concat_output(t_c, mem).data.shape == (15, 256)

    def test_zero_memory_right_half(self):
        rng = np.random.default_rng(5)
        tape = ad.Tape()
        t_c = tape.tensor(rng.normal(size=(3, WIDTH)))
        mem = tape.tensor(np.zeros((3, WIDTH)))
        out = concat_output(t_c, mem)
        np.testing.assert_array_equal(out.data[:, :WIDTH], t_c.data)
        np.testing.assert_array_equal(out.data[:, WIDTH:], 0.0)

    def test_row_permutation(self):
        rng = np.random.default_rng(6)
        tape = ad.Tape()
        t_c = rng.normal(size=(4, WIDTH))
        mem = rng.normal(size=(4, WIDTH))
        out = concat_output(tape.tensor(t_c), tape.tensor(mem)).data
        perm = [2, 0, 3, 1]
        out_p = concat_output(tape.tensor(t_c[perm]), tape.tensor(mem[perm])).data
        np.testing.assert_array_equal(out_p, out[perm])


class TestLearning:
    def test_gradients_reach_the_pattern_bank(self):
        rng = np.random.default_rng(7)
        params = init_memory_params(rng, 5, WIDTH)
        tape = ad.Tape()
        patterns = tape.tensor(params["mem.patterns"])
        t_c = tape.tensor(rng.normal(size=(3, WIDTH)))
        mem = memory_lookup(t_c, np.ones(3, dtype=bool), patterns)
        loss = ad.mean(ad.mul(mem, mem))
        grads = ad.backward(tape, loss)
        state = AdamState(params)
        updated = adam_step(params, {"mem.patterns": grads[patterns.id]},
                            state, lr=1e-3)
        delta = np.linalg.norm(updated["mem.patterns"] - params["mem.patterns"])
        assert delta > 0.0

    def test_memory_learns_a_planted_minority_pattern(self):
        # frozen upstream representations: a planted direction marks the rare
        # positive rows; training only the bank and a readout must cut loss
        rng = np.random.default_rng(8)
        planted = rng.normal(size=WIDTH)
        planted /= np.linalg.norm(planted)
        n = 60
        rows = rng.normal(size=(n, WIDTH)) * 0.3
        labels = np.zeros(n)
        minority = rng.choice(n, size=8, replace=False)
        rows[minority] += planted * 2.0
        labels[minority] = 1.0

        params = init_memory_params(rng, 4, WIDTH)
        params["readout.w"] = rng.normal(size=(WIDTH, 1)) * 0.1
        params["readout.b"] = np.zeros(1)
        state = AdamState(params)

        def step(current, update):
            tape = ad.Tape()
            bp = {k: tape.tensor(v) for k, v in current.items()}
            mem = memory_lookup(tape.tensor(rows), np.ones(n, dtype=bool),
                                bp["mem.patterns"])
            logits = ad.affine(mem, bp["readout.w"], bp["readout.b"])
            pred = ad.sigmoid(logits)
            err = ad.add_const(pred, -labels[:, None])
            loss = ad.mean(ad.mul(err, err))
            if not update:
                return float(loss.data), current
            grads = ad.backward(tape, loss)
            named = {k: grads[bp[k].id] for k in current if bp[k].id in grads}
            return float(loss.data), adam_step(current, named, state, lr=0.01)

        loss0, _ = step(params, update=False)
        current = params
        for _ in range(80):
            _, current = step(current, update=True)
        loss_end, _ = step(current, update=False)
        assert loss_end < loss0 * 0.9
        moved = np.linalg.norm(current["mem.patterns"] - params["mem.patterns"])
        assert moved > 0.0
