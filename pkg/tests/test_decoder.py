import numpy as np
import pytest

from routetime import autodiff as ad
from routetime.decoder import (
    decode_route, init_decoder_params, init_state, intermediate_probs,
    lstm_step, mobility_fuse, mobility_gates, pointer_scores, select_next,
    time_head,
)
from routetime.errors import ContractError

from helpers import fd_gradient, rel_err

D_MODEL = 8
D_IN = 4 * D_MODEL
L_F = 5


def make_params(seed=0, l_f=L_F):
    rng = np.random.default_rng(seed)
    return init_decoder_params(rng, D_MODEL, D_IN, l_f)


def bind(tape, params):
    return {k: tape.tensor(v) for k, v in params.items()}


class TestInitState:
    def test_single_package_mean_is_its_row(self):
        params = make_params()
        tape = ad.Tape()
        bp = bind(tape, params)
        a = np.zeros((L_F, D_IN))
        a[0] = np.random.default_rng(1).normal(size=D_IN)
        mask = np.array([True] + [False] * (L_F - 1))
        x0, h0, c0 = init_state(tape.tensor(a), mask, bp)
        np.testing.assert_array_equal(x0.data[0], a[0])
        np.testing.assert_array_equal(h0.data, params["dec.h0"])

    def test_two_identical_rows(self):
        params = make_params()
        tape = ad.Tape()
        bp = bind(tape, params)
        row = np.random.default_rng(2).normal(size=D_IN)
        a = np.zeros((L_F, D_IN))
        a[0] = a[1] = row
        mask = np.array([True, True] + [False] * (L_F - 2))
        x0, _, _ = init_state(tape.tensor(a), mask, bp)
        np.testing.assert_allclose(x0.data[0], row, atol=1e-12)

    def test_padded_rows_excluded(self):
        params = make_params()
        tape = ad.Tape()
        bp = bind(tape, params)
        a = np.ones((L_F, D_IN)) * 100.0
        a[0] = 2.0
        mask = np.array([True] + [False] * (L_F - 1))
        x0, _, _ = init_state(tape.tensor(a), mask, bp)
        np.testing.assert_array_equal(x0.data[0], np.full(D_IN, 2.0))

    def test_no_valid_packages_rejected(self):
        params = make_params()
        tape = ad.Tape()
        bp = bind(tape, params)
        with pytest.raises(ContractError):
            init_state(tape.tensor(np.zeros((L_F, D_IN))),
                       np.zeros(L_F, dtype=bool), bp)


class TestLstmStep:
    def test_zero_weights_gate_oracle(self):
        # all gates sit at sigmoid(0) = 0.5 and the candidate at tanh(0) = 0,
        # so c' = 0.5 c and h' = 0.5 tanh(0.5 c); recomputed with scalars
        params = {k: np.zeros_like(v) for k, v in make_params().items()}
        tape = ad.Tape()
        bp = bind(tape, params)
        rng = np.random.default_rng(3)
        x = tape.tensor(rng.normal(size=(1, D_IN)))
        c_prev = rng.normal(size=(1, D_MODEL))
        h_prev = rng.normal(size=(1, D_MODEL))
        e, h_new, c_new = lstm_step(x, tape.tensor(h_prev),
                                    tape.tensor(c_prev), bp, D_MODEL)
        expected_c = np.array([[0.5 * c for c in c_prev[0]]])
        expected_h = np.array([[0.5 * np.tanh(0.5 * c) for c in c_prev[0]]])
        np.testing.assert_allclose(c_new.data, expected_c, atol=1e-12)
        np.testing.assert_allclose(h_new.data, expected_h, atol=1e-12)

    def test_eval_mode_deterministic(self):
        params = make_params()
        rng = np.random.default_rng(4)
        x_arr = rng.normal(size=(1, D_IN))
        h_arr = rng.normal(size=(1, D_MODEL))
        c_arr = rng.normal(size=(1, D_MODEL))

        def run():
            tape = ad.Tape()
            bp = bind(tape, params)
            e, h, c = lstm_step(tape.tensor(x_arr), tape.tensor(h_arr),
                                tape.tensor(c_arr), bp, D_MODEL)
            return e.data

        assert run().tobytes() == run().tobytes()

    def test_gradients_match_finite_differences(self):
        params = make_params(seed=5)
        rng = np.random.default_rng(6)
        arrays = dict(params)
        arrays["x"] = rng.normal(size=(1, D_IN))
        arrays["h"] = rng.normal(size=(1, D_MODEL))
        arrays["c"] = rng.normal(size=(1, D_MODEL))
        scal = rng.normal(size=(1, D_MODEL))

        def build(arrs):
            tape = ad.Tape()
            bp = bind(tape, arrs)
            e, h, c = lstm_step(bp["x"], bp["h"], bp["c"], bp, D_MODEL)
            return tape, bp, ad.sum(ad.mul_const(ad.concat([e, c], axis=1),
                                                 np.concatenate([scal, scal], axis=1)))

        tape, bp, loss = build(arrays)
        grads = ad.backward(tape, loss)
        for name in ("dec.lstm.wx", "dec.lstm.wh", "dec.lstm.b", "x", "h", "c"):
            fd = fd_gradient(lambda arrs: float(build(arrs)[2].data), arrays, name)
            assert rel_err(grads[bp[name].id], fd) < 1e-4, name


class TestPointer:
    def test_all_but_one_emitted(self):
        params = make_params()
        tape = ad.Tape()
        bp = bind(tape, params)
        rng = np.random.default_rng(7)
        a = tape.tensor(rng.normal(size=(L_F, D_IN)))
        e = tape.tensor(rng.normal(size=(1, D_MODEL)))
        attn_proj = ad.matmul(a, bp["dec.ptr.w2"])
        available = np.array([False, False, True, False, False])
        scores, avail = pointer_scores(e, attn_proj, available, bp)
        u = intermediate_probs(scores, avail)
        np.testing.assert_array_equal(u.data[0],
                                      [0.0, 0.0, 1.0, 0.0, 0.0])

    def test_zero_v_gives_uniform(self):
        params = make_params()
        params["dec.ptr.v"] = np.zeros_like(params["dec.ptr.v"])
        tape = ad.Tape()
        bp = bind(tape, params)
        rng = np.random.default_rng(8)
        a = tape.tensor(rng.normal(size=(L_F, D_IN)))
        e = tape.tensor(rng.normal(size=(1, D_MODEL)))
        attn_proj = ad.matmul(a, bp["dec.ptr.w2"])
        available = np.array([True, True, True, True, False])
        scores, avail = pointer_scores(e, attn_proj, available, bp)
        u = intermediate_probs(scores, avail)
        np.testing.assert_allclose(u.data[0][:4], 0.25, atol=1e-12)
        assert u.data[0][4] == 0.0


class TestMobilityFuse:
    def setup_probs(self, params, m_c, m_d, u_row, available):
        tape = ad.Tape()
        bp = bind(tape, params)
        u = tape.tensor(u_row[None, :])
        s_c, s_d = mobility_gates(m_c, m_d, tape, bp)
        p = mobility_fuse(u, s_c, s_d, available[None, :])
        return p.data[0]

    def test_large_negative_affine_degenerates_to_pointer_only(self):
        params = make_params(l_f=3)
        params["dec.mob.wc"] = np.zeros((3, 3))
        params["dec.mob.bc"] = np.full(3, -500.0)  # sigmoid -> ~0
        params["dec.mob.wd"] = np.zeros((3, 3))
        params["dec.mob.bd"] = np.full(3, -500.0)
        u_row = np.array([0.7, 0.2, 0.1])
        available = np.array([True, True, True])
        p = self.setup_probs(params, np.eye(3), np.eye(3), u_row, available)
        expected = np.exp(u_row) / np.exp(u_row).sum()
        np.testing.assert_allclose(p, expected, atol=1e-12)

    def test_uniform_inputs_stay_uniform(self):
        params = make_params(l_f=4)
        u_row = np.full(4, 0.25)
        available = np.ones(4, dtype=bool)
        sym = np.full((4, 4), 0.25)
        # symmetric matrices and uniform u: every position is interchangeable
        params["dec.mob.wc"] = np.full((4, 4), 0.3)
        params["dec.mob.bc"] = np.full(4, 0.1)
        params["dec.mob.wd"] = np.full((4, 4), -0.2)
        params["dec.mob.bd"] = np.full(4, 0.4)
        p = self.setup_probs(params, sym, sym, u_row, available)
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_two_package_scalar_oracle(self):
        import math
        params = make_params(l_f=2)
        rng = np.random.default_rng(9)
        for k in ("dec.mob.wc", "dec.mob.wd"):
            params[k] = rng.normal(size=(2, 2)) * 0.5
        for k in ("dec.mob.bc", "dec.mob.bd"):
            params[k] = rng.normal(size=2) * 0.5
        m_c = np.array([[0.3, 0.7], [0.6, 0.4]])
        m_d = np.array([[0.2, 0.8], [0.5, 0.5]])
        u_row = np.array([0.8, 0.2])
        p = self.setup_probs(params, m_c, m_d, u_row,
                             np.ones(2, dtype=bool))

        # independent scalar recomputation
        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        s_c = [[sig(sum(m_c[r][k] * params["dec.mob.wc"][k][c] for k in range(2))
                    + params["dec.mob.bc"][c]) for c in range(2)]
               for r in range(2)]
        s_d = [[sig(sum(m_d[r][k] * params["dec.mob.wd"][k][c] for k in range(2))
                    + params["dec.mob.bd"][c]) for c in range(2)]
               for r in range(2)]
        r_c = [sum(u_row[k] * s_c[k][c] for k in range(2)) for c in range(2)]
        r_d = [sum(u_row[k] * s_d[k][c] for k in range(2)) for c in range(2)]
        z = [u_row[c] + r_c[c] + r_d[c] for c in range(2)]
        top = max(z)
        exps = [math.exp(v - top) for v in z]
        expected = [v / sum(exps) for v in exps]
        np.testing.assert_allclose(p, expected, rtol=1e-12)


class TestSelectAndTimeHead:
    def test_select_examples(self):
        assert select_next(np.array([0.0, 1.0, 0.0]), np.ones(3, dtype=bool)) == 1
        assert select_next(np.array([0.5, 0.5]), np.ones(2, dtype=bool)) == 0
        assert select_next(np.array([0.0, 0.0, 1.0]),
                           np.array([False, False, True])) == 2

    def test_time_head_zero_weights(self):
        params = {k: np.zeros_like(v) for k, v in make_params().items()}
        tape = ad.Tape()
        bp = bind(tape, params)
        e = tape.tensor(np.ones((1, D_MODEL)))
        a_row = tape.tensor(np.ones((1, D_IN)))
        y = time_head(e, a_row, bp)
        assert y.data[0, 0] == 0.0

    def test_relu_floor(self):
        params = make_params()
        params["dec.time.w"] = np.zeros_like(params["dec.time.w"])
        params["dec.time.b"] = np.array([-5.0])
        tape = ad.Tape()
        bp = bind(tape, params)
        y = time_head(tape.tensor(np.ones((1, D_MODEL))),
                      tape.tensor(np.ones((1, D_IN))), bp)
        assert y.data[0, 0] == 0.0

    def test_time_head_gradcheck(self):
        params = make_params(seed=11)
        rng = np.random.default_rng(12)
        arrays = {"dec.time.w": params["dec.time.w"],
                  "dec.time.b": np.array([0.3]),
                  "e": rng.normal(size=(1, D_MODEL)),
                  "a": rng.normal(size=(1, D_IN))}

        def build(arrs):
            tape = ad.Tape()
            bp = bind(tape, arrs)
            return tape, bp, ad.sum(time_head(bp["e"], bp["a"], bp))

        tape, bp, loss = build(arrays)
        grads = ad.backward(tape, loss)
        for name in arrays:
            fd = fd_gradient(lambda arrs: float(build(arrs)[2].data), arrays, name)
            assert rel_err(grads[bp[name].id], fd) < 1e-4, name


class TestDecodeRoute:
    def run_decode(self, n, seed, mode="greedy", truth=None, l_f=L_F):
        params = make_params(seed=seed, l_f=l_f)
        rng = np.random.default_rng(seed + 100)
        tape = ad.Tape()
        bp = bind(tape, params)
        a = np.zeros((l_f, D_IN))
        a[:n] = rng.normal(size=(n, D_IN))
        mask = np.zeros(l_f, dtype=bool)
        mask[:n] = True
        m_c = np.zeros((l_f, l_f))
        m_d = np.zeros((l_f, l_f))
        m_c[:n, :n] = 1.0 / n
        m_d[:n, :n] = 1.0 / n
        return decode_route(tape.tensor(a), mask, m_c, m_d, bp, D_MODEL,
                            mode=mode, truth_perm=truth)

    def test_single_package(self):
        trace = self.run_decode(1, seed=13)
        assert trace.chosen == [0]
        np.testing.assert_allclose(trace.p_values[0][0], 1.0)

    def test_greedy_routes_are_permutations(self):
        rng = np.random.default_rng(14)
        for trial in range(100):
            n = int(rng.integers(1, L_F + 1))
            trace = self.run_decode(n, seed=int(rng.integers(0, 10_000)))
            assert sorted(trace.chosen) == list(range(n))
            for p_row, avail in zip(trace.p_values, trace.available_masks):
                assert abs(p_row[avail].sum() - 1.0) < 1e-9
                assert np.all(p_row[~avail] == 0.0)

    def test_available_set_shrinks_by_one(self):
        trace = self.run_decode(4, seed=15)
        sizes = [mask.sum() for mask in trace.available_masks]
        assert sizes == [4, 3, 2, 1]

    def test_emitted_package_never_returns(self):
        trace = self.run_decode(5, seed=16)
        for step, chosen in enumerate(trace.chosen):
            for later in range(step + 1, len(trace.p_values)):
                assert trace.p_values[later][chosen] == 0.0

    def test_teacher_mode_follows_truth(self):
        truth = np.array([2, 0, 1, 3])
        trace = self.run_decode(4, seed=17, mode="teacher", truth=truth)
        assert trace.chosen == truth.tolist()

    def test_teacher_without_truth_rejected(self):
        with pytest.raises(ContractError):
            self.run_decode(3, seed=18, mode="teacher", truth=None)

    def test_predicted_minutes_nonnegative(self):
        trace = self.run_decode(5, seed=19)
        assert np.all(trace.y_minutes >= 0.0)
