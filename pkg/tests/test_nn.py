import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relformer import autodiff as ad
from relformer.autodiff import Tensor, backward
from relformer.errors import ConfigError, ShapeError, UsageError
from relformer.nn import (Adam, MlpSpec, ParamStore, clip_grad_norm, init_attention,
                          init_mlp, init_self_attention_block, layer_norm,
                          mlp_forward, mlp_forward_np, multi_head_attention,
                          self_attention_block, softmax_lastdim)

from oracles import (adam_scalar_oracle, layer_norm_oracle, mlp_oracle,
                     slow_attention_oracle, softmax_extended_oracle)


class TestParamStore:
    def test_sorted_iteration_and_duplicates(self):
        store = ParamStore()
        store.add("b.x", np.zeros(1))
        store.add("a.y", np.zeros(1))
        assert store.names() == ["a.y", "b.x"]
        with pytest.raises(UsageError, match="already registered"):
            store.add("a.y", np.zeros(1))

    def test_buffers_are_not_trainable(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        store.add("table", np.zeros(2), trainable=False)
        assert [n for n, _ in store.trainable_items()] == ["w"]


class TestMlp:
    def _make(self, spec, rng, prefix="mlp"):
        store = ParamStore()
        init_mlp(store, prefix, spec, rng)
        return store

    def test_spec_validates_dims(self):
        with pytest.raises(ConfigError, match="hidden_dim"):
            MlpSpec(3, 0, 2)

    def test_zero_params_annihilate(self, rng):
        spec = MlpSpec(3, 5, 2)
        store = ParamStore()
        init_mlp(store, "mlp", spec, rng)
        for name in ("mlp.w1", "mlp.w2", "mlp.b1", "mlp.b2"):
            store[name].data[:] = 0.0
        out = mlp_forward(store, "mlp", spec, Tensor(rng.normal(size=(4, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((4, 2)))

    def test_identity_affines_pass_nonnegative_input(self):
        spec = MlpSpec(3, 3, 3)
        store = ParamStore()
        store.add("mlp.w1", np.eye(3))
        store.add("mlp.b1", np.zeros(3))
        store.add("mlp.w2", np.eye(3))
        store.add("mlp.b2", np.zeros(3))
        x = np.array([[0.0, 1.5, 2.0], [3.0, 0.0, 0.5]])
        out = mlp_forward(store, "mlp", spec, Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_random_mlp_matches_loop_oracle(self, rng):
        spec = MlpSpec(3, 5, 2)
        store = self._make(spec, rng)
        x = rng.normal(size=(6, 3))
        out = mlp_forward(store, "mlp", spec, Tensor(x))
        expected = mlp_oracle(x, store["mlp.w1"].data, store["mlp.b1"].data,
                              store["mlp.w2"].data, store["mlp.b2"].data)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_leading_dims_preserved(self, rng):
        spec = MlpSpec(3, 4, 2)
        store = self._make(spec, rng)
        out = mlp_forward(store, "mlp", spec, Tensor(rng.normal(size=(2, 5, 3))))
        assert out.shape == (2, 5, 2)

    def test_shape_error_names_the_mlp(self, rng):
        spec = MlpSpec(3, 4, 2)
        store = self._make(spec, rng)
        with pytest.raises(ShapeError, match="mlp"):
            mlp_forward(store, "mlp", spec, Tensor(np.zeros((2, 4))))

    def test_graph_free_twin_matches(self, rng):
        spec = MlpSpec(4, 6, 3)
        store = self._make(spec, rng)
        x = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(
            mlp_forward_np(store, "mlp", spec, x),
            mlp_forward(store, "mlp", spec, Tensor(x)).data)

    def test_deterministic_function_of_inputs(self, rng):
        spec = MlpSpec(3, 5, 2)
        store = self._make(spec, rng)
        x = rng.normal(size=(4, 3))
        a = mlp_forward(store, "mlp", spec, Tensor(x)).data
        b = mlp_forward(store, "mlp", spec, Tensor(x)).data
        np.testing.assert_array_equal(a, b)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized_row_kept(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_random_rows_match_formula_oracle(self, rng):
        x = rng.normal(size=(5, 8))
        gain = rng.uniform(0.5, 2.0, size=8)
        bias = rng.normal(size=8)
        out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps=1e-5)
        np.testing.assert_allclose(out.data, layer_norm_oracle(x, gain, bias, 1e-5),
                                   atol=1e-12)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12)
           .filter(lambda row: max(row) - min(row) > 1e-3))
    @settings(max_examples=60, deadline=None)
    def test_unit_gain_rows_are_standardized(self, row):
        d = len(row)
        out = layer_norm(Tensor(np.array([row])), Tensor(np.ones(d)),
                         Tensor(np.zeros(d)), eps=1e-12).data[0]
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1.0) < 1e-6


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_lastdim(Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, 0.25)

    def test_stabilized_against_overflow(self):
        out = softmax_lastdim(Tensor(np.array([[1000.0, 0.0]])))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)
        np.testing.assert_allclose(out.data[0, 1], 0.0, atol=1e-12)

    def test_random_rows_match_extended_precision_oracle(self, rng):
        x = rng.normal(scale=5.0, size=(7, 9))
        out = softmax_lastdim(Tensor(x))
        for i in range(7):
            np.testing.assert_allclose(out.data[i], softmax_extended_oracle(x[i]),
                                       atol=1e-12)

    @given(st.lists(st.floats(-1e5, 1e5), min_size=1, max_size=16))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = softmax_lastdim(Tensor(np.array([row])))
        assert abs(out.data.sum() - 1.0) <= 1e-9


class TestAttention:
    def _block(self, d, rng, prefix="blk", hidden=None):
        store = ParamStore()
        init_self_attention_block(store, prefix, d, hidden or d, rng)
        return store

    def test_indivisible_heads_is_config_error(self, rng):
        store = self._block(6, rng)
        with pytest.raises(ConfigError, match="heads"):
            self_attention_block(store, "blk", Tensor(np.zeros((2, 6))), 4,
                                 MlpSpec(6, 6, 6))

    def test_single_token_attends_itself(self, rng):
        d = 8
        store = self._block(d, rng)
        x = rng.normal(size=(1, d))
        out = self_attention_block(store, "blk", Tensor(x), 2, MlpSpec(d, d, d))
        # with one token the attention mix is the value row itself
        h = layer_norm(Tensor(x), store["blk.ln1.g"], store["blk.ln1.b"]).data
        v = h @ store["blk.attn.wv"].data + store["blk.attn.bv"].data
        after_attn = x + (v @ store["blk.attn.wo"].data + store["blk.attn.bo"].data)
        h2 = layer_norm(Tensor(after_attn), store["blk.ln2.g"], store["blk.ln2.b"]).data
        expected = after_attn + mlp_forward_np(store, "blk.ffn", MlpSpec(d, d, d), h2)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_zero_output_projections_make_identity(self, rng):
        d = 8
        store = self._block(d, rng)
        store["blk.attn.wo"].data[:] = 0.0
        store["blk.attn.bo"].data[:] = 0.0
        store["blk.ffn.w2"].data[:] = 0.0
        store["blk.ffn.b2"].data[:] = 0.0
        x = rng.normal(size=(5, d))
        out = self_attention_block(store, "blk", Tensor(x), 4, MlpSpec(d, d, d))
        np.testing.assert_array_equal(out.data, x)

    def test_single_head_matches_slow_loop_oracle(self, rng):
        d = 6
        store = ParamStore()
        init_attention(store, "attn", d, rng)
        x = rng.normal(size=(3, d))
        out = multi_head_attention(store, "attn", Tensor(x), Tensor(x), Tensor(x),
                                   heads=1)
        expected = slow_attention_oracle(
            x, store["attn.wq"].data, store["attn.bq"].data,
            store["attn.wk"].data, store["attn.bk"].data,
            store["attn.wv"].data, store["attn.bv"].data,
            store["attn.wo"].data, store["attn.bo"].data)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_block_is_deterministic(self, rng):
        d = 8
        store = self._block(d, rng)
        x = rng.normal(size=(4, d))
        a = self_attention_block(store, "blk", Tensor(x), 2, MlpSpec(d, d, d)).data
        b = self_attention_block(store, "blk", Tensor(x), 2, MlpSpec(d, d, d)).data
        np.testing.assert_array_equal(a, b)


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        Adam(lr=0.1).step(store)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert p.grad is None

    def test_first_step_is_minus_lr(self):
        store = ParamStore()
        p = store.add("p", np.array([0.0]))
        p.grad = np.array([1.0])
        Adam(lr=0.01).step(store)
        np.testing.assert_allclose(p.data, [-0.01], atol=1e-9)

    def test_missing_grad_is_usage_error(self):
        store = ParamStore()
        store.add("p", np.zeros(1))
        with pytest.raises(UsageError, match="p"):
            Adam(lr=0.1).step(store)

    def test_ten_steps_on_quadratic_match_scalar_oracle(self):
        # minimize (theta - 3)^2 / 2, gradient = theta - 3
        store = ParamStore()
        p = store.add("p", np.array([10.0]))
        opt = Adam(lr=0.05)
        grads = []
        for _ in range(10):
            g = float(p.data[0]) - 3.0
            grads.append(g)
            p.grad = np.array([g])
            opt.step(store)
        expected = adam_scalar_oracle(10.0, grads, lr=0.05)
        np.testing.assert_allclose(p.data[0], expected[-1], atol=1e-12)

    def test_clip_grad_norm(self):
        store = ParamStore()
        p = store.add("p", np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        norm = clip_grad_norm(store, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)


class TestBackwardThroughBlocks:
    def test_block_gradients_match_finite_differences(self, rng):
        from oracles import finite_difference
        d = 8
        store = ParamStore()
        init_self_attention_block(store, "blk", d, d, rng)
        x = rng.normal(size=(3, d))

        def loss_value():
            out = self_attention_block(store, "blk", Tensor(x), 2, MlpSpec(d, d, d))
            return ad.tsum(ad.square(out))

        loss = loss_value()
        backward(loss, store)
        for name in ("blk.attn.wq", "blk.ffn.w1", "blk.ln1.g"):
            p = store[name]
            coords = rng.choice(p.data.size, size=4, replace=False)
            fd = finite_difference(lambda: loss_value().item(), p.data, coords)
            for k, g_fd in fd.items():
                g = p.grad.reshape(-1)[k]
                assert abs(g - g_fd) <= 1e-4 * max(1.0, abs(g), abs(g_fd))
