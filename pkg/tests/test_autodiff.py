import numpy as np
import pytest

from relformer import autodiff as ad
from relformer.autodiff import Tensor, backward
from relformer.errors import ShapeError, UsageError
from relformer.nn import ParamStore

from oracles import finite_difference


class TestBasics:
    def test_tensor_wraps_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.grad is None

    def test_matmul_shape_error_names_operands(self):
        with pytest.raises(ShapeError, match="inner dims"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError, match="scalar"):
            backward(x + 1.0)

    def test_backward_twice_is_an_error(self):
        x = Tensor(2.0, requires_grad=True)
        loss = ad.tsum(ad.square(x))
        backward(loss)
        with pytest.raises(UsageError, match="already called"):
            backward(loss)


class TestGradients:
    def test_sum_of_params_gives_unit_grads(self):
        store = ParamStore()
        a = store.add("a", np.ones((2, 3)))
        b = store.add("b", np.ones(4))
        loss = ad.tsum(a) + ad.tsum(b)
        backward(loss, store)
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones(4))

    def test_zero_times_params_gives_zero_grads(self):
        store = ParamStore()
        a = store.add("a", np.full((3, 2), 7.0))
        loss = ad.tsum(ad.mul(a, 0.0))
        backward(loss, store)
        np.testing.assert_array_equal(a.grad, np.zeros((3, 2)))

    def test_unreachable_params_get_zero_grads(self):
        store = ParamStore()
        a = store.add("a", np.ones(2))
        b = store.add("b", np.ones(2))
        backward(ad.tsum(ad.square(a)), store)
        np.testing.assert_array_equal(b.grad, np.zeros(2))

    def test_reused_tensor_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))  # d/dx x^2 = 2x
        backward(loss)
        np.testing.assert_allclose(x.grad, 6.0)

    @pytest.mark.parametrize("op_name", [
        "add", "sub", "mul", "div", "matmul", "relu", "exp", "log", "sqrt",
        "square", "clip", "reshape", "transpose", "concat", "stack", "getitem",
        "take", "tsum", "tmean",
    ])
    def test_op_gradients_match_finite_differences(self, op_name, rng):
        a_val = rng.uniform(0.3, 1.7, size=(3, 4))
        b_val = rng.uniform(0.3, 1.7, size=(3, 4))
        a = Tensor(a_val.copy(), requires_grad=True)
        b = Tensor(b_val.copy(), requires_grad=True)

        def build():
            ops = {
                "add": lambda: a + b,
                "sub": lambda: a - b,
                "mul": lambda: a * b,
                "div": lambda: a / b,
                "matmul": lambda: ad.matmul(a, ad.transpose(b)),
                "relu": lambda: ad.relu(a - 1.0),
                "exp": lambda: ad.exp(a),
                "log": lambda: ad.log(a),
                "sqrt": lambda: ad.sqrt(a),
                "square": lambda: ad.square(a),
                "clip": lambda: ad.clip(a, 0.5, 1.5),
                "reshape": lambda: ad.reshape(a, (2, 6)),
                "transpose": lambda: ad.transpose(a),
                "concat": lambda: ad.concat([a, b], axis=1),
                "stack": lambda: ad.stack([a, b], axis=0),
                "getitem": lambda: a[1:, 2:],
                "take": lambda: ad.take(a, np.array([0, 2, 2]), axis=1),
                "tsum": lambda: ad.tsum(a, axis=0, keepdims=True),
                "tmean": lambda: ad.tmean(a, axis=1),
            }
            # weighting makes the scalar objective sensitive to every entry
            out = ops[op_name]()
            w = np.arange(1, out.data.size + 1, dtype=np.float64).reshape(out.shape)
            return ad.tsum(ad.mul(out, w))

        loss = build()
        backward(loss)
        coords = rng.choice(a_val.size, size=5, replace=False)
        fd = finite_difference(lambda: build().item(), a.data, coords)
        for k, g_fd in fd.items():
            g = a.grad.reshape(-1)[k]
            assert abs(g - g_fd) <= 1e-6 * max(1.0, abs(g), abs(g_fd)), \
                f"{op_name}: coord {k}: analytic {g} vs fd {g_fd}"

    def test_broadcasting_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        row = Tensor(rng.normal(size=(1, 4)), requires_grad=True)

        def build():
            return ad.tsum(ad.square(a * row + row))

        backward(build())
        coords = range(4)
        fd = finite_difference(lambda: build().item(), row.data, coords)
        for k, g_fd in fd.items():
            np.testing.assert_allclose(row.grad.reshape(-1)[k], g_fd,
                                       rtol=1e-6, atol=1e-8)

    def test_batched_matmul_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)

        def build():
            return ad.tsum(ad.square(ad.matmul(a, b)))

        backward(build())
        fd = finite_difference(lambda: build().item(), b.data,
                               rng.choice(b.data.size, size=6, replace=False))
        for k, g_fd in fd.items():
            np.testing.assert_allclose(b.grad.reshape(-1)[k], g_fd,
                                       rtol=1e-6, atol=1e-8)
