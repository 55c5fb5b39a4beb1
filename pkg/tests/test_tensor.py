import numpy as np
import pytest

from unihema import tensor as T
from unihema.errors import ConfigurationError, DataFormatError, DimensionError, UsageError
from unihema.tensor import Tensor

from conftest import gradcheck


class TestMatmul:
    def test_identity(self):
        a = Tensor([[2.0, -1.0], [0.5, 3.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(T.matmul(eye, a).data, a.data)

    def test_hand_sum(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError) as exc:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)

    def test_gradients(self, rng):
        a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        gradcheck(lambda: T.matmul(a, b).sum(), [a, b], rel=1e-6)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_overflow_stable(self):
        out = T.softmax(Tensor([[1000.0, 0.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert abs(out.data[0, 0] - 1.0) < 1e-12
        assert out.data[0, 1] < 1e-12 and out.data[0, 2] < 1e-12

    def test_simplex(self, rng):
        out = T.softmax(Tensor(rng.normal(size=(6, 9)) * 5))
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((3, 0))))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(3, 7)), requires_grad=True)
        r = rng.normal(size=(3, 7))
        gradcheck(lambda: (T.softmax(x) * r).sum(), [x], rel=1e-5)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = Tensor(np.full((2, 5), 3.7))
        out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_two_point(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        gain = Tensor(rng.normal(size=8), requires_grad=True)
        bias = Tensor(rng.normal(size=8), requires_grad=True)
        r = rng.normal(size=(4, 8))
        gradcheck(lambda: (T.layer_norm(x, gain, bias) * r).sum(), [x, gain, bias], rel=1e-5)


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        assert np.array_equal(T.conv2d(x, k).data, x.data)

    def test_counting(self):
        x = Tensor(np.ones((1, 5, 5)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k, stride=1, pad=1)
        assert out.data[0, 2, 2] == 9.0
        assert out.data[0, 0, 0] == 4.0

    def test_non_integral_extent(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 7, 7)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        r = rng.normal(size=(3, 4, 4))
        gradcheck(lambda: (T.conv2d(x, k, stride=2, pad=1) * r).sum(), [x, k], rel=1e-5)

    def test_transpose_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        out_shape = T.conv2d_transpose(x, k, stride=2).shape
        r = rng.normal(size=out_shape)
        gradcheck(lambda: (T.conv2d_transpose(x, k, stride=2) * r).sum(), [x, k], rel=1e-5)


class TestContract:
    def test_selector(self, rng):
        fmap = Tensor(rng.normal(size=(4, 5, 5)))
        memb = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
        assert np.array_equal(T.contract(memb, fmap).data[0], fmap.data[0])

    def test_zero(self, rng):
        fmap = Tensor(rng.normal(size=(4, 5, 5)))
        assert np.all(T.contract(Tensor(np.zeros((2, 4))), fmap).data == 0)

    def test_loop_oracle(self, rng):
        memb = Tensor(rng.normal(size=(3, 4)))
        fmap = Tensor(rng.normal(size=(4, 5, 5)))
        out = T.contract(memb, fmap).data
        expected = np.zeros((3, 5, 5))
        for q in range(3):
            for h in range(5):
                for w in range(5):
                    acc = 0.0
                    for c in range(4):
                        acc += memb.data[q, c] * fmap.data[c, h, w]
                    expected[q, h, w] = acc
        assert np.max(np.abs(out - expected)) <= 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.contract(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5, 5))))

    def test_gradients(self, rng):
        memb = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        fmap = Tensor(rng.normal(size=(4, 5, 5)), requires_grad=True)
        r = rng.normal(size=(3, 5, 5))
        gradcheck(lambda: (T.contract(memb, fmap) * r).sum(), [memb, fmap], rel=1e-6)


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.backward(x.sum())
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_grad(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        T.backward((x * x).sum())
        assert np.allclose(x.grad, 2 * x.data, atol=1e-14)

    def test_fanout_sums(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward((x + x).sum())
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        loss = (x * x).sum()
        T.backward(loss)
        T.backward(loss)
        assert np.allclose(x.grad, [12.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(x + x)


class TestMiscOps:
    def test_gather_rows_accumulates(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = T.gather_rows(x, [0, 0, 2])
        T.backward(out.sum())
        assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_slice_rows(self, rng):
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        r = rng.normal(size=(2, 3))
        gradcheck(lambda: (T.slice_rows(x, 1, 3) * r).sum(), [x], rel=1e-6)

    def test_mean_rows_permutation_exact(self, rng):
        data = rng.normal(size=(17, 6))
        base = T.mean_rows(Tensor(data)).data
        for _ in range(20):
            perm = rng.permutation(17)
            assert np.array_equal(T.mean_rows(Tensor(data[perm])).data, base)

    def test_mean_rows_gradients(self, rng):
        x = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
        r = rng.normal(size=(1, 4))
        gradcheck(lambda: (T.mean_rows(x) * r).sum(), [x], rel=1e-6)

    def test_elementwise_max_min(self, rng):
        a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        r = rng.normal(size=(4, 4))
        gradcheck(lambda: (T.maximum(a, b) * r).sum() + (T.minimum(a, b) * r).sum(), [a, b], rel=1e-5)

    def test_activations_gradients(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        r = rng.normal(size=(3, 5))
        gradcheck(lambda: (T.gelu(x) * r).sum(), [x], rel=1e-5)
        gradcheck(lambda: (T.sigmoid(x) * r).sum(), [x], rel=1e-5)
        gradcheck(lambda: (T.softplus(x) * r).sum(), [x], rel=1e-5)

    def test_log_softmax_gradients(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        r = rng.normal(size=(4, 6))
        gradcheck(lambda: (T.log_softmax(x) * r).sum(), [x], rel=1e-5)

    def test_concat_transpose_reshape_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        r = rng.normal(size=(3, 6))
        gradcheck(lambda: (T.transpose(T.concat([a, b], axis=0)) * r).sum(), [a, b], rel=1e-6)


class TestTensorFile:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.normal(size=(3, 7, 2))
        path = tmp_path / "x.uhtn"
        T.save_uhtn(path, arr)
        back = T.load_uhtn(path)
        assert np.array_equal(arr, back)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.uhtn"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataFormatError):
            T.load_uhtn(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "x.uhtn"
        T.save_uhtn(path, rng.normal(size=(4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(DataFormatError):
            T.load_uhtn(path)
