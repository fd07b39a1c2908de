import numpy as np
import pytest

from gradcheck import TOL, max_grad_error
from volreport import tensor as T
from volreport.errors import ContractError, NumericsError, ShapeError, VocabError

rng = np.random.default_rng(42)


def rt(*shape, rg=True):
    return T.Tensor(rng.normal(size=shape), requires_grad=rg, dtype="float64")


class TestMatmul:
    def test_identity(self):
        m = rt(2, 2, rg=False)
        eye = T.Tensor(np.eye(2), dtype="float64")
        assert np.allclose(T.matmul(eye, m).data, m.data)

    def test_hand_product(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.Tensor([[5.0], [6.0]])
        assert np.array_equal(T.matmul(a, b).data, [[17.0], [39.0]])

    def test_zeros(self):
        z = T.Tensor(np.zeros((3, 4)), dtype="float64")
        any_ = rt(4, 2, rg=False)
        out = T.matmul(z, any_)
        assert out.shape == (3, 2) and not out.data.any()

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(rt(2, 3), rt(2, 3))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([[0.0, 0.0, 0.0, 0.0]]), axis=-1)
        assert np.allclose(out.data, 0.25)

    def test_large_logits_stable(self):
        out = T.softmax(T.Tensor([[1000.0, 0.0]], dtype="float32"), axis=-1)
        assert np.allclose(out.data, [[1.0, 0.0]])

    def test_direct_formula_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        out = T.softmax(T.Tensor([x], dtype="float64"), axis=-1).data[0]
        expected = np.exp(x) / np.exp(x).sum()
        assert np.abs(out - expected).max() < 1e-12

    def test_rows_sum_to_one_nonnegative(self):
        for _ in range(20):
            x = rt(5, 9, rg=False)
            y = T.softmax(x, axis=-1).data
            assert np.abs(y.sum(axis=-1) - 1).max() < 1e-6
            assert (y >= 0).all()


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = T.Tensor(np.full((2, 6), 3.7), dtype="float64")
        out = T.layer_norm(x, T.Tensor(np.ones(6), dtype="float64"),
                           T.Tensor(np.zeros(6), dtype="float64"))
        assert np.abs(out.data).max() < 1e-6

    def test_output_statistics(self):
        x = rt(8, 64, rg=False)
        gain = T.Tensor(np.full(64, 2.5), dtype="float64")
        bias = T.Tensor(np.full(64, -1.0), dtype="float64")
        out = T.layer_norm(x, gain, bias).data
        assert np.abs(out.mean(axis=-1) + 1.0).max() < 1e-6
        assert np.abs(out.std(axis=-1) - 2.5).max() < 1e-2

    def test_eps_prevents_nan(self):
        x = T.Tensor(np.full((1, 4), 1e-12), dtype="float64")
        out = T.layer_norm(x, T.Tensor(np.ones(4), dtype="float64"),
                           T.Tensor(np.zeros(4), dtype="float64"))
        assert np.isfinite(out.data).all()


class TestElementwiseAndIndexing:
    def test_gelu_zero(self):
        assert T.gelu(T.Tensor([0.0])).data[0] == 0.0

    def test_embedding_rows_exact(self):
        table = rt(7, 5, rg=False)
        ids = [0, 6, 3]
        out = T.embedding_lookup(table, ids)
        assert np.array_equal(out.data, table.data[ids])

    def test_embedding_oov(self):
        with pytest.raises(VocabError, match="out of range"):
            T.embedding_lookup(rt(4, 3), [0, 4])

    def test_concat_shape(self):
        out = T.concat([rt(2, 3, rg=False), rt(2, 5, rg=False)], axis=1)
        assert out.shape == (2, 8)

    def test_reshape_transpose_roundtrip_bitwise(self):
        x = rt(3, 4, 5, rg=False)
        rt1 = T.reshape(T.reshape(x, (12, 5)), (3, 4, 5))
        assert np.array_equal(rt1.data, x.data)
        tp = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(tp.data, x.data)

    def test_mixed_dtype_rejected(self):
        with pytest.raises(ShapeError, match="mixed dtypes"):
            T.add(rt(2, 2), rt(2, 2).astype("float32"))


class TestBackward:
    def test_sum_gives_ones(self):
        x = rt(4)
        with T.Tape() as tape:
            loss = T.tensor_sum(x)
        tape.backward(loss)
        assert np.array_equal(x.grad, np.ones(4))

    def test_bilinear_dot(self):
        x, y = rt(5), rt(5)
        with T.Tape() as tape:
            loss = T.tensor_sum(x * y)
        tape.backward(loss)
        assert np.allclose(x.grad, y.data) and np.allclose(y.grad, x.data)

    def test_three_layer_mlp_fdiff(self):
        w1, b1, w2, b2, w3 = rt(8, 6), rt(8), rt(7, 8), rt(7), rt(1, 7)
        x = T.Tensor(rng.normal(size=(4, 6)), dtype="float64")

        def fn():
            h = T.gelu(T.add(T.matmul(x, T.transpose(w1)), b1))
            h = T.gelu(T.add(T.matmul(h, T.transpose(w2)), b2))
            return T.mean(T.matmul(h, T.transpose(w3)))

        assert max_grad_error(fn, [w1, b1, w2, b2, w3], rng) < TOL

    def test_reuse_accumulates_vs_duplicated_input_oracle(self):
        # f(x) = g(x, x) with g(u, v) = sum(u * v) + mean(u @ v)
        x = rt(3, 3)

        def fn():
            return T.tensor_sum(x * x) + T.mean(T.matmul(x, x))

        assert max_grad_error(fn, [x], rng, samples=9) < TOL

    def test_non_scalar_loss_rejected(self):
        x = rt(3)
        with T.Tape() as tape:
            y = x * 2.0
            with pytest.raises(ContractError, match="scalar"):
                tape.backward(y)

    def test_empty_tape_rejected(self):
        with T.Tape() as tape:
            pass
        with pytest.raises(ContractError, match="empty"):
            tape.backward(T.Tensor(1.0))

    def test_unreachable_grads_untouched(self):
        x, other = rt(3), rt(3)
        with T.Tape() as tape:
            loss = T.tensor_sum(x * 2.0)
            _side = other * 3.0
        tape.backward(loss)
        assert x.grad is not None and other.grad is None

    def test_frozen_input_gets_no_grad(self):
        w = rt(3, 3)
        frozen = rt(3, 3, rg=False)
        with T.Tape() as tape:
            loss = T.tensor_sum(T.matmul(frozen, w))
        tape.backward(loss)
        assert w.grad is not None and frozen.grad is None


class TestNumerics:
    def test_overflow_aborts(self):
        big = T.Tensor([1e30], dtype="float32")
        with np.errstate(over="ignore"), pytest.raises(NumericsError, match="mul"):
            T.mul(big, big)

    def test_nan_aborts(self):
        inf = T.Tensor([np.inf], dtype="float64")
        zero = T.Tensor([0.0], dtype="float64")
        with np.errstate(invalid="ignore"), pytest.raises(NumericsError):
            T.mul(inf, zero)


OPS_FOR_FDIFF = [
    ("add", lambda a, b: T.mean(T.add(a, b) * 1.7), 2),
    ("sub", lambda a, b: T.mean(T.sub(a, b) * 0.3), 2),
    ("mul", lambda a, b: T.mean(a * b), 2),
    ("matmul", lambda a, b: T.mean(T.matmul(a, T.transpose(b))), 2),
    ("softmax", lambda a, b: T.mean(T.softmax(a, axis=-1) * T.gelu(b)), 2),
    ("log_softmax", lambda a, b: T.mean(T.log_softmax(a, axis=-1) * T.gelu(b)), 2),
    ("gelu", lambda a, b: T.mean(T.gelu(a) + T.gelu(b)), 2),
    ("sum", lambda a, b: T.tensor_sum(a) * 0.1 + T.mean(T.tensor_sum(b, axis=1)), 2),
    ("mean", lambda a, b: T.mean(T.mean(a, axis=0) * T.mean(b, axis=0)), 2),
    ("transpose", lambda a, b: T.mean(T.transpose(a) @ b), 2),
    ("reshape", lambda a, b: T.mean(T.reshape(a, (-1,)) * T.reshape(b, (-1,))), 2),
    ("concat", lambda a, b: T.mean(T.concat([a, b], axis=0) * 1.3), 2),
]


@pytest.mark.parametrize("name,fn,_n", OPS_FOR_FDIFF, ids=[o[0] for o in OPS_FOR_FDIFF])
@pytest.mark.parametrize("shape", [(2, 3), (4, 4), (5, 2)])
def test_op_gradients_match_finite_differences(name, fn, _n, shape):
    a, b = rt(*shape), rt(*shape)
    assert max_grad_error(lambda: fn(a, b), [a, b], rng) < TOL


def test_layer_norm_gradients():
    for shape in [(2, 5), (3, 8), (1, 4)]:
        x, g, b = rt(*shape), rt(shape[-1]), rt(shape[-1])

        def fn():
            y = T.layer_norm(x, g, b)
            return T.mean(y * y)

        assert max_grad_error(fn, [x, g, b], rng) < TOL


def test_embedding_and_gather_gradients():
    table = rt(9, 4)
    logits = rt(6, 5)
    ids = np.array([1, 8, 1, 0], dtype=np.int64)
    rows = np.array([0, 3, 5], dtype=np.int64)
    cols = np.array([4, 0, 2], dtype=np.int64)

    def fn():
        e = T.embedding_lookup(table, ids)
        picked = T.take_pairs(logits, rows, cols)
        return T.mean(e * e) + T.tensor_sum(picked)

    assert max_grad_error(fn, [table, logits], rng) < TOL
