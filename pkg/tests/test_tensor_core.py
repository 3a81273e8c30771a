import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biformer.errors import (
    ArgumentError,
    DimensionError,
    EvaluationError,
    IndexOutOfRange,
)
from biformer.tensor import (
    IndexTensor,
    Tape,
    Tensor,
    add,
    concat_lastaxis,
    conv2d,
    count_macs,
    depthwise_conv2d,
    gather_axis0,
    gelu,
    grad_check,
    layer_norm,
    linear,
    matmul,
    mean_axis,
    mul,
    permute,
    reshape,
    scale,
    select0,
    softmax_lastaxis,
    stack,
    sub,
    sum_all,
    topk_indices,
    transpose_last,
)
from biformer.tensor import serialize


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def fd_error(op, inputs, seed=0):
    """Max relative error of the tape gradient of ``sum(op(*inputs) * r)``."""
    rng = np.random.default_rng(seed)
    out_shape = op(*inputs).shape
    r = Tensor(rng.normal(size=out_shape), dtype=np.float64)
    report = grad_check(lambda ps: sum_all(mul(op(*ps), r)), list(inputs), h=1e-6)
    return report.max_rel_error


class TestTensorBasics:
    def test_copy_on_construction(self):
        src = np.arange(6.0).reshape(2, 3)
        t = Tensor(src)
        src[0, 0] = 99.0
        assert t.data[0, 0] == 0.0
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0

    def test_default_and_kept_dtypes(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert Tensor(np.zeros(3)).dtype == np.float64
        assert Tensor(np.zeros(3), dtype=np.float32).dtype == np.float32

    def test_rejects_zero_extent_and_bad_dtype(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))
        with pytest.raises(TypeError):
            Tensor(np.zeros(2), dtype=np.int32)

    def test_item_requires_single_element(self):
        assert Tensor([[3.0]]).item() == 3.0
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]).item()

    def test_operators_route_to_ops(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        assert (a @ b).tolist() == [[11.0]]
        assert (a + a).tolist() == [[2.0, 4.0]]
        assert (-a).tolist() == [[-1.0, -2.0]]

    def test_index_tensor_rejects_negative(self):
        with pytest.raises(IndexOutOfRange):
            IndexTensor([0, -1])


class TestForwardExamples:
    def test_matmul_batched_and_shared(self):
        rng = np.random.default_rng(1)
        a = rand(rng, 3, 4, 5)
        b = rand(rng, 3, 5, 2)
        np.testing.assert_allclose(matmul(a, b).data, a.data @ b.data, rtol=1e-12)
        w = rand(rng, 5, 2)
        np.testing.assert_allclose(matmul(a, w).data, a.data @ w.data, rtol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_matmul_reports_macs(self):
        with count_macs() as c:
            matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 5))))
        assert c.total == 2 * 3 * 5 * 4

    def test_softmax_known_values(self):
        out = softmax_lastaxis(Tensor(np.array([[0.0, math.log(3.0)]]))).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-12)

    def test_softmax_is_shift_stable(self):
        out = softmax_lastaxis(Tensor(np.array([1000.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_gelu_exact_erf(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        want = [0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x]
        np.testing.assert_allclose(gelu(Tensor(x)).data, want, rtol=1e-12)

    def test_topk_lowest_index_wins_ties(self):
        idx = topk_indices(Tensor(np.array([[1.0, 3.0, 3.0, 0.0, 3.0]])), 2)
        assert idx.tolist() == [[1, 2]]

    @pytest.mark.parametrize("k", [0, 6])
    def test_topk_range(self, k):
        with pytest.raises(ArgumentError):
            topk_indices(Tensor(np.zeros((2, 5))), k)

    def test_gather_rows(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        out = gather_axis0(x, IndexTensor([[3, 0], [1, 1]]))
        assert out.shape == (2, 2, 3)
        assert out.data[0, 0].tolist() == [9.0, 10.0, 11.0]

    def test_gather_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            gather_axis0(Tensor(np.zeros((2, 3))), IndexTensor([[2]]))

    def test_depthwise_against_loops(self):
        rng = np.random.default_rng(2)
        x, k = rng.normal(size=(5, 6, 3)), rng.normal(size=(3, 3, 3))
        want = np.zeros_like(x)
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        for i in range(5):
            for j in range(6):
                for c in range(3):
                    want[i, j, c] = np.sum(xp[i:i + 3, j:j + 3, c] * k[:, :, c])
        np.testing.assert_allclose(depthwise_conv2d(Tensor(x), Tensor(k)).data, want, atol=1e-12)

    def test_depthwise_rejects_even_kernel(self):
        with pytest.raises(ArgumentError):
            depthwise_conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((2, 2, 2))))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (4, 3)])
    def test_conv2d_against_loops(self, stride, pad):
        rng = np.random.default_rng(3)
        s = 2 * pad + 1 if pad else 3
        x, w = rng.normal(size=(9, 8, 2)), rng.normal(size=(s, s, 2, 3))
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        oh = (9 + 2 * pad - s) // stride + 1
        ow = (8 + 2 * pad - s) // stride + 1
        want = np.zeros((oh, ow, 3))
        for i in range(oh):
            for j in range(ow):
                patch = xp[i * stride:i * stride + s, j * stride:j * stride + s]
                want[i, j] = np.einsum("abc,abcd->d", patch, w)
        got = conv2d(Tensor(x), Tensor(w), stride, pad).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 6, 10)
        out = layer_norm(x, Tensor(np.ones(10)), Tensor(np.zeros(10))).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(-1), 1.0, rtol=1e-4)

    def test_mean_axis_negative(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert mean_axis(x, -1).tolist() == [1.0, 4.0]

    def test_select0_and_stack_roundtrip(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        assert stack([select0(x, i) for i in range(3)]).tolist() == x.tolist()
        with pytest.raises(IndexOutOfRange):
            select0(x, 3)


def _ops_under_test():
    rng = np.random.default_rng(11)
    return {
        "add": (add, [rand(rng, 3, 4), rand(rng, 4)]),
        "sub": (sub, [rand(rng, 2, 3), rand(rng, 2, 3)]),
        "mul": (mul, [rand(rng, 2, 3), rand(rng, 3)]),
        "scale": (lambda a: scale(a, 0.7), [rand(rng, 4)]),
        "gelu": (gelu, [rand(rng, 3, 3)]),
        "reshape": (lambda a: reshape(a, (6, 2)), [rand(rng, 3, 4)]),
        "permute": (lambda a: permute(a, (2, 0, 1)), [rand(rng, 2, 3, 4)]),
        "transpose_last": (transpose_last, [rand(rng, 2, 3, 4)]),
        "concat": (lambda a, b: concat_lastaxis([a, b]), [rand(rng, 2, 3), rand(rng, 2, 2)]),
        "stack": (lambda a, b: stack([a, b]), [rand(rng, 3), rand(rng, 3)]),
        "select0": (lambda a: select0(a, 1), [rand(rng, 3, 2)]),
        "matmul": (matmul, [rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)]),
        "matmul_shared": (matmul, [rand(rng, 2, 3, 4), rand(rng, 4, 5)]),
        "linear": (linear, [rand(rng, 3, 4), rand(rng, 4, 2), rand(rng, 2)]),
        "softmax": (softmax_lastaxis, [rand(rng, 3, 5)]),
        "mean_axis": (lambda a: mean_axis(a, 1), [rand(rng, 3, 4, 2)]),
        "gather": (lambda a: gather_axis0(a, IndexTensor([[0, 2], [2, 2]])), [rand(rng, 3, 4)]),
        "depthwise": (depthwise_conv2d, [rand(rng, 5, 5, 2), rand(rng, 3, 3, 2)]),
        "depthwise_batched": (depthwise_conv2d, [rand(rng, 2, 4, 4, 2), rand(rng, 5, 5, 2)]),
        "conv2d": (lambda a, w: conv2d(a, w, 2, 1), [rand(rng, 6, 6, 2), rand(rng, 3, 3, 2, 3)]),
        "layer_norm": (layer_norm, [rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)]),
    }


class TestGradients:
    @pytest.mark.parametrize("name", sorted(_ops_under_test()))
    def test_central_difference(self, name):
        op, inputs = _ops_under_test()[name]
        assert fd_error(op, inputs) < 1e-6

    def test_unwatched_source_gets_zero(self):
        a, b = Tensor(np.ones(3)), Tensor(np.ones(3))
        with Tape() as tape:
            tape.watch(a)
            y = sum_all(a)
        ga, gb = tape.gradient(y, [a, b])
        assert ga.tolist() == [1.0, 1.0, 1.0]
        assert not gb.any()

    def test_fan_out_accumulates(self):
        a = Tensor(np.array([2.0]))
        with Tape() as tape:
            tape.watch(a)
            y = sum_all(mul(a, a))
        (g,) = tape.gradient(y, [a])
        assert g.tolist() == [4.0]

    def test_gradient_requires_scalar_target(self):
        a = Tensor(np.ones(3))
        with Tape() as tape:
            tape.watch(a)
            y = scale(a, 2.0)
        with pytest.raises(DimensionError):
            tape.gradient(y, [a])

    def test_grad_check_rejects_single_precision(self):
        with pytest.raises(ArgumentError):
            grad_check(lambda ps: sum_all(ps[0]), [Tensor([1.0])])

    def test_grad_check_rejects_non_finite(self):
        with pytest.raises(EvaluationError):
            grad_check(lambda ps: sum_all(scale(ps[0], float("inf"))), [Tensor(np.ones(2))])

    def test_grad_check_does_not_mutate(self):
        p = Tensor(np.array([1.0, 2.0]))
        grad_check(lambda ps: sum_all(mul(ps[0], ps[0])), [p])
        assert p.tolist() == [1.0, 2.0]


finite = st.floats(-50, 50, allow_nan=False, width=64)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=12))
    def test_softmax_rows_sum_to_one(self, xs):
        out = softmax_lastaxis(Tensor(np.array(xs))).data
        assert abs(out.sum() - 1.0) < 1e-12
        assert (out >= 0).all()

    @settings(max_examples=60, deadline=None)
    @given(st.lists(finite, min_size=2, max_size=10), st.data())
    def test_topk_is_a_sorted_prefix(self, xs, data):
        k = data.draw(st.integers(1, len(xs)))
        idx = topk_indices(Tensor(np.array(xs)), k).tolist()
        assert len(set(idx)) == k
        vals = [xs[i] for i in idx]
        assert vals == sorted(vals, reverse=True)
        rest = [v for i, v in enumerate(xs) if i not in idx]
        assert all(v <= min(vals) for v in rest)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
    def test_gather_backward_conserves_mass(self, rows, picks, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(rows, 3)))
        idx = IndexTensor(rng.integers(0, rows, size=(2, picks)))
        with Tape() as tape:
            tape.watch(x)
            y = sum_all(gather_axis0(x, idx))
        (g,) = tape.gradient(y, [x])
        assert g.sum() == pytest.approx(2 * picks * 3)
        counts = np.bincount(idx.data.ravel(), minlength=rows)
        np.testing.assert_allclose(g[:, 0], counts)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_forward_is_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand(rng, 4, 5), rand(rng, 5, 3)
        first = softmax_lastaxis(matmul(a, b)).data
        assert np.array_equal(first, softmax_lastaxis(matmul(a, b)).data)


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_binary_roundtrip(self, dtype, tmp_path):
        t = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), dtype=dtype)
        path = tmp_path / "t.bin"
        serialize.save(t, path)
        back = serialize.load(path)
        assert back.dtype == t.dtype and np.array_equal(back.data, t.data)

    def test_header_layout(self):
        buf = serialize.to_bytes(Tensor(np.zeros((2, 5))))
        assert buf[:4] == b"BRAT"
        assert buf[4] == 2 and buf[5] == 2
        assert int.from_bytes(buf[6:10], "little") == 2
        assert len(buf) == 4 + 2 + 2 * 4 + 10 * 8

    def test_json_roundtrip(self):
        t = Tensor(np.array([[1.5, -2.0]]))
        assert serialize.from_json(serialize.to_json(t)).tolist() == t.tolist()

    def test_rejects_bad_magic(self):
        with pytest.raises(ValueError):
            serialize.from_bytes(b"XXXX" + bytes(10))
