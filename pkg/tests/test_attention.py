import math

import numpy as np
import pytest

from biformer.attention import (
    MhsaParams,
    attention,
    attention_weights,
    mhsa,
    random_mhsa_params,
    window_attention,
    window_merge,
    window_partition,
)
from biformer.errors import ConfigurationError, DimensionError
from biformer.tensor import Tensor, grad_check, mul, sum_all


def dense_attention_loops(q, k, v):
    n, c = q.shape
    out = np.zeros_like(v[:n])
    for i in range(n):
        logits = np.array([q[i] @ k[j] for j in range(k.shape[0])]) / math.sqrt(c)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


class TestScaledDotProduct:
    def test_matches_loops(self):
        rng = np.random.default_rng(0)
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        got = attention(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(got, dense_attention_loops(q, k, v), atol=1e-12)

    def test_weights_rows_are_distributions(self):
        rng = np.random.default_rng(1)
        w = attention_weights(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 6, 4))))
        assert w.shape == (2, 3, 6)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, rtol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))


class TestMhsa:
    def test_single_head_equals_plain_attention(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4))
        wq, wk, wv, wo = (rng.normal(size=(4, 4)) for _ in range(4))
        p = MhsaParams.from_joint(*(Tensor(w) for w in (wq, wk, wv, wo)), heads=1)
        want = dense_attention_loops(x @ wq, x @ wk, x @ wv) @ wo
        np.testing.assert_allclose(mhsa(Tensor(x), p).data, want, atol=1e-12)

    def test_heads_use_head_width_scaling(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 8))
        ws = [rng.normal(size=(8, 8)) for _ in range(4)]
        p = MhsaParams.from_joint(*(Tensor(w) for w in ws), heads=2)
        parts = [dense_attention_loops(x @ ws[0][:, s], x @ ws[1][:, s], x @ ws[2][:, s])
                 for s in (slice(0, 4), slice(4, 8))]
        want = np.concatenate(parts, axis=-1) @ ws[3]
        np.testing.assert_allclose(mhsa(Tensor(x), p).data, want, atol=1e-12)

    def test_indivisible_heads(self):
        w = Tensor(np.zeros((6, 6)))
        with pytest.raises(ConfigurationError):
            MhsaParams.from_joint(w, w, w, w, heads=4)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(4, 4)))
        ws = [Tensor(rng.normal(size=(4, 4))) for _ in range(4)]
        r = Tensor(rng.normal(size=(4, 4)))

        def f(ps):
            return sum_all(mul(mhsa(ps[0], MhsaParams.from_joint(*ps[1:], heads=2)), r))

        # from_joint copies the splits, so only x is differentiated through it
        assert grad_check(f, [x, *ws], h=1e-6).per_param[0] < 1e-6


class TestWindows:
    def test_partition_merge_roundtrip(self):
        x = Tensor(np.arange(4 * 6 * 2, dtype=np.float64).reshape(4, 6, 2))
        xw = window_partition(x, 2)
        assert xw.shape == (6, 4, 2)
        assert xw.data[0, :, 0].tolist() == [0.0, 2.0, 12.0, 14.0]
        assert np.array_equal(window_merge(xw, 2, 4, 6).data, x.data)

    def test_window_equal_to_map_is_global(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 4, 8)))
        p = random_mhsa_params(8, 2, rng, dtype=np.float64)
        full = mhsa(Tensor(x.data.reshape(16, 8)), p).data.reshape(4, 4, 8)
        np.testing.assert_allclose(window_attention(x, 4, p).data, full, atol=1e-12)

    def test_indivisible_window(self):
        with pytest.raises(ConfigurationError):
            window_partition(Tensor(np.zeros((5, 4, 2))), 2)
