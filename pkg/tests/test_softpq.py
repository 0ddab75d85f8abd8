import math

import numpy as np
import pytest

from conftest import random_instance
from lutkit.errors import ConfigError
from lutkit.pq import PqConfig, build_table, encode_hard, lut_matmul_ref, pq_amm
from lutkit.rng import make_rng
from lutkit.softpq import (
    LutLayer,
    Temperature,
    TemperatureSchedule,
    encode_soft,
    soft_aggregate,
    ste_backward,
    ste_forward,
)


def make_layer(rng, c=3, k=4, v=2, m=3, theta=0.0, qat=False, bias=None):
    books = rng.standard_normal((c, k, v)).astype(np.float32)
    weight = rng.standard_normal((c * v, m)).astype(np.float32)
    if bias is None:
        bias = np.zeros(m, dtype=np.float32)
    return LutLayer(
        cfg=PqConfig(v=v, k=k),
        books=books,
        weight=weight,
        bias=bias,
        temp=Temperature(theta=theta),
        qat=qat,
    )


def soft_surrogate(a, books, weight, theta, grad_out):
    """Independent f64 oracle for the soft loss sum(grad_out * y_soft)."""
    t = math.exp(theta)
    c_books, k, v = books.shape
    n = a.shape[0]
    d = np.empty((n, c_books, k))
    for c in range(c_books):
        diff = a[:, c * v : (c + 1) * v, None] - books[c].T[None]
        d[:, c, :] = np.einsum("nvk,nvk->nk", diff, diff)
    z = -d / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    y = np.zeros((n, weight.shape[1]))
    for c in range(c_books):
        y += s[:, c, :] @ (books[c] @ weight[c * v : (c + 1) * v])
    return float((grad_out * y).sum())


class TestEncodeSoft:
    def test_equidistant_centroids_half_half(self):
        books = np.array([[[-1.0], [1.0]]], dtype=np.float32)
        soft = encode_soft(np.array([[0.0]], dtype=np.float32), books, t=1.0)
        np.testing.assert_allclose(soft[0, 0], [0.5, 0.5], atol=1e-7)

    def test_huge_temperature_approaches_uniform(self):
        rng = make_rng(0)
        books = rng.standard_normal((2, 8, 3)).astype(np.float32)
        a = rng.standard_normal((4, 6)).astype(np.float32)
        soft = encode_soft(a, books, t=1e9)
        np.testing.assert_allclose(soft, 1.0 / 8.0, atol=1e-6)

    def test_hand_computed_two_centroids(self):
        # distances^2 (0, 1) at t=1 -> (e^0, e^-1)/Z
        books = np.array([[[0.0], [1.0]]], dtype=np.float32)
        soft = encode_soft(np.array([[0.0]], dtype=np.float32), books, t=1.0)
        np.testing.assert_allclose(soft[0, 0], [0.7310586, 0.2689414], atol=1e-6)

    @pytest.mark.parametrize("t", [1e-3, 1e-1, 1.0, 1e2, 1e3])
    def test_rows_sum_to_one(self, t):
        rng = make_rng(1)
        a, books, _ = random_instance(rng, n=6, c=4, k=5, v=3, m=1)
        soft = encode_soft(a, books, t=t)
        sums = soft.sum(axis=2)
        np.testing.assert_allclose(sums, 1.0, atol=1e-5)
        assert soft.min() >= 0.0 and soft.max() <= 1.0

    def test_limit_matches_hard_encoding(self):
        rng = make_rng(2)
        a, books, _ = random_instance(rng, n=8, c=3, k=6, v=2, m=1)
        soft = encode_soft(a, books, t=1e-6)
        hard = encode_hard(a, books)
        onehot = np.zeros_like(soft)
        n_idx = np.arange(a.shape[0])[:, None]
        c_idx = np.arange(books.shape[0])[None, :]
        onehot[n_idx, c_idx, hard] = 1.0
        assert np.max(np.abs(soft - onehot)) < 1e-6

    def test_nonpositive_temperature_rejected(self):
        books = np.zeros((1, 2, 1), dtype=np.float32)
        a = np.zeros((1, 1), dtype=np.float32)
        for t in (0.0, -1.0):
            with pytest.raises(ConfigError):
                encode_soft(a, books, t=t)


class TestSoftAggregate:
    def test_one_hot_equals_hard_lookup(self):
        rng = make_rng(3)
        a, books, b = random_instance(rng, n=5, c=3, k=4, v=2, m=4)
        table = build_table(b, books)
        hard = encode_hard(a, books)
        soft = encode_soft(a, books, t=1e-6)
        np.testing.assert_allclose(
            soft_aggregate(soft, table), lut_matmul_ref(hard, table), rtol=1e-5, atol=1e-6
        )

    def test_uniform_gives_mean_of_rows(self):
        rng = make_rng(4)
        table = rng.standard_normal((2, 4, 3)).astype(np.float32)
        soft = np.full((1, 2, 4), 0.25, dtype=np.float32)
        want = table.mean(axis=1).sum(axis=0)
        np.testing.assert_allclose(soft_aggregate(soft, table)[0], want, rtol=1e-5)

    def test_weighted_sum_example(self):
        table = np.array([[[4.0], [8.0]]], dtype=np.float32)
        soft = np.array([[[0.25, 0.75]]], dtype=np.float32)
        assert soft_aggregate(soft, table)[0, 0] == pytest.approx(7.0)


class TestSteForward:
    def test_matches_vanilla_pq(self, rng):
        layer = make_layer(rng)
        a = rng.standard_normal((7, layer.d)).astype(np.float32)
        out, _ = ste_forward(a, layer)
        want = pq_amm(a, layer.weight, layer.cfg, layer.books)
        assert out.tobytes() == want.tobytes()

    def test_forward_independent_of_temperature(self, rng):
        layer = make_layer(rng)
        a = rng.standard_normal((5, layer.d)).astype(np.float32)
        layer.temp.set_t(0.1)
        out_low, _ = ste_forward(a, layer)
        layer.temp.set_t(10.0)
        out_high, _ = ste_forward(a, layer)
        assert out_low.tobytes() == out_high.tobytes()

    def test_bias_added_after_aggregation(self, rng):
        bias = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        layer = make_layer(rng, bias=bias)
        a = rng.standard_normal((4, layer.d)).astype(np.float32)
        out, _ = ste_forward(a, layer)
        want = pq_amm(a, layer.weight, layer.cfg, layer.books) + bias
        np.testing.assert_array_equal(out, want)

    def test_backward_varies_with_temperature(self, rng):
        layer = make_layer(rng)
        a = rng.standard_normal((5, layer.d)).astype(np.float32)
        g = rng.standard_normal((5, layer.m)).astype(np.float32)
        layer.temp.set_t(0.5)
        _, cache1 = ste_forward(a, layer)
        g1 = ste_backward(g, cache1, layer)
        layer.temp.set_t(5.0)
        _, cache2 = ste_forward(a, layer)
        g2 = ste_backward(g, cache2, layer)
        assert not np.allclose(g1["dP"], g2["dP"])


class TestSteBackward:
    def test_zero_grad_out_gives_zero_grads(self, rng):
        layer = make_layer(rng)
        a = rng.standard_normal((4, layer.d)).astype(np.float32)
        _, cache = ste_forward(a, layer)
        g = ste_backward(np.zeros((4, layer.m), np.float32), cache, layer)
        for key in ("dP", "dW", "dA", "db"):
            assert not g[key].any()
        assert g["dtheta"] == 0.0

    def test_uniform_soft_kills_distance_path(self, rng):
        # At huge t the softmax is uniform and dz ~ 0 through the 1/t factor,
        # so dP reduces to the table path alone.
        layer = make_layer(rng, theta=math.log(1e9))
        a = rng.standard_normal((6, layer.d)).astype(np.float32)
        g = rng.standard_normal((6, layer.m)).astype(np.float32)
        _, cache = ste_forward(a, layer)
        grads = ste_backward(g, cache, layer)
        c, k, v = layer.books.shape
        table_path = np.empty((c, k, v))
        for ci in range(c):
            w_c = layer.weight[ci * v : (ci + 1) * v].astype(np.float64)
            s = cache.soft[:, ci, :]
            dT = s.T @ g.astype(np.float64)
            table_path[ci] = dT @ w_c.T
        np.testing.assert_allclose(grads["dP"], table_path, rtol=1e-4, atol=1e-6)

    @pytest.mark.parametrize("trial", range(12))
    def test_finite_difference_all_blocks(self, trial):
        rng = make_rng(500 + trial)
        n = int(rng.integers(2, 8))
        v = int(rng.choice([2, 3]))
        c = int(rng.integers(1, 4))
        k = int(rng.integers(2, 8))
        m = int(rng.integers(1, 6))
        layer = make_layer(rng, c=c, k=k, v=v, m=m, theta=float(rng.uniform(-1, 1)))
        a = rng.standard_normal((n, layer.d)).astype(np.float32)
        g_out = rng.standard_normal((n, m)).astype(np.float32)
        _, cache = ste_forward(a, layer)
        grads = ste_backward(g_out, cache, layer)

        a64 = a.astype(np.float64)
        p64 = layer.books.astype(np.float64)
        w64 = layer.weight.astype(np.float64)
        theta = layer.temp.theta
        h = 1e-4

        def check_block(analytic, base, wrap):
            fd = np.empty(base.size)
            for i in range(base.size):
                plus = base.copy()
                plus.flat[i] += h
                minus = base.copy()
                minus.flat[i] -= h
                fd[i] = (wrap(plus) - wrap(minus)) / (2 * h)
            fd = fd.reshape(analytic.shape)
            denom = max(np.max(np.abs(fd)), 1e-8)
            assert np.max(np.abs(fd - analytic)) / denom < 1e-5

        check_block(grads["dP"], p64, lambda p: soft_surrogate(a64, p, w64, theta, g_out))
        check_block(grads["dW"], w64, lambda w: soft_surrogate(a64, p64, w, theta, g_out))
        check_block(grads["dA"], a64, lambda x: soft_surrogate(x, p64, w64, theta, g_out))
        fd_theta = (
            soft_surrogate(a64, p64, w64, theta + h, g_out)
            - soft_surrogate(a64, p64, w64, theta - h, g_out)
        ) / (2 * h)
        assert abs(fd_theta - grads["dtheta"]) / max(abs(fd_theta), 1e-8) < 1e-5

    def test_qat_backward_uses_real_table(self, rng):
        # Straight-through: gradients identical with and without quantization.
        layer = make_layer(rng, qat=False)
        a = rng.standard_normal((5, layer.d)).astype(np.float32)
        g = rng.standard_normal((5, layer.m)).astype(np.float32)
        _, cache = ste_forward(a, layer)
        plain = ste_backward(g, cache, layer)
        layer.qat = True
        layer.rebuild()
        _, cache_q = ste_forward(a, layer)
        quant = ste_backward(g, cache_q, layer)
        for key in ("dP", "dW", "dA", "db"):
            np.testing.assert_array_equal(plain[key], quant[key])
        assert plain["dtheta"] == quant["dtheta"]


class TestTemperature:
    def test_parameterization_keeps_t_positive(self):
        temp = Temperature(theta=-50.0)
        assert temp.t > 0.0
        temp.set_t(3.0)
        assert temp.theta == pytest.approx(math.log(3.0))

    def test_set_nonpositive_rejected(self):
        with pytest.raises(ConfigError):
            Temperature().set_t(0.0)


class TestTemperatureSchedule:
    def test_fixed_never_changes(self):
        sched = TemperatureSchedule.parse("fixed:1")
        assert all(sched.value_for_epoch(e, 10) == 1.0 for e in range(10))

    def test_annealed_geometric_midpoint(self):
        sched = TemperatureSchedule.parse("annealed:1:0.1")
        assert sched.value_for_epoch(5, 10) == pytest.approx(10 ** -0.5, rel=1e-6)
        assert sched.value_for_epoch(0, 10) == pytest.approx(1.0)

    def test_learned_gets_nonzero_theta_gradient(self, rng):
        layer = make_layer(rng, theta=0.3)
        a = rng.standard_normal((6, layer.d)).astype(np.float32)
        g = rng.standard_normal((6, layer.m)).astype(np.float32)
        _, cache = ste_forward(a, layer)
        grads = ste_backward(g, cache, layer)
        assert grads["dtheta"] != 0.0

    def test_bad_specs_rejected(self):
        for text in ("fixed", "annealed:1", "warm:1", "fixed:zero", "annealed:0:1"):
            with pytest.raises(ConfigError):
                TemperatureSchedule.parse(text)
