import numpy as np
import pytest

from lutkit.errors import DataError
from lutkit.pq import PqConfig, encode_hard, lut_matmul_ref
from lutkit.quant import LookupTableI8, dequantize, quantize_table
from lutkit.rng import make_rng
from lutkit.softpq import LutLayer, ste_forward


def table_of(values):
    return np.asarray(values, dtype=np.float32).reshape(1, 1, -1)


class TestQuantizeTable:
    def test_scale_from_max_abs(self):
        qt = quantize_table(table_of([1.27, 0.50, -0.25]))
        assert qt.scale == pytest.approx(0.01, rel=1e-6)
        assert qt.q.ravel().tolist() == [127, 50, -25]

    def test_endpoint_maps_to_127(self):
        qt = quantize_table(table_of([3.7, -1.0]))
        assert qt.q.ravel()[0] == 127
        qt_neg = quantize_table(table_of([-3.7, 1.0]))
        assert qt_neg.q.ravel()[0] == -127

    def test_all_zero_sentinel(self):
        qt = quantize_table(np.zeros((2, 3, 4), dtype=np.float32))
        assert qt.scale == 1.0
        assert not qt.q.any()
        assert not dequantize(qt).any()

    def test_round_half_to_even(self):
        # entries at exact half-codes: 0.5 and 1.5 scale units
        scale = 2.0 / 127.0
        vals = np.array([2.0, scale * 0.5, scale * 1.5], dtype=np.float32)
        qt = quantize_table(vals.reshape(1, 1, -1))
        assert qt.q.ravel().tolist()[1:] == [0, 2]  # both round to even

    def test_nan_rejected(self):
        with pytest.raises(DataError):
            quantize_table(table_of([np.nan, 1.0]))

    @pytest.mark.parametrize("seed", range(20))
    def test_scale_formula_within_one_ulp(self, seed):
        rng = make_rng(seed)
        table = (rng.standard_normal((2, 4, 6)) * rng.uniform(0.01, 100)).astype(np.float32)
        qt = quantize_table(table)
        maxabs = float(np.max(np.abs(table)))
        err = abs(float(qt.scale) * 127.0 - maxabs)
        assert err <= np.spacing(np.float32(maxabs))

    @pytest.mark.parametrize("seed", range(20))
    def test_round_trip_bound(self, seed):
        rng = make_rng(100 + seed)
        table = (rng.standard_normal((3, 4, 5)) * rng.uniform(0.1, 10)).astype(np.float32)
        qt = quantize_table(table)
        back = dequantize(qt)
        bound = float(qt.scale) / 2 + np.spacing(np.float32(np.max(np.abs(table))))
        assert np.max(np.abs(table.astype(np.float64) - back.astype(np.float64))) <= bound

    @pytest.mark.parametrize("seed", range(10))
    def test_double_quantize_idempotent(self, seed):
        rng = make_rng(200 + seed)
        table = (rng.standard_normal((2, 3, 7)) * rng.uniform(0.5, 50)).astype(np.float32)
        once = quantize_table(table)
        twice = quantize_table(dequantize(once))
        np.testing.assert_array_equal(once.q, twice.q)


class TestDequantize:
    def test_formula(self):
        qt = LookupTableI8(q=np.array([[[50]]], dtype=np.int8), scale=np.float32(0.01))
        assert dequantize(qt)[0, 0, 0] == pytest.approx(0.5)

    def test_zero_code_is_zero(self):
        qt = LookupTableI8(q=np.zeros((1, 2, 2), np.int8), scale=np.float32(123.0))
        assert not dequantize(qt).any()

    def test_negative_endpoint(self):
        qt = LookupTableI8(q=np.array([[[-127]]], dtype=np.int8), scale=np.float32(0.5))
        assert dequantize(qt)[0, 0, 0] == np.float32(-63.5)


class TestQatForward:
    def _layer(self, rng, qat, c=4, k=5, v=2, m=3):
        books = rng.standard_normal((c, k, v)).astype(np.float32)
        weight = rng.standard_normal((c * v, m)).astype(np.float32)
        return LutLayer(
            cfg=PqConfig(v=v, k=k),
            books=books,
            weight=weight,
            bias=np.zeros(m, dtype=np.float32),
            qat=qat,
        )

    def test_qat_forward_reads_dequantized_table(self, rng):
        layer = self._layer(rng, qat=True)
        a = rng.standard_normal((6, layer.d)).astype(np.float32)
        out, _ = ste_forward(a, layer)
        enc = encode_hard(a, layer.books)
        want = lut_matmul_ref(enc, dequantize(layer.qtable))
        np.testing.assert_array_equal(out, want)

    def test_exactly_representable_table_matches_float(self, rng):
        layer = self._layer(rng, qat=False)
        scale = np.float32(np.max(np.abs(layer.table))) / np.float32(127)
        grid = (np.rint(layer.table / scale).clip(-127, 127) * scale).astype(np.float32)
        layer.weight = None  # freeze: table no longer derived from weight
        layer.table = grid
        layer.qat = True
        layer.qtable = quantize_table(grid)
        a = rng.standard_normal((5, layer.d)).astype(np.float32)
        out_qat, _ = ste_forward(a, layer)
        layer.qat = False
        out_float, _ = ste_forward(a, layer)
        np.testing.assert_array_equal(out_qat, out_float)

    @pytest.mark.parametrize("seed", range(10))
    def test_qat_deviation_bounded_by_c_halfscale(self, seed):
        rng = make_rng(300 + seed)
        layer = self._layer(rng, qat=True, c=6, k=4, v=3, m=4)
        a = rng.standard_normal((8, layer.d)).astype(np.float32)
        out_q, _ = ste_forward(a, layer)
        layer.qat = False
        out_f, _ = ste_forward(a, layer)
        c = layer.books.shape[0]
        scale = float(layer.qtable.scale) if layer.qtable else float(
            quantize_table(layer.table).scale
        )
        maxabs = np.float32(np.max(np.abs(layer.table)))
        bound = c * (scale / 2 + float(np.spacing(maxabs)))
        assert np.max(np.abs(out_q.astype(np.float64) - out_f.astype(np.float64))) <= bound
