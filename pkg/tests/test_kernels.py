import numpy as np
import pytest

from conftest import random_instance
from lutkit.costs import cost
from lutkit.errors import ConfigError, CorruptionError
from lutkit.kernels import (
    MAX_GROUP,
    BenchReport,
    KernelPlan,
    bench_kernel,
    centroid_search_fast,
    flop_counter,
    instrumented_mac_counts,
    lut_gather_accumulate,
    lut_gather_i32,
    lut_layer_infer,
)
from lutkit.pq import PqConfig, encode_hard, lut_matmul_ref
from lutkit.quant import QMAX, LookupTableI8, quantize_table
from lutkit.rng import make_rng
from lutkit.softpq import LutLayer


def naive_i32(enc, q):
    out = np.zeros((enc.shape[0], q.shape[2]), dtype=np.int32)
    for c in range(q.shape[0]):
        out += q[c][enc[:, c]].astype(np.int32)
    return out


class TestKernelPlan:
    def test_group_bound_static_proof(self):
        assert MAX_GROUP == 258
        assert MAX_GROUP * QMAX == 32766 <= 32767

    def test_group_size_validation(self):
        with pytest.raises(ConfigError):
            KernelPlan(group_size=259)
        with pytest.raises(ConfigError):
            KernelPlan(group_size=0)
        KernelPlan(group_size=258)  # boundary accepted


class TestCentroidSearchFast:
    @pytest.mark.parametrize("seed", range(25))
    def test_matches_encode_hard(self, seed):
        rng = make_rng(seed)
        n = int(rng.integers(1, 50))
        c = int(rng.integers(1, 7))
        k = int(rng.choice([4, 8, 16]))
        v = int(rng.choice([2, 3, 4, 9]))
        a, books, _ = random_instance(rng, n=n, c=c, k=k, v=v, m=1)
        plan = KernelPlan(n_block=int(rng.integers(1, 20)), k_block=int(rng.integers(1, 8)))
        np.testing.assert_array_equal(
            centroid_search_fast(a, books, plan), encode_hard(a, books)
        )

    def test_crafted_ties_duplicate_centroids(self):
        rng = make_rng(99)
        books = rng.standard_normal((2, 8, 3)).astype(np.float32)
        books[0, 5] = books[0, 2]  # duplicate: ties must resolve to index 2
        books[1, 7] = books[1, 0]
        a = np.hstack([books[0, 2][None], books[1, 0][None]]).astype(np.float32)
        a = np.repeat(a, 4, axis=0)
        for plan in (KernelPlan(), KernelPlan(n_block=1, k_block=2), KernelPlan(k_block=3)):
            got = centroid_search_fast(a, books, plan)
            np.testing.assert_array_equal(got, encode_hard(a, books))
            assert got[0, 0] == 2 and got[0, 1] == 0

    def test_equidistant_tie(self):
        books = np.array([[[0.0, 0.0], [2.0, 0.0]]], dtype=np.float32)
        a = np.array([[1.0, 5.0]], dtype=np.float32)  # equidistant from both
        got = centroid_search_fast(a, books, KernelPlan(k_block=1))
        assert got[0, 0] == 0


class TestGatherAccumulate:
    @pytest.mark.parametrize("seed", range(15))
    def test_bitwise_equals_naive_i32(self, seed):
        rng = make_rng(100 + seed)
        n = int(rng.integers(1, 40))
        c = int(rng.integers(1, 30))
        k = int(rng.choice([4, 8, 16]))
        m = int(rng.integers(1, 25))
        q = rng.integers(-QMAX, QMAX + 1, size=(c, k, m)).astype(np.int8)
        enc = rng.integers(0, k, size=(n, c)).astype(np.uint8)
        plan = KernelPlan(group_size=int(rng.integers(1, 10)))
        got = lut_gather_i32(enc, q, plan)
        assert got.dtype == np.int32
        np.testing.assert_array_equal(got, naive_i32(enc, q))

    def test_multiple_widening_chunks(self):
        # C > group_size forces several INT16 partials.
        rng = make_rng(7)
        c, k, m, n = 300, 4, 6, 9
        q = rng.integers(-QMAX, QMAX + 1, size=(c, k, m)).astype(np.int8)
        enc = rng.integers(0, k, size=(n, c)).astype(np.uint8)
        got = lut_gather_i32(enc, q, KernelPlan(group_size=128))
        np.testing.assert_array_equal(got, naive_i32(enc, q))

    def test_worst_case_group_at_bound(self):
        # all entries +127 with G = 258: partial hits exactly 32766, no wrap
        c, k, m, n = 258, 2, 3, 4
        q = np.full((c, k, m), QMAX, dtype=np.int8)
        enc = np.zeros((n, c), dtype=np.uint8)
        got = lut_gather_i32(enc, q, KernelPlan(group_size=258))
        assert (got == 258 * 127).all()

    def test_hand_summed_example(self):
        # 200 codebooks of +127 with G=128: partials 16256 and 9144
        c = 200
        q = np.full((c, 1, 1), QMAX, dtype=np.int8)
        enc = np.zeros((1, c), dtype=np.uint8)
        got = lut_gather_i32(enc, q, KernelPlan(group_size=128))
        assert got[0, 0] == 25400
        assert 128 * 127 == 16256 and 72 * 127 == 9144

    def test_single_codebook(self):
        q = np.array([[[1, -2], [3, 4]]], dtype=np.int8)
        table = LookupTableI8(q=q, scale=np.float32(0.5))
        enc = np.array([[1]], dtype=np.uint8)
        out = lut_gather_accumulate(enc, table)
        np.testing.assert_array_equal(out, [[1.5, 2.0]])

    def test_scale_applied_once(self):
        rng = make_rng(8)
        table_f32 = rng.standard_normal((5, 4, 3)).astype(np.float32)
        qt = quantize_table(table_f32)
        enc = rng.integers(0, 4, size=(7, 5)).astype(np.uint8)
        out = lut_gather_accumulate(enc, qt)
        want = naive_i32(enc, qt.q).astype(np.float32) * qt.scale
        np.testing.assert_array_equal(out, want)

    def test_bad_index_raises(self):
        q = np.zeros((1, 4, 2), dtype=np.int8)
        enc = np.array([[7]], dtype=np.uint8)
        with pytest.raises(CorruptionError):
            lut_gather_i32(enc, q, KernelPlan())


class TestLutLayerInfer:
    def _layer(self, rng, qat, c=4, k=8, v=3, m=5):
        books = rng.standard_normal((c, k, v)).astype(np.float32)
        weight = rng.standard_normal((c * v, m)).astype(np.float32)
        return LutLayer(
            cfg=PqConfig(v=v, k=k), books=books, weight=weight,
            bias=np.zeros(m, np.float32), qat=qat,
        )

    def test_float_path_equals_reference(self, rng):
        layer = self._layer(rng, qat=False)
        a = rng.standard_normal((11, layer.d)).astype(np.float32)
        got = lut_layer_infer(a, layer, integer=False)
        want = lut_matmul_ref(encode_hard(a, layer.books), layer.table)
        assert got.tobytes() == want.tobytes()

    def test_integer_path_equals_dequantized_oracle(self, rng):
        layer = self._layer(rng, qat=True)
        a = rng.standard_normal((9, layer.d)).astype(np.float32)
        got = lut_layer_infer(a, layer, integer=True)
        enc = encode_hard(a, layer.books)
        want = naive_i32(enc, layer.qtable.q).astype(np.float32) * layer.qtable.scale
        np.testing.assert_array_equal(got, want)

    def test_integer_requested_without_qtable(self, rng):
        layer = self._layer(rng, qat=False)
        a = rng.standard_normal((3, layer.d)).astype(np.float32)
        with pytest.raises(ConfigError):
            lut_layer_infer(a, layer, integer=True)

    def test_hash_encoder_swaps_only_indices(self, rng):
        from lutkit.hashing import build_hash_tree, encode_hash

        layer = self._layer(rng, qat=False, v=2, c=3)
        samples = rng.standard_normal((600, layer.d)).astype(np.float32)
        layer.trees = [
            build_hash_tree(samples[:, c * 2 : (c + 1) * 2], layer.books[c], levels=8)
            for c in range(3)
        ]
        a = samples[:40]
        got = lut_layer_infer(a, layer, integer=False, encoder="hash")
        want = lut_matmul_ref(encode_hash(a, layer.trees), layer.table)
        assert got.tobytes() == want.tobytes()


class TestFlopCounter:
    def test_spec_example(self):
        counts = flop_counter(100, 64, 128, 16, 8)
        assert counts["encode"] == 102400
        assert counts["lookup_aggregate"] == 102400
        assert counts["dense"] == 819200
        assert counts["dense"] / (counts["encode"] + counts["lookup_aggregate"]) == 4.0

    def test_bert_like_reduction(self):
        counts = flop_counter(1, 768, 768, 16, 32)
        reduction = counts["dense"] / (counts["encode"] + counts["lookup_aggregate"])
        assert reduction == pytest.approx(19.2)

    def test_encode_count_at_bulk_shape(self):
        assert flop_counter(10**4, 768, 96, 16, 32)["encode"] == 122_880_000

    def test_v1_k_equals_m_worse_than_dense(self):
        counts = flop_counter(10, 32, 16, 16, 1)
        lut = counts["encode"] + counts["lookup_aggregate"]
        assert lut == 2 * counts["dense"]

    def test_indivisible_raises(self):
        with pytest.raises(ConfigError):
            flop_counter(1, 10, 4, 4, 3)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_instrumented_reference(self, seed):
        rng = make_rng(300 + seed)
        v = int(rng.choice([2, 3]))
        c = int(rng.integers(1, 4))
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 6))
        k = int(rng.integers(1, 6))
        d = c * v
        got = instrumented_mac_counts(n, d, m, k, v, rng)
        assert got == flop_counter(n, d, m, k, v)


class TestBench:
    def test_report_fields_and_csv(self):
        report = bench_kernel((16, 12, 8, 4, 3), KernelPlan(), repetitions=5, rng=make_rng(0))
        assert report.lut_min_ns > 0 and report.dense_min_ns > 0
        row = report.csv_row()
        header_cols = BenchReport.CSV_HEADER.split(",")
        assert len(row.split(",")) == len(header_cols)
        assert header_cols[:5] == ["n", "d", "m", "k", "v"]
        assert header_cols[-1] == "speedup_vs_dense"

    def test_too_few_repetitions(self):
        with pytest.raises(ConfigError):
            bench_kernel((8, 8, 8, 4, 2), KernelPlan(), repetitions=3)

    def test_operation_intensity_value(self):
        assert cost(1, 64, 64, 16, 32).op_intensity == pytest.approx(2 / (1 / 16 + 1 / 32))
        assert cost(1, 64, 64, 16, 32).op_intensity == pytest.approx(64 / 3)
