import csv

import numpy as np
import pytest

from lutkit.pipeline import (
    ExperimentConfig,
    attach_hash_trees,
    predict_fast,
    run_eval,
    run_sweep,
    run_train,
)
from lutkit.train import accuracy


def sweep_rows(tmp_path, **kwargs):
    out = tmp_path / "grid.csv"
    base = ExperimentConfig(epochs=0)  # vanilla PQ: k-means init, no fine-tuning
    run_sweep(base, out_csv=out, **kwargs)
    with open(out, newline="") as f:
        return list(csv.DictReader(f))


class TestSweepTrends:
    def test_vanilla_accuracy_non_decreasing_in_k(self, tmp_path):
        rows = sweep_rows(
            tmp_path, ks=[4, 8, 16], vs=[4], replace_ns=[3],
            temperatures=["learned"], seeds=[0, 1, 2],
        )
        medians = {
            k: np.median([float(r["accuracy"]) for r in rows if int(r["k"]) == k])
            for k in (4, 8, 16)
        }
        assert medians[4] <= medians[8] <= medians[16], medians

    def test_vanilla_accuracy_degrades_replacing_frontward(self, tmp_path):
        rows = sweep_rows(
            tmp_path, ks=[16], vs=[4], replace_ns=[1, 2, 3],
            temperatures=["learned"], seeds=[0, 1, 2],
        )
        medians = {
            n: np.median(
                [float(r["accuracy"]) for r in rows if int(r["replace_last_n"]) == n]
            )
            for n in (1, 2, 3)
        }
        assert medians[1] >= medians[2] >= medians[3], medians


class TestPredictFast:
    def test_float_path_matches_training_forward_bitwise(self):
        cfg = ExperimentConfig(task="toy-gauss", replace_last_n=2, epochs=2,
                               float_epochs=20, hidden=16, seed=0)
        res = run_train(cfg)
        x = res.dataset.x_test
        slow = res.model.predict_logits(x)
        fast = predict_fast(res.model, x)
        assert slow.tobytes() == fast.tobytes()

    def test_integer_path_within_quantization_bound_of_float(self):
        # single replaced layer (the last): the paths share encodings, so the
        # deviation is pure table quantization, bounded by C * scale/2
        cfg = ExperimentConfig(task="toy-gauss", replace_last_n=1, epochs=2,
                               float_epochs=20, hidden=16, seed=0, quantize_tables=True)
        res = run_train(cfg)
        x = res.dataset.x_test
        f32_path = predict_fast(res.model, x, integer=False)
        i8_path = predict_fast(res.model, x, integer=True)
        lut = res.model.lut_layers()[0]
        c = lut.books.shape[0]
        bound = c * (float(lut.qtable.scale) / 2 + float(np.spacing(np.float32(1.0))))
        assert np.max(np.abs(f32_path - i8_path)) <= bound
        assert accuracy(res.model, res.dataset.x_test, res.dataset.y_test) > 0.5


class TestEvalReport:
    def test_hash_vs_dist_reports_agreement(self, tmp_path):
        cfg = ExperimentConfig(task="toy-gauss", replace_last_n=1, epochs=2,
                               float_epochs=20, hidden=16, seed=0, hash_levels=6)
        model_path = tmp_path / "m.lutn"
        run_train(cfg, out_path=model_path)
        dist = run_eval(model_path, "toy-gauss", encoder="dist", seed=0)
        hashed = run_eval(model_path, "toy-gauss", encoder="hash", seed=0)
        assert 0.0 <= hashed["accuracy"] <= 1.0
        assert 0.0 <= dist["accuracy"] <= 1.0
        assert len(hashed["hash_agreement"]) == 1
        assert hashed["hash_agreement"][0] > 0.5

    def test_attach_hash_trees_covers_all_lut_layers(self):
        cfg = ExperimentConfig(task="toy-gauss", replace_last_n=2, epochs=1,
                               float_epochs=15, hidden=16, seed=0)
        res = run_train(cfg)
        attach_hash_trees(res.model, res.dataset.x_train, levels=4)
        luts = res.model.lut_layers()
        assert len(luts) == 2
        for lut in luts:
            assert len(lut.trees) == lut.books.shape[0]
            assert all(t.levels == 4 for t in lut.trees)
