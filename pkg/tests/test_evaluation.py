import csv
import json

import numpy as np
import pytest

from conftest import tiny_images
from quantattack import tensor as T
from quantattack.attacks import TriggerSpec, apply_trigger
from quantattack.data import Dataset
from quantattack.evaluation import (HessianEstimate, accuracy, backdoor_asr, disparity, evaluation_table,
                                    gaussian_noise_baseline, hessian_trace, noise_defense, poison_dataset,
                                    predictions, quantization_residual_std, transfer_matrix, write_report_csv,
                                    write_summary_json)
from quantattack.nn import build_miniconv, build_mlp
from quantattack.quant import QuantConfig, QuantizedView
from test_tensor import _Quadratic, quad_loss


class Constant:
    """Predictor returning fixed logits for every input."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def predict(self, x):
        return np.tile(self.logits, (len(x), 1))


class TestAccuracy:
    def test_matches_loop(self, rng):
        data = tiny_images(n=30, classes=3)
        m = build_miniconv(3, 8, 3, seed=1)
        logits = m.predict(data.images)
        correct = 0
        for i in range(len(data)):
            correct += int(np.argmax(logits[i]) == data.labels[i])
        assert accuracy(m, data).accuracy == correct / len(data)

    def test_tie_goes_to_lowest_index(self):
        data = tiny_images(n=4)
        np.testing.assert_array_equal(predictions(Constant([0.5, 0.5]), data.images), [0, 0, 0, 0])

    def test_per_class(self):
        data = tiny_images(n=10, classes=2)
        m = accuracy(Constant([1.0, 0.0]), data)
        assert m.accuracy == 0.5 and m.per_class_accuracy == [1.0, 0.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy(Constant([1.0]), Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 2))


class TestAsr:
    def test_constant_target(self):
        data = tiny_images(n=8)
        assert backdoor_asr(Constant([2.0, 0.0]), data, TriggerSpec(size=2, target_class=0)) == 1.0
        assert backdoor_asr(Constant([2.0, 0.0]), data, TriggerSpec(size=2, target_class=1)) == 0.0


class TestDisparity:
    def test_float_is_zero(self):
        assert disparity(build_miniconv(3, 8, 2, seed=0), QuantConfig(), 32, tiny_images()) == 0.0

    def test_sign_and_units(self):
        data = tiny_images(n=20)
        m = build_miniconv(3, 8, 2, seed=0)
        view = QuantizedView(m, QuantConfig(), 2)
        view.calibrate(data.images[:128])
        expected = 100 * (accuracy(m, data).accuracy - accuracy(view, data).accuracy)
        assert disparity(m, QuantConfig(), 2, data) == pytest.approx(expected)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            disparity(build_miniconv(3, 8, 2, seed=0), QuantConfig(), 8, tiny_images(), metric="f1")

    def test_asr_needs_trigger(self):
        with pytest.raises(ValueError):
            disparity(build_miniconv(3, 8, 2, seed=0), QuantConfig(), 8, tiny_images(), metric="asr")


class TestNoiseBaseline:
    def test_residual_std_oracle(self):
        m = build_mlp(5, [7], 3, seed=2)
        stds = quantization_residual_std(m, QuantConfig(), 4)
        w = m.layers[0].weight.data
        s = np.abs(w).max() / 7
        q = np.clip(np.sign(w / s) * np.floor(np.abs(w / s) + 0.5), -7, 7) * s
        assert stds[0] == pytest.approx(float(np.std(w - q)))
        assert set(stds) == {0, 2}

    def test_model_restored_and_seeded(self):
        data = tiny_images(n=20)
        m = build_miniconv(3, 8, 2, seed=0)
        before = m.checksum()
        a = gaussian_noise_baseline(m, QuantConfig(), 8, data, trials=3, seed=1)
        b = gaussian_noise_baseline(m, QuantConfig(), 8, data, trials=3, seed=1)
        assert m.checksum() == before and a == b and len(a) == 3

    def test_trials(self):
        with pytest.raises(ValueError):
            gaussian_noise_baseline(build_mlp(3, [], 2, seed=0), QuantConfig(), 8, tiny_images(), trials=0)

    def test_noise_defense_length(self):
        data = tiny_images(n=12)
        out = noise_defense(build_miniconv(3, 8, 2, seed=0), QuantConfig(), 8, 4, data, trials=2)
        assert len(out) == 2 and all(0 <= v <= 1 for v in out)


class QuadData:
    def __init__(self, n):
        self.images = np.zeros((n, 1))
        self.labels = np.zeros(n, dtype=int)

    def __len__(self):
        return len(self.labels)


class TestHessian:
    def test_quadratic_trace(self):
        # any probe gives the exact trace for a diagonal Hessian
        m = _Quadratic([0.1, 0.2, -0.3], [1.0, 2.0, 3.0])
        est = hessian_trace(m, QuadData(5), probes=100, samples=5, repeats=2, loss_fn=quad_loss)
        assert isinstance(est, HessianEstimate)
        assert est.mean_trace == pytest.approx(6.0, rel=0.05)

    def test_dense_quadratic_within_tolerance(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(6, 6))
        h = a @ a.T + 6 * np.eye(6)

        def loss(model, batch):
            prod = T.reshape(T.matmul(T.Tensor(h), T.reshape(model.theta, (6, 1))), (6,))
            return T.mul(T.tsum(T.mul(prod, model.theta)), 0.5)

        m = _Quadratic(rng.normal(size=6), np.ones(6))
        est = hessian_trace(m, QuadData(3), probes=100, samples=3, repeats=5, seed=3, loss_fn=loss)
        assert est.mean_trace == pytest.approx(np.trace(h), rel=0.05)

    def test_model_unchanged(self):
        data = tiny_images(n=12)
        m = build_miniconv(3, 8, 2, seed=0)
        before = m.checksum()
        hessian_trace(m, data, probes=2, samples=6, repeats=2)
        assert m.checksum() == before

    @pytest.mark.parametrize("kw", [dict(probes=0), dict(repeats=0), dict(samples=1000)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            hessian_trace(build_mlp(3, [], 2, seed=0), tiny_images(), **kw)


class TestTransfer:
    def test_self_row_bitwise_equal(self):
        data = tiny_images(n=20)
        m = build_miniconv(3, 8, 2, seed=0)
        cfg = QuantConfig()
        rows = transfer_matrix(m, cfg, [cfg, QuantConfig(granularity="channel_wise")], data, bits_list=(32, 8, 4))
        assert len(rows) == 6
        for r in rows[:3]:
            if r["bits"] == 32:
                assert r["value"] == accuracy(m, data).accuracy
            else:
                view = QuantizedView(m, cfg, r["bits"])
                view.calibrate(data.images[:128])
                assert r["value"] == accuracy(view, data).accuracy


class TestPoison:
    def test_ratio_and_labels(self):
        data = tiny_images(n=20)
        t = TriggerSpec(size=2, target_class=1)
        p = poison_dataset(data, t, 0.25, seed=0)
        changed = np.any(p.images != data.images, axis=(1, 2, 3))
        assert changed.sum() <= 5
        touched = np.nonzero(p.labels != data.labels)[0]
        np.testing.assert_array_equal(p.images[touched], apply_trigger(data.images[touched], t))
        assert data.checksum() == tiny_images(n=20).checksum()

    @pytest.mark.parametrize("r", [0.0, 1.0])
    def test_ratio_bounds(self, r):
        with pytest.raises(ValueError):
            poison_dataset(tiny_images(), TriggerSpec(size=2), r, seed=0)


class TestReports:
    def test_table_rows(self):
        data = tiny_images(n=10)
        rows = evaluation_table(build_miniconv(3, 8, 2, seed=0), QuantConfig(), data, (32, 8),
                                trigger=TriggerSpec(size=2))
        metrics = {(r["bits"], r["metric"]) for r in rows}
        assert (32, "accuracy_disparity") in metrics and (8, "asr") in metrics
        assert [r["value"] for r in rows if r["bits"] == 32 and r["metric"] == "asr_disparity"] == [0.0]

    def test_csv_round_trip(self, tmp_path):
        rows = [{"scheme": "layer_wise", "bits": 8, "metric": "accuracy", "value": 0.1 + 0.2, "trial": 0}]
        write_report_csv(rows, tmp_path / "r.csv", ["run_id: x"])
        with open(tmp_path / "r.csv") as fh:
            assert fh.readline() == "# run_id: x\n"
            back = list(csv.DictReader(fh))
        assert float(back[0]["value"]) == 0.1 + 0.2

    def test_json(self, tmp_path):
        est = HessianEstimate(1.0, 0.0, 1, 1, 1, [np.float64(1.0)])
        write_summary_json({"h": est, "a": np.arange(2), "n": np.int64(3)}, tmp_path / "s.json")
        back = json.loads((tmp_path / "s.json").read_text())
        assert back == {"a": [0, 1], "h": {"mean_trace": 1.0, "std_trace": 0.0, "probes": 1, "samples_used": 1,
                                           "repeats": 1, "traces": [1.0]}, "n": 3}
