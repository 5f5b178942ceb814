import numpy as np
import pytest

from kunet.cli import tiny_plan
from kunet.data import WindowBatch, collect, windows
from kunet.errors import ConfigError, DataError, DimensionError
from kunet.normalize import apply, transform
from kunet.partition import PartitionPlan
from kunet.tensor import Tensor
from kunet.train import (Adam, TrainConfig, TrainData, TrainingDiverged, evaluate, mae, mse, mse_loss,
                         repeat_last_baseline, train)
from kunet.unet import build, build_forecaster, forward


def sine_batch(n=200, lookback=8, horizon=4, period=12.0):
    t = np.arange(n)
    return collect(windows(np.sin(2 * np.pi * t / period) + 0.1 * t / n, lookback, horizon))


class TestMetrics:
    def test_examples(self):
        assert mse([1, 2], [1, 2]) == mae([1, 2], [1, 2]) == 0.0
        assert mse([0, 0], [1, -1]) == 1.0 and mae([0, 0], [1, -1]) == 1.0
        assert mse([1, 2], [0, 4]) == 2.5 and mae([1, 2], [0, 4]) == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse(np.ones(3), np.ones(4))
        with pytest.raises(DimensionError):
            mae(np.ones((2, 1)), np.ones(2))


class TestBaseline:
    def test_repeat_last(self):
        np.testing.assert_array_equal(repeat_last_baseline(np.array([1.0, 2.0, 3.0]), 2), [3.0, 3.0])

    def test_constant_series(self):
        w = np.full((5, 10, 2), 4.0)
        assert mse(repeat_last_baseline(w, 3), np.full((5, 3, 2), 4.0)) == 0.0

    def test_sine_closed_form(self):
        omega, lookback, horizon = 2 * np.pi / 24, 32, 8
        b = collect(windows(np.sin(omega * np.arange(300)), lookback, horizon))
        got = mse(repeat_last_baseline(b.inputs, horizon), b.targets)
        last = b.starts + lookback - 1
        k = np.arange(1, horizon + 1)
        # sin(a) - sin(b) = 2 cos((a + b) / 2) sin((a - b) / 2)
        err = 2 * np.cos(omega * (last[:, None] + k / 2)) * np.sin(omega * k / 2)
        assert got == pytest.approx(np.mean(err ** 2), rel=1e-12)

    def test_empty_window(self):
        with pytest.raises(DataError):
            repeat_last_baseline(np.zeros((0,)), 2)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(epochs=0), dict(patience=400),
                                        dict(batch_size=0), dict(norm="median"),
                                        dict(augment=True, erase_p=2.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()

    def test_defaults(self):
        cfg = TrainConfig().validate()
        assert (cfg.epochs, cfg.patience, cfg.batch_size, cfg.norm) == (300, 30, 32, "mean")
        assert 5e-5 <= cfg.learning_rate <= 1e-3


class TestEvaluate:
    def test_window_mean_predictor(self):
        model = build_forecaster(tiny_plan(), 4, skips=False)
        for w in model.decoder:
            for t in w.params.values():
                t.data[...] = 0.0
        b = sine_batch()
        report = evaluate(model, b, "mean")
        means = b.inputs.mean(axis=1, keepdims=True)
        assert report.mae == pytest.approx(np.mean(np.abs(b.targets - means)), rel=1e-12)

    def test_empty(self):
        model = build_forecaster(tiny_plan(), 4)
        empty = WindowBatch(np.zeros((0, 8, 1)), np.zeros((0, 4, 1)), np.zeros(0, dtype=int))
        with pytest.raises(DataError):
            evaluate(model, empty)

    def test_finite_and_per_horizon(self):
        model = build_forecaster(tiny_plan(), 4, "lstm", seed=2)
        report = evaluate(model, sine_batch())
        assert np.isfinite(report.mse) and report.mse >= 0 and report.mae >= 0
        assert report.horizon_mse.shape == (4,)
        assert np.mean(report.horizon_mse) == pytest.approx(report.mse)

    def test_batch_size_invariance(self):
        model = build_forecaster(tiny_plan(), 4, "transformer", seed=1)
        b = sine_batch()
        a, c = evaluate(model, b, batch_size=7), evaluate(model, b, batch_size=1000)
        assert a.mse == pytest.approx(c.mse, rel=1e-12)
        np.testing.assert_allclose(a.horizon_mae, c.horizon_mae, rtol=1e-12)

    def test_multichannel_is_channel_independent(self, rng):
        model = build_forecaster(tiny_plan(), 4, seed=1)
        x = rng.normal(size=(5, 12, 3))
        b = collect(windows(x.reshape(-1, 3), 8, 4))
        full = evaluate(model, b)
        per = [evaluate(model, WindowBatch(b.inputs[..., c:c + 1], b.targets[..., c:c + 1], b.starts)).mse
               for c in range(3)]
        assert full.mse == pytest.approx(np.mean(per), rel=1e-12)


class TestTraining:
    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_loss(self, seed):
        model = build_forecaster(tiny_plan(), 4, "linear-1-hidden", seed=seed)
        b = sine_batch()
        x, state = apply(b.inputs[:16], "mean")
        y = transform(b.targets[:16], state)

        def loss():
            return mse_loss(forward(model, Tensor(x)), Tensor(y))

        before = loss()
        model.zero_grad()
        before.backward()
        Adam(model.parameters(), lr=1e-5).step()
        assert loss().item() < before.item()

    def test_early_stop_returns_first_epoch(self):
        model = build_forecaster(tiny_plan(), 4, seed=0)
        snapshots = []

        def worsening(m, epoch):
            snapshots.append({k: t.data.copy() for k, t in m.registry.items()})
            return float(epoch)

        cfg = TrainConfig(epochs=10, patience=1, learning_rate=1e-2)
        model, report = train(model, cfg, TrainData(sine_batch()), validate=worsening)
        assert report.epochs_run == 2 and report.best_epoch == 1
        for k, t in model.registry.items():
            np.testing.assert_array_equal(t.data, snapshots[0][k])

    def test_restored_weights_score_best(self):
        model = build_forecaster(tiny_plan(), 4, seed=0)
        train_b, val_b = sine_batch(200), sine_batch(120, period=11.0)
        cfg = TrainConfig(epochs=15, patience=3, learning_rate=5e-3)
        model, report = train(model, cfg, TrainData(train_b, val_b))
        assert report.mse == pytest.approx(min(report.val_curve), rel=1e-12)

    def test_deterministic(self):
        reports = []
        for _ in range(2):
            model = build_forecaster(tiny_plan(), 4, "linear-1-hidden", seed=4)
            cfg = TrainConfig(epochs=4, patience=4, augment=True, seed=11)
            _, r = train(model, cfg, TrainData(sine_batch(), sine_batch(100)))
            reports.append(r.lines(wall_clock=False) + [repr(v) for v in r.train_curve])
        assert reports[0] == reports[1]

    def test_divergence(self):
        model = build_forecaster(tiny_plan(), 4, seed=0)
        b = sine_batch()
        b.inputs[3, 2, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, TrainConfig(epochs=2, patience=1, shuffle=False), TrainData(b))

    def test_empty_training_split(self):
        model = build_forecaster(tiny_plan(), 4)
        empty = WindowBatch(np.zeros((0, 8, 1)), np.zeros((0, 4, 1)), np.zeros(0, dtype=int))
        with pytest.raises(DataError):
            train(model, TrainConfig(epochs=1, patience=1), TrainData(empty))

    def test_multichannel_needs_channel_independence(self, rng):
        model = build_forecaster(tiny_plan(), 4)
        b = collect(windows(rng.normal(size=(40, 2)), 8, 4))
        with pytest.raises(DimensionError):
            train(model, TrainConfig(epochs=1, patience=1, channel_independent=False), TrainData(b))

    def test_joint_channels(self, rng):
        plan = PartitionPlan(lookback=8, unit_len=2, len_multiples=(2, 2), features=2, unit_width=2, hidden=4)
        model = build_forecaster(plan, 4, seed=0)
        b = collect(windows(rng.normal(size=(40, 2)), 8, 4))
        _, report = train(model, TrainConfig(epochs=2, patience=2, channel_independent=False), TrainData(b))
        assert np.isfinite(report.mse)
