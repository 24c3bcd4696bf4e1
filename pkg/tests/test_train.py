"""Optimizer and training loop: hand-checked Adamax steps, the learning-rate
schedule, EMA bookkeeping, seeded determinism, and the divergence guard."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from intflow import autodiff as ad
from intflow.analysis import make_toy_dataset, toy_flow_config
from intflow.autodiff import Parameter
from intflow.errors import ParameterError, TrainingDivergence, TrainingError
from intflow.flows import build_flow_model, load_model
from intflow.train import (
    AdamaxState,
    EmaWeights,
    LrSchedule,
    TrainConfig,
    adamax_step,
    ema_swap,
    ema_update,
    lr_at,
    train,
)


class TestAdamax:
    def _step(self, state, p, g, lr=1e-3):
        state.step += 1
        adamax_step(state, [p], [np.asarray(g, dtype=np.float64)], lr)

    def test_first_step_moves_by_learning_rate(self):
        # With a constant unit gradient the bias-corrected step is exactly
        # lr / (1 + eps), because m / (1 - beta1**t) telescopes to 1.
        p = Parameter(np.array([1.0]), name="p")
        self._step(AdamaxState(), p, [1.0], lr=0.001)
        np.testing.assert_allclose(p.value, [1.0 - 0.001], atol=1e-8)

    def test_constant_gradient_keeps_unit_steps(self):
        p = Parameter(np.array([1.0]), name="p")
        state = AdamaxState()
        for _ in range(5):
            self._step(state, p, [1.0], lr=0.001)
        np.testing.assert_allclose(p.value, [1.0 - 5 * 0.001], atol=1e-7)

    def test_infinity_norm_accumulator(self):
        p = Parameter(np.array([0.0]), name="p")
        state = AdamaxState()
        self._step(state, p, [2.0])
        np.testing.assert_allclose(state.u["p"], [2.0])
        self._step(state, p, [0.5])
        np.testing.assert_allclose(state.u["p"], [2.0 * 0.999])

    def test_zero_gradient_is_a_no_op(self):
        p = Parameter(np.array([3.0]), name="p")
        self._step(AdamaxState(), p, [0.0])
        np.testing.assert_array_equal(p.value, [3.0])

    def test_nonfinite_gradient_names_parameter(self):
        p = Parameter(np.array([0.0]), name="blocks.0.kernel")
        state = AdamaxState()
        state.step = 1
        with pytest.raises(TrainingError, match="blocks.0.kernel"):
            adamax_step(state, [p], [np.array([np.nan])], 1e-3)

    def test_gradient_count_mismatch(self):
        p = Parameter(np.array([0.0]), name="p")
        with pytest.raises(ParameterError):
            adamax_step(AdamaxState(), [p], [], 1e-3)

    def test_shared_step_counter_across_groups(self):
        a = Parameter(np.array([1.0]), name="a")
        b = Parameter(np.array([1.0]), name="b")
        state = AdamaxState()
        state.step += 1
        adamax_step(state, [a], [np.array([1.0])], 1e-3)
        adamax_step(state, [b], [np.array([1.0])], 1e-2)
        np.testing.assert_allclose(a.value, [1.0 - 1e-3], atol=1e-8)
        np.testing.assert_allclose(b.value, [1.0 - 1e-2], atol=1e-7)


class TestSchedule:
    def test_linear_warmup(self):
        s = LrSchedule(1e-3, decay=0.999, warmup=10)
        assert lr_at(s, 0) == pytest.approx(1e-4)
        assert lr_at(s, 4) == pytest.approx(5e-4)
        assert lr_at(s, 9) == pytest.approx(1e-3)

    def test_decay_after_warmup(self):
        s = LrSchedule(1e-3, decay=0.999, warmup=0)
        assert lr_at(s, 20) == pytest.approx(1e-3 * 0.999**20)

    def test_flat_schedule(self):
        s = LrSchedule(5e-4, decay=1.0, warmup=0)
        assert lr_at(s, 0) == lr_at(s, 100) == 5e-4

    def test_validation(self):
        with pytest.raises(ParameterError):
            LrSchedule(0.0)
        with pytest.raises(ParameterError):
            LrSchedule(1e-3, decay=0.0)
        with pytest.raises(ParameterError):
            LrSchedule(1e-3, warmup=-1)
        with pytest.raises(ParameterError):
            lr_at(LrSchedule(1e-3), -1)


class TestEma:
    def _params(self):
        return [Parameter(np.array([1.0, 2.0]), name="p")]

    def test_decay_zero_tracks_current_values(self):
        params = self._params()
        ema = EmaWeights(params, decay=0.0)
        params[0].value[...] = [5.0, 6.0]
        ema_update(ema, params)
        np.testing.assert_array_equal(ema.shadow["p"], [5.0, 6.0])

    def test_decay_one_stays_frozen(self):
        params = self._params()
        ema = EmaWeights(params, decay=1.0)
        params[0].value[...] = [5.0, 6.0]
        ema_update(ema, params)
        np.testing.assert_array_equal(ema.shadow["p"], [1.0, 2.0])

    def test_update_formula(self):
        params = self._params()
        ema = EmaWeights(params, decay=0.9)
        params[0].value[...] = [2.0, 3.0]
        ema_update(ema, params)
        np.testing.assert_allclose(ema.shadow["p"], [0.9 * 1.0 + 0.1 * 2.0, 0.9 * 2.0 + 0.1 * 3.0])

    def test_swap_is_an_involution(self):
        params = self._params()
        ema = EmaWeights(params, decay=0.5)
        params[0].value[...] = [7.0, 8.0]
        ema_swap(ema, params)
        np.testing.assert_array_equal(params[0].value, [1.0, 2.0])
        np.testing.assert_array_equal(ema.shadow["p"], [7.0, 8.0])
        ema_swap(ema, params)
        np.testing.assert_array_equal(params[0].value, [7.0, 8.0])
        np.testing.assert_array_equal(ema.shadow["p"], [1.0, 2.0])

    def test_decay_validation(self):
        with pytest.raises(ParameterError):
            EmaWeights(self._params(), decay=1.5)


def _tiny_cfg(**overrides) -> TrainConfig:
    base = dict(
        epochs=2,
        iters_per_epoch=3,
        batch_size=16,
        seed=0,
        coupling_lr=1e-4,
        prior_lr=1e-3,
        lr_decay=1.0,
        warmup_epochs=1,
        use_ema=False,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _fresh_model(bits=1, seed=0):
    model = build_flow_model(toy_flow_config(bits, depth=2, hidden=8))
    model.initialize(seed)
    return model


class TestTrainLoop:
    def test_shapes_of_result(self):
        data = make_toy_dataset(1)
        result = train(_fresh_model(), data, _tiny_cfg())
        assert result.epochs_run == 2
        assert len(result.metrics) == 4
        assert len(result.checkpoints) == 2
        assert np.isfinite(result.final_bpd)
        splits = [m[1] for m in result.metrics]
        assert splits == ["train", "val", "train", "val"]

    def test_checkpoints_are_parameter_snapshots(self):
        data = make_toy_dataset(1)
        model = _fresh_model()
        result = train(model, data, _tiny_cfg())
        np.testing.assert_array_equal(
            result.checkpoints[-1], ad.params_vector(model.parameters())
        )
        assert not np.array_equal(result.checkpoints[0], result.checkpoints[1])

    def test_seeded_runs_are_identical(self):
        data = make_toy_dataset(1)
        a_model, b_model = _fresh_model(), _fresh_model()
        a = train(a_model, data, _tiny_cfg())
        b = train(b_model, data, _tiny_cfg())
        for pa, pb in zip(a_model.parameters(), b_model.parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)
        # Metric rows match except the wall-clock column.
        for ra, rb in zip(a.metrics, b.metrics):
            assert ra[:4] == rb[:4]

    def test_different_seed_changes_course(self):
        data = make_toy_dataset(1)
        a_model, b_model = _fresh_model(), _fresh_model()
        train(a_model, data, _tiny_cfg(seed=0))
        train(b_model, data, _tiny_cfg(seed=1))
        assert any(
            not np.array_equal(pa.value, pb.value)
            for pa, pb in zip(a_model.parameters(), b_model.parameters())
        )

    def test_metrics_csv_schema(self, tmp_path):
        data = make_toy_dataset(1)
        path = tmp_path / "metrics.csv"
        result = train(_fresh_model(), data, _tiny_cfg(), metrics_path=path)
        with path.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["epoch", "split", "bpd", "lr", "wall_time"]
        assert len(rows) == 1 + len(result.metrics)
        for row, metric in zip(rows[1:], result.metrics):
            assert int(row[0]) == metric[0]
            assert row[1] == metric[1]
            assert float(row[2]) == pytest.approx(metric[2], abs=1e-7)

    def test_checkpoint_files_written_and_loadable(self, tmp_path):
        data = make_toy_dataset(1)
        model = _fresh_model()
        train(model, data, _tiny_cfg(checkpoint_every=1), checkpoint_dir=tmp_path)
        files = sorted(tmp_path.glob("epoch*.idfm"))
        assert [f.name for f in files] == ["epoch0000.idfm", "epoch0001.idfm"]
        loaded = load_model(files[-1])
        for pa, pb in zip(loaded.parameters(), model.parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_ema_validation_uses_shadow_weights(self):
        data = make_toy_dataset(1)
        model = _fresh_model()
        # Decay 1.0 freezes the shadow at the identity-gate init, so every
        # validation sees the untouched initial model.
        result = train(model, data, _tiny_cfg(use_ema=True, ema_decay=1.0, epochs=2))
        fresh = _fresh_model()
        want = data.eval_bpd(fresh)
        for _, split, bpd, _, _ in result.metrics:
            if split == "val":
                assert bpd == pytest.approx(want, abs=1e-12)

    def test_divergence_guard_trips_after_patience(self):
        class Hopeless:
            bits = 1

            def train_batch(self, rng, n):
                return rng.random((n, 1, 1, 2)) * 0.5

            def eval_bpd(self, model):
                return 50.0

        model = _fresh_model()
        with pytest.raises(TrainingDivergence):
            train(model, Hopeless(), _tiny_cfg(epochs=10, iters_per_epoch=1))

    def test_stochastic_rounding_trains(self):
        from intflow.autodiff import RoundingConfig

        data = make_toy_dataset(1)
        cfg = _tiny_cfg(
            rounding=RoundingConfig(forward="stochastic", backward="identity")
        )
        result = train(_fresh_model(), data, cfg)
        assert result.epochs_run == 2 and np.isfinite(result.final_bpd)
