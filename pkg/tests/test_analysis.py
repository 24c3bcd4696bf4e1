"""Experiment machinery: toy sources, the two finite-difference routes,
the gradient agreement sweep, loss-surface slices, and the flatten demo.

The fast central-difference evaluator is the one piece of real numerics
here, so it is checked coordinate for coordinate against the naive
per-parameter evaluator on every parameter group.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from intflow import analysis, autodiff as ad
from intflow.analysis import (
    DEFAULT_EPSILONS,
    AgreementRecord,
    EstimatorResult,
    agreement_sweep,
    continuous_eval_bpd,
    estimator_matrix,
    estimator_means,
    fast_fd_gradient,
    fd_gradient,
    flatten_demo,
    landscape_axes,
    landscape_slice,
    make_toy_dataset,
    mean_by_epsilon,
    naive_fd_gradient,
    straight_through_gradient,
    toy_flow_config,
    toy_pmf,
    toy_train_config,
    write_agreement_csv,
    write_estimator_csv,
    write_landscape_csv,
)
from intflow.autodiff import Parameter, RoundingConfig
from intflow.errors import DomainError, ParameterError, UsageError
from intflow.flows import FlowConfig, build_flow_model, training_loss

ENTROPY_1BIT = 0.9232196723355077


def _small_model(bits: int = 2, seed: int = 11, gate: float = 0.6):
    """Tiny perturbed toy flow whose shifts actually move codes."""
    model = build_flow_model(toy_flow_config(bits, couplings=2, depth=1, hidden=4))
    model.initialize(seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        if p.name.endswith(".scale"):
            p.value[...] = rng.uniform(gate / 2, gate, size=p.value.shape)
    return model


class TestToySource:
    def test_one_bit_masses_are_fixed(self):
        np.testing.assert_array_equal(toy_pmf(1), [[0.1, 0.3], [0.2, 0.4]])

    def test_one_bit_returns_a_copy(self):
        first = toy_pmf(1)
        first[0, 0] = 0.7
        assert toy_pmf(1)[0, 0] == 0.1

    def test_ladder_oracle_two_bits(self):
        cells = 16
        ladder = np.geomspace(1 / 17, 16 / 17, cells)
        expected = (ladder / ladder.sum()).reshape(4, 4)
        np.testing.assert_allclose(toy_pmf(2), expected, rtol=0, atol=0)

    @pytest.mark.parametrize("bits", [2, 3])
    def test_ladder_is_a_strict_positive_pmf(self, bits):
        pmf = toy_pmf(bits)
        assert pmf.shape == (2**bits, 2**bits)
        assert pmf.min() > 0
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
        assert len(np.unique(pmf)) == pmf.size

    def test_rejects_zero_bits(self):
        with pytest.raises(ParameterError, match="bits"):
            toy_pmf(0)

    def test_dataset_entropy_anchor(self):
        assert make_toy_dataset(1).entropy_bpd == pytest.approx(ENTROPY_1BIT, abs=1e-9)

    def test_train_config_epoch_split(self):
        cfg = toy_train_config(iterations=250)
        assert (cfg.epochs, cfg.iters_per_epoch) == (3, 100)
        short = toy_train_config(iterations=50)
        assert (short.epochs, short.iters_per_epoch) == (1, 50)

    def test_flow_config_geometry(self):
        cfg = toy_flow_config(3)
        assert (cfg.bits, cfg.channels, cfg.height, cfg.width) == (3, 2, 1, 1)
        assert cfg.levels == 1 and cfg.s2d_factor == 1


class TestGradientRoutes:
    """The surrogate route and both finite-difference routes."""

    def test_straight_through_matches_manual_tape(self, rng):
        model = _small_model()
        batch = make_toy_dataset(2).sample_codes(rng, 32)
        params = model.param_groups()["coupling"]
        got = straight_through_gradient(model, batch, params)
        loss = training_loss(model, batch.reals(), RoundingConfig())
        want = ad.flatten_arrays(ad.gradient(loss, params))
        np.testing.assert_array_equal(got, want)

    @pytest.mark.parametrize("group", ["coupling", "prior", "all"])
    def test_fast_route_matches_naive_route(self, rng, group):
        model = _small_model()
        batch = make_toy_dataset(2).sample_codes(rng, 48)
        if group == "all":
            params = model.parameters()
        else:
            params = model.param_groups()[group]
        eps = 1e-2
        fast = fast_fd_gradient(model, batch, params, eps)
        naive = naive_fd_gradient(model, batch, params, eps)
        assert fast.shape == naive.shape
        np.testing.assert_allclose(fast, naive, rtol=0, atol=1e-9)

    def test_fast_route_sees_code_movement(self, rng):
        model = _small_model(gate=0.9)
        batch = make_toy_dataset(2).sample_codes(rng, 48)
        grad = fast_fd_gradient(model, batch, model.param_groups()["coupling"], 0.1)
        assert np.any(grad != 0.0)

    def test_dispatcher_routes_and_rejects(self, rng):
        model = _small_model()
        batch = make_toy_dataset(2).sample_codes(rng, 16)
        params = [model.parameters()[0]]
        fast = fd_gradient(model, batch, params, 1e-2, mode="fast")
        naive = fd_gradient(model, batch, params, 1e-2, mode="naive")
        np.testing.assert_allclose(fast, naive, rtol=0, atol=1e-9)
        with pytest.raises(ParameterError, match="forward"):
            fd_gradient(model, batch, params, 1e-2, mode="forward")

    def test_fast_route_rejects_bad_eps(self, rng):
        model = _small_model()
        batch = make_toy_dataset(2).sample_codes(rng, 8)
        with pytest.raises(ParameterError, match="eps"):
            fast_fd_gradient(model, batch, model.parameters(), 0.0)

    def test_fast_route_is_single_level_only(self, rng):
        config = FlowConfig(
            bits=2, channels=1, height=4, width=4, levels=2, couplings=1,
            s2d_factor=2, net_depth=1, net_hidden=4, prior_components=2,
        )
        model = build_flow_model(config)
        model.initialize(0)
        batch_codes = rng.integers(0, 4, size=(8, 4, 4, 1))
        from intflow.grid import GridTensor

        with pytest.raises(UsageError, match="single-level"):
            fast_fd_gradient(model, GridTensor(batch_codes, 2), model.parameters(), 1e-2)

    def test_fast_route_requires_pointwise_nets(self, rng):
        config = toy_flow_config(2, couplings=1, depth=1, hidden=4)
        model = build_flow_model(FlowConfig.from_dict({**config.to_dict(), "variant": "relu"}))
        model.initialize(0)
        batch = make_toy_dataset(2).sample_codes(rng, 8)
        with pytest.raises(UsageError, match="1x1"):
            fast_fd_gradient(model, batch, model.parameters(), 1e-2)

    def test_fast_route_rejects_foreign_parameter(self, rng):
        model = _small_model()
        batch = make_toy_dataset(2).sample_codes(rng, 8)
        rogue = Parameter(np.zeros(3), name="rogue")
        with pytest.raises(UsageError, match="rogue"):
            fast_fd_gradient(model, batch, [rogue], 1e-2)


class TestAgreementSweep:
    def test_default_epsilons_are_log_spaced(self):
        assert len(DEFAULT_EPSILONS) == 8
        np.testing.assert_allclose(DEFAULT_EPSILONS, np.geomspace(1e-4, 5e-3, 8))

    def test_call_pattern_one_surrogate_per_batch(self, monkeypatch):
        """Each batch is drawn once: one surrogate call, one FD call per eps."""
        model = _small_model(bits=1)
        dataset = make_toy_dataset(1)
        st_calls: list[object] = []
        fd_calls: list[tuple[object, float]] = []

        def fake_st(model, batch, params, rounding=None):
            st_calls.append(batch)
            return np.array([3.0, 4.0])

        def fake_fd(model, batch, params, eps, mode="fast"):
            fd_calls.append((batch, eps))
            return np.array([3.0, 4.0])

        monkeypatch.setattr(analysis, "straight_through_gradient", fake_st)
        monkeypatch.setattr(analysis, "fd_gradient", fake_fd)
        records = agreement_sweep(
            model, dataset, epsilons=(1e-3, 1e-2), batches=3, batch_size=4
        )
        assert len(st_calls) == 3
        assert len({id(b) for b in st_calls}) == 3
        assert len(fd_calls) == 6
        for batch in st_calls:
            eps_seen = [eps for b, eps in fd_calls if b is batch]
            assert eps_seen == [1e-3, 1e-2]
        assert [(r.batch_index, r.epsilon) for r in records] == [
            (0, 1e-3), (0, 1e-2), (1, 1e-3), (1, 1e-2), (2, 1e-3), (2, 1e-2)
        ]
        assert all(r.cosine == pytest.approx(1.0) for r in records)

    def test_defaults_to_coupling_parameters(self, monkeypatch):
        model = _small_model(bits=1)
        seen = {}

        def fake_st(model, batch, params, rounding=None):
            seen["params"] = list(params)
            return np.ones(2)

        monkeypatch.setattr(analysis, "straight_through_gradient", fake_st)
        monkeypatch.setattr(analysis, "fd_gradient", lambda *a, **k: np.ones(2))
        agreement_sweep(model, make_toy_dataset(1), epsilons=(1e-2,), batches=1)
        assert seen["params"] == model.param_groups()["coupling"]

    def test_real_sweep_smoke(self):
        model = _small_model(bits=1)
        records = agreement_sweep(
            model, make_toy_dataset(1), epsilons=(1e-2, 1e-1), batches=2, batch_size=16
        )
        assert len(records) == 4
        for r in records:
            assert math.isnan(r.cosine) or -1.0 <= r.cosine <= 1.0

    def test_mean_by_epsilon_skips_vanished_records(self):
        records = [
            AgreementRecord(0.1, 0, 0.5),
            AgreementRecord(0.1, 1, float("nan")),
            AgreementRecord(0.1, 2, 0.7),
            AgreementRecord(0.2, 0, float("nan")),
        ]
        means = mean_by_epsilon(records)
        assert means[0.1] == pytest.approx(0.6)
        assert math.isnan(means[0.2])
        assert list(means) == [0.1, 0.2]


class TestEstimatorGrid:
    def test_matrix_runs_every_combo_and_seed(self):
        combos = (
            ("hard_round", "identity", "discrete"),
            ("identity", "identity", "continuous"),
        )
        results = estimator_matrix(bits=1, seeds=(0,), iterations=5, combos=combos)
        assert [(r.forward, r.backward, r.mode, r.seed) for r in results] == [
            ("hard_round", "identity", "discrete", 0),
            ("identity", "identity", "continuous", 0),
        ]
        discrete, continuous = results
        assert discrete.bpd >= ENTROPY_1BIT - 1e-9
        assert np.isfinite(continuous.bpd)

    def test_means_average_across_seeds(self):
        results = [
            EstimatorResult("hard_round", "identity", "discrete", 0, 1.0),
            EstimatorResult("hard_round", "identity", "discrete", 1, 2.0),
            EstimatorResult("identity", "identity", "continuous", 0, 3.0),
        ]
        means = estimator_means(results)
        assert means[("hard_round", "identity", "discrete")] == pytest.approx(1.5)
        assert means[("identity", "identity", "continuous")] == pytest.approx(3.0)

    def test_continuous_eval_is_frozen_noise(self, trained_toy1):
        model, _ = trained_toy1
        dataset = make_toy_dataset(1)
        first = continuous_eval_bpd(model, dataset, samples=256, seed=5)
        again = continuous_eval_bpd(model, dataset, samples=256, seed=5)
        other = continuous_eval_bpd(model, dataset, samples=256, seed=6)
        assert first == again
        assert first != other


class TestLandscapeAxes:
    def test_matches_svd_of_the_offsets(self, rng):
        ckpts = rng.standard_normal((6, 9))
        axis1, axis2 = landscape_axes(ckpts)
        diffs = ckpts[:-1] - ckpts[-1]
        vt = np.linalg.svd(diffs, full_matrices=False)[2]
        for axis, row in ((axis1, vt[0]), (axis2, vt[1])):
            first = np.flatnonzero(np.abs(row) > 1e-12)[0]
            want = -row if row[first] < 0 else row
            np.testing.assert_allclose(axis, want, atol=1e-10)

    def test_axes_are_orthonormal(self, rng):
        axis1, axis2 = landscape_axes(rng.standard_normal((5, 12)))
        assert np.linalg.norm(axis1) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(axis2) == pytest.approx(1.0, abs=1e-12)
        assert abs(axis1 @ axis2) < 1e-10

    def test_needs_three_checkpoints(self, rng):
        with pytest.raises(DomainError, match="three checkpoints"):
            landscape_axes(rng.standard_normal((2, 5)))

    def test_collinear_path_is_degenerate(self, rng):
        direction = rng.standard_normal(7)
        ckpts = np.outer(np.arange(4, dtype=float), direction)
        with pytest.raises(DomainError, match="fewer than two"):
            landscape_axes(ckpts)


class TestLandscapeSlice:
    def _setup(self, rng):
        model = _small_model(bits=1)
        dataset = make_toy_dataset(1)
        n = ad.params_vector(model.parameters()).size
        ckpts = rng.standard_normal((4, n)) * 0.01
        axis1, axis2 = landscape_axes(ckpts)
        return model, dataset, axis1, axis2, ckpts

    def test_center_cell_reproduces_base_loss_exactly(self, rng):
        model, dataset, axis1, axis2, _ = self._setup(rng)
        slc = landscape_slice(
            model, lambda: dataset.eval_bpd(model), axis1, axis2,
            radius=0.05, resolution=3,
        )
        assert slc.losses[1, 1] == slc.base_loss
        assert slc.base_loss == dataset.eval_bpd(model)

    def test_offsets_span_the_radius_symmetrically(self, rng):
        model, dataset, axis1, axis2, _ = self._setup(rng)
        slc = landscape_slice(
            model, lambda: dataset.eval_bpd(model), axis1, axis2,
            radius=0.1, resolution=5,
        )
        np.testing.assert_allclose(slc.alphas, [-0.1, -0.05, 0.0, 0.05, 0.1], atol=1e-15)
        np.testing.assert_array_equal(slc.betas, slc.alphas)
        assert slc.losses.shape == (5, 5)

    def test_parameters_survive_the_sweep(self, rng):
        model, dataset, axis1, axis2, _ = self._setup(rng)
        before = ad.params_vector(model.parameters())
        landscape_slice(
            model, lambda: dataset.eval_bpd(model), axis1, axis2,
            radius=0.2, resolution=3,
        )
        np.testing.assert_array_equal(ad.params_vector(model.parameters()), before)

    def test_trajectory_projects_onto_the_axes(self, rng):
        model, dataset, axis1, axis2, ckpts = self._setup(rng)
        center = ad.params_vector(model.parameters())
        slc = landscape_slice(
            model, lambda: dataset.eval_bpd(model), axis1, axis2,
            radius=0.05, resolution=3, checkpoints=ckpts,
        )
        assert len(slc.trajectory) == len(ckpts)
        for k, (step, a, b) in enumerate(slc.trajectory):
            assert step == k
            assert a == pytest.approx((ckpts[k] - center) @ axis1, abs=1e-12)
            assert b == pytest.approx((ckpts[k] - center) @ axis2, abs=1e-12)

    def test_validates_grid_shape(self, rng):
        model, dataset, axis1, axis2, _ = self._setup(rng)
        eval_fn = lambda: dataset.eval_bpd(model)
        with pytest.raises(ParameterError, match="resolution"):
            landscape_slice(model, eval_fn, axis1, axis2, resolution=1)
        with pytest.raises(ParameterError, match="radius"):
            landscape_slice(model, eval_fn, axis1, axis2, radius=0.0)
        with pytest.raises(UsageError, match="axis length"):
            landscape_slice(model, eval_fn, axis1[:-1], axis2[:-1])


class TestFlattenDemo:
    def test_one_bit_joint_flattens_losslessly(self):
        demo = flatten_demo(toy_pmf(1))
        assert demo.counts == (2, 2)
        assert demo.bpd == pytest.approx(demo.entropy_bpd, abs=1e-12)
        assert demo.entropy_bpd == pytest.approx(ENTROPY_1BIT, abs=1e-9)

    def test_pushed_joint_collapses_to_one_column(self):
        demo = flatten_demo(toy_pmf(1))
        assert demo.pushed.shape == (4, 2)
        assert demo.pushed[:, 0].sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(demo.pushed[:, 1:], 0.0)
        assert demo.second_singular <= 1e-12

    def test_three_coordinate_joint_skips_the_matrix_audit(self):
        pmf = np.full((2, 2, 2), 1 / 8)
        demo = flatten_demo(pmf)
        assert demo.pushed is None and demo.second_singular is None
        assert demo.bpd == pytest.approx(1.0, abs=1e-12)
        assert demo.entropy_bpd == pytest.approx(1.0, abs=1e-12)

    def test_large_joints_are_refused(self):
        with pytest.raises(DomainError, match="too large"):
            flatten_demo(np.full((101, 101), 1 / 10201))


class TestCsvEmitters:
    def test_agreement_csv_layout(self, tmp_path):
        path = tmp_path / "sub" / "agreement.csv"
        records = [AgreementRecord(0.1, 0, 0.9), AgreementRecord(0.2, 0, 0.8)]
        write_agreement_csv(records, path, metadata={"source": "unit"})
        lines = path.read_text().splitlines()
        assert lines[0] == "# source: unit"
        assert lines[1] == "epsilon,batch_id,cosine"
        assert lines[2] == "0.1,0,0.9"
        assert len(lines) == 4

    def test_estimator_csv_layout(self, tmp_path):
        path = tmp_path / "estimators.csv"
        results = [EstimatorResult("hard_round", "identity", "discrete", 0, 1.25)]
        write_estimator_csv(results, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "forward,backward,mode,seed,bpd"
        assert lines[1] == "hard_round,identity,discrete,0,1.25"

    def test_landscape_csv_layout(self, tmp_path, rng):
        model = _small_model(bits=1)
        dataset = make_toy_dataset(1)
        n = ad.params_vector(model.parameters()).size
        ckpts = rng.standard_normal((4, n)) * 0.01
        axis1, axis2 = landscape_axes(ckpts)
        slc = landscape_slice(
            model, lambda: dataset.eval_bpd(model), axis1, axis2,
            radius=0.05, resolution=3, checkpoints=ckpts,
        )
        grid_path = tmp_path / "landscape.csv"
        traj_path = tmp_path / "trajectory.csv"
        write_landscape_csv(slc, grid_path, trajectory_path=traj_path)
        grid_lines = grid_path.read_text().splitlines()
        assert grid_lines[0] == "alpha,beta,loss"
        assert len(grid_lines) == 1 + 9
        traj_lines = traj_path.read_text().splitlines()
        assert traj_lines[0] == "step,alpha,beta"
        assert len(traj_lines) == 1 + len(ckpts)
