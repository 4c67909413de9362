"""Training: loss contract, batching, normalization, noise, the fit loop and
checkpointing."""

import numpy as np
import pytest

from mgnt.data import GraphConfig, feature_dims, get_schema, prepare_trajectory
from mgnt.errors import BatchContractError, ConfigError, ValidationError
from mgnt.model import ModelConfig, forward, init_params
from mgnt.oracle import OracleConfig, simulate_impact
from mgnt.tensor import Tape, Tensor
from mgnt.train import (Normalizer, TrainConfig, compute_loss, fit,
                        load_checkpoint, make_batch, make_batch_from_pairs,
                        save_checkpoint, evaluate_one_step_loss, write_history_csv)


class TestComputeLoss:
    def test_zero_for_perfect_prediction(self):
        pred = Tensor(np.ones((4, 3)))
        mask = np.array([True, True, False, True])
        loss = compute_loss(pred, np.ones((4, 3)), mask, ((0, 4),))
        assert loss.item() == 0.0

    def test_single_node_residual_34_gives_25(self):
        pred = Tensor(np.array([[3.0, 4.0]]))
        loss = compute_loss(pred, np.zeros((1, 2)), np.array([True]), ((0, 1),))
        assert loss.item() == pytest.approx(25.0)

    def test_two_sample_batch_averages_means(self):
        # sample 0: one masked node with squared norm 2; sample 1: one with 4
        pred = Tensor(np.array([[1.0, 1.0], [0.0, 0.0], [2.0, 0.0], [0.0, 0.0]]))
        target = np.zeros((4, 2))
        mask = np.array([True, False, True, False])
        loss = compute_loss(pred, target, mask, ((0, 2), (2, 4)))
        assert loss.item() == pytest.approx(3.0)

    def test_rigid_targets_do_not_matter(self):
        rng = np.random.default_rng(0)
        pred = Tensor(rng.standard_normal((5, 3)))
        target = rng.standard_normal((5, 3))
        mask = np.array([True, True, False, True, False])
        base = compute_loss(pred, target, mask, ((0, 5),)).item()
        target2 = target.copy()
        target2[2] += 100.0
        target2[4] -= 50.0
        again = compute_loss(pred, target2, mask, ((0, 5),)).item()
        assert again == base

    def test_empty_mask_is_config_error(self):
        pred = Tensor(np.ones((2, 2)))
        with pytest.raises(ConfigError):
            compute_loss(pred, np.ones((2, 2)), np.array([False, False]), ((0, 2),))

    def test_gradient_matches_finite_differences(self):
        from mgnt.tensor import grad_check
        rng = np.random.default_rng(1)
        target = rng.standard_normal((4, 2))
        mask = np.array([True, False, True, True])
        err = grad_check(
            lambda p: compute_loss(p, target, mask, ((0, 2), (2, 4))),
            [Tensor(rng.standard_normal((4, 2)))])
        assert err < 1e-7


class TestMakeBatch:
    def test_single_index(self, tiny_prep):
        sample, target, mask = make_batch(tiny_prep, [0], "absolute")
        assert sample.sample_ranges == ((0, tiny_prep.traj.n_nodes),)
        assert target.shape == (tiny_prep.traj.n_nodes, 5)
        np.testing.assert_array_equal(
            target[:, :2],
            tiny_prep.traj.arrays["x"][1] - tiny_prep.traj.arrays["X"])

    def test_multi_index_constant_node_count(self, tiny_prep):
        sample, target, mask = make_batch(tiny_prep, [0, 2, 4], "absolute")
        n = tiny_prep.traj.n_nodes
        assert sample.n_nodes == 3 * n
        assert len(sample.sample_ranges) == 3
        assert mask.shape == (3 * n,)

    def test_boundary_index_rejected(self, tiny_prep):
        last = tiny_prep.n_transitions - 1
        make_batch(tiny_prep, [last], "absolute")  # fine
        with pytest.raises(ValidationError, match="last valid index"):
            make_batch(tiny_prep, [last + 1], "absolute")

    def test_mixed_trajectories_rejected(self, tiny_prep):
        with pytest.raises(BatchContractError):
            make_batch_from_pairs([tiny_prep, tiny_prep], [(0, 0), (1, 1)], "absolute")

    def test_pairs_single_trajectory_ok(self, tiny_prep):
        sample, _, _ = make_batch_from_pairs([tiny_prep], [(0, 0), (0, 1)], "absolute")
        assert len(sample.sample_ranges) == 2

    def test_delta_targets(self, tiny_prep):
        a = tiny_prep.traj.arrays
        _, target, _ = make_batch(tiny_prep, [1], "delta")
        np.testing.assert_allclose(target[:, :2], a["x"][2] - a["x"][1], atol=1e-12)


class TestNormalizer:
    def test_round_trip_identity(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        rng = np.random.default_rng(2)
        y = rng.standard_normal((7, 5))
        back = norm.denormalize_targets(norm.normalize_targets(y))
        np.testing.assert_allclose(back, y, atol=1e-10)

    def test_normalized_features_centered(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        rows = []
        for t in range(tiny_prep.traj.n_frames):
            rows.append(tiny_prep.sample(t).node_features)
        stacked = (np.concatenate(rows) - norm.node_mean) / norm.node_std
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-8)
        # constant features (one-hot columns) get a floored std, not a blow-up
        assert np.isfinite(stacked).all()

    def test_std_floor(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        assert (norm.node_std >= 1e-8).all()
        assert (norm.target_std >= 1e-8).all()

    def test_arrays_round_trip(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        back = Normalizer.from_arrays(norm.to_arrays())
        np.testing.assert_array_equal(back.node_mean, norm.node_mean)
        np.testing.assert_array_equal(back.target_std, norm.target_std)


class TestNoise:
    def test_scale_zero_identity(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        rng = np.random.default_rng(3)
        frame = tiny_prep.frame(0)
        out = tiny_prep.schema.inject_noise(frame, 0.0, None, rng, tiny_prep.deformable)
        assert out is frame

    def test_fixed_seed_reproducible(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        stds = tiny_prep.schema.noise_stds(norm)
        frames = []
        for _ in range(2):
            rng = np.random.default_rng(4)
            frame = tiny_prep.frame(0)
            frames.append(tiny_prep.schema.inject_noise(
                frame, 0.01, stds, rng, tiny_prep.deformable))
        np.testing.assert_array_equal(frames[0]["x"], frames[1]["x"])
        np.testing.assert_array_equal(frames[0]["v"], frames[1]["v"])

    def test_empirical_std_within_5_percent(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        stds = tiny_prep.schema.noise_stds(norm)
        rng = np.random.default_rng(5)
        scale = 0.1
        frame = tiny_prep.frame(0)
        deform = tiny_prep.deformable
        draws = []
        for _ in range(1200):
            noisy = tiny_prep.schema.inject_noise(frame, scale, stds, rng, deform)
            draws.append(noisy["v"][deform] - frame["v"][deform])
        emp = np.concatenate(draws).std(axis=0)   # > 10^4 draws per component
        np.testing.assert_allclose(emp, scale * stds["v"], rtol=0.05)

    def test_rigid_nodes_untouched(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        stds = tiny_prep.schema.noise_stds(norm)
        rng = np.random.default_rng(6)
        frame = tiny_prep.frame(0)
        noisy = tiny_prep.schema.inject_noise(frame, 0.1, stds, rng, tiny_prep.deformable)
        rigid = ~tiny_prep.deformable
        np.testing.assert_array_equal(noisy["x"][rigid], frame["x"][rigid])

    def test_alpha_stays_nonnegative(self, tiny_prep):
        norm = Normalizer.fit([tiny_prep], "absolute")
        stds = dict(tiny_prep.schema.noise_stds(norm))
        stds["alpha"] = 10.0
        rng = np.random.default_rng(7)
        noisy = tiny_prep.schema.inject_noise(tiny_prep.frame(0), 1.0, stds, rng,
                                              tiny_prep.deformable)
        assert (noisy["alpha"] >= 0).all()


def _fit_setup(steps=60, **overrides):
    gcfg = GraphConfig(n_frequencies=2)
    schema = get_schema("impact")
    traj = simulate_impact(OracleConfig(rows=3, cols=3, frames=6, substeps=10))
    prep = prepare_trajectory(traj, schema, gcfg)
    dims = feature_dims(schema, gcfg)
    mcfg = ModelConfig(latent_dim=10, n_tokens=4, n_heads=2,
                       transformer_dims=(8, 4, 8), **dims)
    kwargs = dict(steps=steps, batch_size=2, lr=3e-3, lr_min=1e-4,
                  noise_scale=0.0, seed=1, checkpoint_every=30)
    kwargs.update(overrides)
    return prep, mcfg, TrainConfig(**kwargs)


class TestFit:
    def test_loss_decreases_and_history_finite(self):
        prep, mcfg, tcfg = _fit_setup(steps=80)
        result = fit([prep], mcfg, tcfg)
        hist = result.history
        assert hist.shape == (80, 4)
        assert np.isfinite(hist).all()
        assert hist[-10:, 1].mean() < 0.5 * hist[:10, 1].mean()

    def test_same_seed_identical_history(self):
        prep, mcfg, tcfg = _fit_setup(steps=25)
        h1 = fit([prep], mcfg, tcfg).history
        h2 = fit([prep], mcfg, tcfg).history
        np.testing.assert_array_equal(h1, h2)

    def test_checkpoint_resume_continues(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        prep, mcfg, half_cfg = _fit_setup(steps=20, checkpoint_every=10)
        first = fit([prep], mcfg, half_cfg, out_dir=str(out)).history

        _, _, tcfg = _fit_setup(steps=40, checkpoint_every=10)
        resumed = fit([prep], mcfg, tcfg, out_dir=str(out), resume=True).history
        assert resumed.shape == (40, 4)
        np.testing.assert_array_equal(resumed[:20], first)  # prior history kept
        assert np.isfinite(resumed).all()

    def test_resume_without_checkpoint_rejected(self, tmp_path):
        prep, mcfg, tcfg = _fit_setup(steps=5)
        with pytest.raises(ValidationError, match="checkpoint"):
            fit([prep], mcfg, tcfg, out_dir=str(tmp_path), resume=True)

    def test_eval_loss_helper(self):
        prep, mcfg, tcfg = _fit_setup(steps=30)
        result = fit([prep], mcfg, tcfg)
        val = evaluate_one_step_loss(result.params, mcfg, result.normalizer, [prep],
                                     tcfg.target_mode)
        assert np.isfinite(val) and val >= 0

    def test_history_csv(self, tmp_path):
        prep, mcfg, tcfg = _fit_setup(steps=5)
        result = fit([prep], mcfg, tcfg)
        path = tmp_path / "loss.csv"
        write_history_csv(str(path), result.history)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss,lr,grad_norm"
        assert len(lines) == 6


class TestCheckpointIO:
    def test_round_trip(self, tmp_path, tiny_prep, tiny_model_cfg, tiny_params):
        norm = Normalizer.fit([tiny_prep], "absolute")
        path = tmp_path / "ckpt.mgnt"
        save_checkpoint(str(path), tiny_params, tiny_model_cfg, norm, step=7,
                        extra_meta={"schema": "impact"})
        state = load_checkpoint(str(path))
        assert state["meta"]["step"] == 7
        assert state["meta"]["schema"] == "impact"
        assert state["model_config"] == tiny_model_cfg
        for name, tensor in tiny_params.items():
            np.testing.assert_array_equal(state["params"][name].data, tensor.data)
        # loaded params behave identically
        sample = tiny_prep.sample(0)
        normed = norm.normalize_sample(sample)
        y1, _ = forward(normed, tiny_params, tiny_model_cfg)
        y2, _ = forward(normed, state["params"], tiny_model_cfg)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_non_checkpoint_rejected(self, tmp_path):
        from mgnt.container import write_arrays
        from mgnt.errors import SchemaFormatError
        path = tmp_path / "x.mgnt"
        write_arrays(str(path), {"a": np.ones(3)}, meta={"format": "other"})
        with pytest.raises(SchemaFormatError):
            load_checkpoint(str(path))
