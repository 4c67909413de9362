"""Rollout mechanics, error metrics and consistency diagnostics."""

import numpy as np
import pytest

import mgnt.rollout as R
from mgnt.data import (GraphConfig, Trajectory, feature_dims, get_schema,
                       prepare_trajectory)
from mgnt.errors import RolloutAbort, ValidationError
from mgnt.model import ModelConfig, forward, init_params
from mgnt.oracle import OracleConfig, simulate_impact
from mgnt.rollout import (evaluate, export_attention, hardening_monotonicity,
                          kinetic_proxy, r_rmse, rmse_1, rmse_all, rollout)
from mgnt.tensor import Tensor
from mgnt.train import Normalizer


def _constant_trajectory(tiny_traj):
    """A trajectory whose state never changes (frame 0 repeated)."""
    a = tiny_traj.arrays
    frames = a["x"].shape[0]
    arrays = dict(a)
    arrays["x"] = np.repeat(a["x"][:1], frames, axis=0)
    arrays["v"] = np.zeros_like(a["v"])
    arrays["alpha"] = np.zeros_like(a["alpha"])
    return Trajectory(arrays=arrays, meta=tiny_traj.meta)


@pytest.fixture()
def fitted(tiny_prep, tiny_model_cfg, tiny_params):
    norm = Normalizer.fit([tiny_prep], "absolute")
    return tiny_prep, tiny_model_cfg, tiny_params, norm


class TestRollout:
    def test_horizon_one_equals_single_forward(self, fitted):
        prep, mcfg, params, norm = fitted
        result = rollout(params, mcfg, norm, prep, 1, "absolute")
        sample = norm.normalize_sample(prep.sample(0))
        pred, _ = forward(sample, params, mcfg, train_mode=False)
        state = norm.denormalize_targets(pred.data)
        deform = prep.deformable
        X = prep.graph.mesh.reference_positions
        np.testing.assert_allclose(result.frames[1]["x"][deform],
                                   X[deform] + state[deform, :2], atol=1e-12)
        np.testing.assert_allclose(result.frames[1]["v"][deform],
                                   state[deform, 2:4], atol=1e-12)

    def test_identity_model_freezes_constant_trajectory(self, tiny_traj,
                                                        tiny_graph_cfg, tiny_model_cfg,
                                                        monkeypatch):
        traj = _constant_trajectory(tiny_traj)
        prep = prepare_trajectory(traj, get_schema("impact"), tiny_graph_cfg)
        norm = Normalizer.fit([prep], "absolute")
        X = prep.graph.mesh.reference_positions

        def identity_forward(sample, params, cfg, **kwargs):
            # return the normalized current state, so denormalization yields it
            state = prep.schema.state_vector(prep.frame(0), X)
            return Tensor(norm.normalize_targets(state)), {"slice_weights": []}

        monkeypatch.setattr(R, "forward", identity_forward)
        result = rollout({}, tiny_model_cfg, norm, prep, 4, "absolute")
        for frame in result.frames[1:]:
            np.testing.assert_allclose(frame["x"], prep.frame(0)["x"], atol=1e-9)

    def test_boundary_nodes_follow_ground_truth_bitwise(self, fitted):
        prep, mcfg, params, norm = fitted
        result = rollout(params, mcfg, norm, prep, prep.n_transitions, "absolute")
        rigid = ~prep.deformable
        for t, frame in enumerate(result.frames):
            np.testing.assert_array_equal(frame["x"][rigid],
                                          prep.traj.arrays["x"][t][rigid])

    def test_horizon_validation(self, fitted):
        prep, mcfg, params, norm = fitted
        with pytest.raises(ValidationError, match="horizon"):
            rollout(params, mcfg, norm, prep, 0, "absolute")
        with pytest.raises(ValidationError, match="exceeds stored ground truth"):
            rollout(params, mcfg, norm, prep, prep.n_transitions + 1, "absolute")

    def test_nonfinite_prediction_aborts_with_step(self, fitted, monkeypatch):
        prep, mcfg, params, norm = fitted

        def nan_forward(sample, params, cfg, **kwargs):
            out = np.full((sample.n_nodes, cfg.output_dim), np.nan)
            return Tensor(out), {"slice_weights": []}

        monkeypatch.setattr(R, "forward", nan_forward)
        with pytest.raises(RolloutAbort, match="step 0"):
            rollout(params, mcfg, norm, prep, 2, "absolute")

    def test_contact_counts_recorded(self, fitted):
        prep, mcfg, params, norm = fitted
        result = rollout(params, mcfg, norm, prep, 3, "absolute")
        assert result.contact_counts.shape == (3,)
        assert (result.contact_counts >= 0).all()

    def test_collected_weights_per_step(self, fitted):
        prep, mcfg, params, norm = fitted
        result = rollout(params, mcfg, norm, prep, 2, "absolute",
                         collect_weights=True)
        assert len(result.slice_weights) == 2
        assert len(result.slice_weights[0]) == mcfg.n_transformer_blocks


class TestRmseAll:
    def test_zero_for_identical(self, tiny_traj):
        schema = get_schema("impact")
        arrays = dict(tiny_traj.arrays)
        out = rmse_all([arrays], [arrays], schema)
        for entry in out.values():
            assert entry["mean"] == 0.0

    def test_constant_offset_gives_offset(self, tiny_traj):
        schema = get_schema("impact")
        gt = dict(tiny_traj.arrays)
        pred = dict(gt)
        pred["x"] = gt["x"] + 0.125
        out = rmse_all([pred], [gt], schema)
        assert out["u"]["mean"] == pytest.approx(0.125)

    def test_hand_computed_toy(self):
        schema = get_schema("impact")
        X = np.zeros((2, 2))
        base = dict(X=X, v=np.zeros((3, 2, 2)), alpha=np.zeros((3, 2)))
        gt = dict(base, x=np.zeros((3, 2, 2)))
        pred = dict(base, x=np.zeros((3, 2, 2)))
        # step 1: node 0 off by (3,4); step 2: node 1 off by (0,2); frame 0 ignored
        pred["x"] = pred["x"].copy()
        pred["x"][1, 0] = [3.0, 4.0]
        pred["x"][2, 1] = [0.0, 2.0]
        out = rmse_all([pred], [gt], schema)
        expected = np.sqrt((9 + 16 + 4) / 8.0)  # 2 steps x 2 nodes x 2 comps
        assert out["u"]["mean"] == pytest.approx(expected)

    def test_symmetry(self, tiny_traj):
        schema = get_schema("impact")
        gt = dict(tiny_traj.arrays)
        pred = dict(gt)
        pred["x"] = gt["x"] + np.random.default_rng(0).standard_normal(gt["x"].shape)
        a = rmse_all([pred], [gt], schema)["u"]["mean"]
        b = rmse_all([gt], [pred], schema)["u"]["mean"]
        assert a == pytest.approx(b)

    def test_standard_error_present_with_two_trajectories(self, tiny_traj):
        schema = get_schema("impact")
        gt = dict(tiny_traj.arrays)
        pred = dict(gt)
        pred["x"] = gt["x"] + 0.1
        out = rmse_all([pred, gt], [gt, gt], schema)
        assert "se" in out["u"]

    def test_shape_mismatch_rejected(self, tiny_traj):
        schema = get_schema("impact")
        gt = dict(tiny_traj.arrays)
        pred = dict(gt)
        pred["x"] = gt["x"][:, :4]
        pred["X"] = gt["X"][:4]
        pred["v"] = gt["v"][:, :4]
        pred["alpha"] = gt["alpha"][:, :4]
        with pytest.raises(ValidationError):
            rmse_all([pred], [gt], schema)


class TestRmse1:
    def test_perfect_model_zero(self, tiny_traj, tiny_graph_cfg, tiny_model_cfg,
                                monkeypatch):
        traj = _constant_trajectory(tiny_traj)
        prep = prepare_trajectory(traj, get_schema("impact"), tiny_graph_cfg)
        norm = Normalizer.fit([prep], "absolute")
        X = prep.graph.mesh.reference_positions

        def identity_forward(sample, params, cfg, **kwargs):
            state = prep.schema.state_vector(prep.frame(0), X)
            return Tensor(norm.normalize_targets(state)), {"slice_weights": []}

        monkeypatch.setattr(R, "forward", identity_forward)
        out = rmse_1({}, tiny_model_cfg, norm, [prep], "absolute")
        for entry in out.values():
            assert entry["mean"] == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self, fitted):
        prep, mcfg, params, norm = fitted
        a = rmse_1(params, mcfg, norm, [prep], "absolute")
        b = rmse_1(params, mcfg, norm, [prep], "absolute")
        assert a == b


class TestRRmse:
    def test_zero_for_identical(self, tiny_traj):
        schema = get_schema("impact")
        arrays = dict(tiny_traj.arrays)
        out = r_rmse([arrays], [arrays], schema)
        assert out["u"]["mean"] == 0.0

    def test_joint_rescaling_invariance(self, tiny_traj):
        schema = get_schema("impact")
        gt = dict(tiny_traj.arrays)
        pred = dict(gt)
        pred["x"] = gt["x"] + np.random.default_rng(1).standard_normal(gt["x"].shape) * 0.01
        base = r_rmse([pred], [gt], schema)["u"]["mean"]
        gt10 = {k: (np.asarray(v) * 10.0 if k in ("X", "x", "v", "alpha") else v)
                for k, v in gt.items()}
        pred10 = {k: (np.asarray(v) * 10.0 if k in ("X", "x", "v", "alpha") else v)
                  for k, v in pred.items()}
        scaled = r_rmse([pred10], [gt10], schema)["u"]["mean"]
        assert scaled == pytest.approx(base, rel=1e-9)

    def test_hand_computed_percentage(self):
        schema = get_schema("impact")
        X = np.zeros((1, 2))
        gt = dict(X=X, x=np.array([[[0.0, 0]], [[0, 4.0]]]),
                  v=np.zeros((2, 1, 2)), alpha=np.zeros((2, 1)))
        pred = dict(gt)
        pred["x"] = gt["x"].copy()
        pred["x"][1, 0] = [0.0, 5.0]   # error 1 on one step; inf norm of u is 4
        out = r_rmse([pred], [gt], schema)
        expected = 100.0 * np.sqrt(1.0 / 2.0) / 4.0
        assert out["u"]["mean"] == pytest.approx(expected)

    def test_zero_norm_flagged_undefined(self):
        schema = get_schema("impact")
        X = np.zeros((1, 2))
        gt = dict(X=X, x=np.zeros((2, 1, 2)), v=np.zeros((2, 1, 2)),
                  alpha=np.zeros((2, 1)))
        pred = dict(gt)
        out = r_rmse([pred], [gt], schema)
        assert out["u"]["undefined_trajectories"] == 1
        assert "mean" not in out["u"]


class TestConsistency:
    def test_constant_alpha_no_violations(self):
        sums, violations = hardening_monotonicity(np.ones((10, 5)))
        assert violations == 0
        np.testing.assert_allclose(sums, 5.0)

    def test_oracle_ground_truth_no_violations(self, tiny_traj):
        _, violations = hardening_monotonicity(tiny_traj.arrays["alpha"])
        assert violations == 0

    def test_injected_dip_counts_once(self):
        alpha = np.ones((6, 3))
        alpha[3] = 0.5
        alpha[4:] = 1.2
        _, violations = hardening_monotonicity(alpha)
        assert violations == 1

    def test_kinetic_zero_velocities(self):
        out = kinetic_proxy(np.zeros((4, 6, 2)))
        np.testing.assert_array_equal(out["sum_v2"], 0.0)
        np.testing.assert_array_equal(out["sum_vnorm"], 0.0)

    def test_kinetic_increases_during_free_fall(self):
        cfg = OracleConfig(rows=3, cols=3, frames=6, substeps=5, drop_height=10.0,
                           damping=0.0)
        traj = simulate_impact(cfg)
        proxy = kinetic_proxy(traj.arrays["v"])["sum_v2"]
        assert (np.diff(proxy) > 0).all()

    def test_kinetic_post_impact_trend_decreasing(self):
        traj = simulate_impact(OracleConfig(rows=4, cols=4))
        proxy = kinetic_proxy(traj.arrays["v"])["sum_v2"]
        tail = proxy[-12:]
        assert tail[6:].mean() <= tail[:6].mean()


class TestAttentionExport:
    def test_weight_rows_normalized_nonnegative(self, fitted):
        prep, mcfg, params, norm = fitted
        positions, weights = export_attention(params, mcfg, norm, prep, 2, 1)
        assert positions.shape == (prep.traj.n_nodes, 2)
        assert weights.shape == (prep.traj.n_nodes, mcfg.n_tokens)
        assert (weights >= 0).all()
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)

    def test_block_out_of_range(self, fitted):
        prep, mcfg, params, norm = fitted
        with pytest.raises(ValidationError, match="block"):
            export_attention(params, mcfg, norm, prep, 0, mcfg.n_transformer_blocks)


def test_evaluate_report_structure(fitted):
    prep, mcfg, params, norm = fitted
    report = evaluate(params, mcfg, norm, [prep], "absolute", horizon=3)
    assert set(report["rmse_all"]) == {"u", "v", "alpha"}
    assert report["n_trajectories"] == 1
    entry = report["consistency"][0]
    assert entry["hardening_violations_gt"] == 0
    assert len(entry["contact_counts"]) == 3
