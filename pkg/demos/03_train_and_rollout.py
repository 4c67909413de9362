#!/usr/bin/env python3
"""Train a small model on a few trajectories, then roll it out against held-out
ground truth and print the error metrics.  Takes a few minutes on a laptop."""

import tempfile

from mgnt.data import GraphConfig, feature_dims, load_split, prepare_trajectory
from mgnt.model import ModelConfig, param_count
from mgnt.oracle import OracleConfig, gen_dataset
from mgnt.rollout import evaluate
from mgnt.train import TrainConfig, fit

data_dir = tempfile.mkdtemp(prefix="mgnt_demo_")
manifest = gen_dataset(4, 2, OracleConfig(), seed=11, out_dir=data_dir)
schema, split, _ = load_split(manifest)

gcfg = GraphConfig()
train_preps = [prepare_trajectory(t, schema, gcfg) for t in split["train"]]
test_preps = [prepare_trajectory(t, schema, gcfg) for t in split["test"]]

mcfg = ModelConfig(latent_dim=48, n_tokens=16, n_heads=4,
                   transformer_dims=(32, 16, 32), **feature_dims(schema, gcfg))
print(f"model parameters: {param_count(mcfg):,}")

tcfg = TrainConfig(steps=1200, batch_size=4, lr=3e-3, lr_min=1e-4, seed=3)
result = fit(train_preps, mcfg, tcfg, progress=True)

report = evaluate(result.params, mcfg, result.normalizer, test_preps,
                  tcfg.target_mode)
for name, entry in report["rmse_all"].items():
    print(f"rmse_all[{name}]  = {entry['mean']:.5f}")
for name, entry in report["r_rmse"].items():
    print(f"r_rmse[{name}]    = {entry['mean']:.2f}%")
for name, entry in report["rmse_1"].items():
    print(f"rmse_1[{name}]    = {entry['mean']:.5f}")
for i, entry in enumerate(report["consistency"]):
    print(f"trajectory {i}: hardening violations pred={entry['hardening_violations_pred']} "
          f"gt={entry['hardening_violations_gt']}, "
          f"contact edges peak={max(entry['contact_counts'])}")
