"""Shared fixtures: tiny trajectories, prepared graphs and small model configs."""

import numpy as np
import pytest

from mgnt.data import GraphConfig, feature_dims, get_schema, prepare_trajectory
from mgnt.model import ModelConfig, init_params
from mgnt.oracle import OracleConfig, simulate_impact


@pytest.fixture(scope="session")
def tiny_traj():
    return simulate_impact(OracleConfig(rows=3, cols=3, frames=6, substeps=10))


@pytest.fixture(scope="session")
def tiny_graph_cfg():
    return GraphConfig(n_frequencies=2)


@pytest.fixture(scope="session")
def tiny_prep(tiny_traj, tiny_graph_cfg):
    return prepare_trajectory(tiny_traj, get_schema("impact"), tiny_graph_cfg)


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_graph_cfg):
    dims = feature_dims(get_schema("impact"), tiny_graph_cfg)
    return ModelConfig(latent_dim=12, n_tokens=4, n_heads=2,
                       transformer_dims=(12, 8, 12), **dims)


@pytest.fixture()
def tiny_params(tiny_model_cfg):
    return init_params(tiny_model_cfg, seed=0)
