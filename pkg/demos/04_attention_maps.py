#!/usr/bin/env python3
"""Export slice-weight maps: which nodes feed each latent token.

Trains briefly on one trajectory, then writes one scalar field per token at
an impact frame.  Rows of the weight matrix sum to one, so each node
distributes itself across tokens; reading a column shows a token's support."""

import numpy as np

from mgnt.container import write_arrays
from mgnt.data import GraphConfig, feature_dims, get_schema, prepare_trajectory
from mgnt.model import ModelConfig
from mgnt.oracle import OracleConfig, simulate_impact
from mgnt.rollout import export_attention
from mgnt.train import TrainConfig, fit

gcfg = GraphConfig()
schema = get_schema("impact")
prep = prepare_trajectory(simulate_impact(OracleConfig()), schema, gcfg)
mcfg = ModelConfig(latent_dim=32, n_tokens=8, n_heads=4,
                   transformer_dims=(32, 16, 32), **feature_dims(schema, gcfg))
result = fit([prep], mcfg, TrainConfig(steps=400, batch_size=4, lr=3e-3,
                                       lr_min=3e-4, seed=5), progress=True)

impact_frame = 20
for block in range(mcfg.n_transformer_blocks):
    positions, weights = export_attention(result.params, mcfg, result.normalizer,
                                          prep, impact_frame, block)
    assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-9)
    out = f"attention_block{block}.mgnt"
    write_arrays(out, {"positions": positions, "weights": weights},
                 meta={"frame": impact_frame, "block": block})
    dominant = weights.mean(axis=0)
    print(f"block {block}: wrote {out}; mean token occupancy {np.round(dominant, 3)}")
