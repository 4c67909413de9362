"""Trajectory storage, dataset schemas and graph-sample assembly.

A trajectory is a bag of named arrays in the binary container format plus a
small meta block.  A schema knows how to turn one stored frame into model
inputs (node features), how to extract supervision targets for the following
frame, and how to push a prediction back into simulation state during
rollout.  Two schemas ship with the package:

* ``impact``  - 2-D elastoplastic lattice hitting a rigid wall.  Inputs per
  node: velocity, hardening, stiffness scale, type one-hot.  Targets:
  next-step displacement, velocity and hardening.
* ``chain``   - long 1-D elastic chain driven at one end, used for the
  long-range benchmark.  Inputs: drive increment (actuator node only),
  stiffness scale, type one-hot.  Targets: next-step displacement change.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .container import meta_to_json, read_arrays, write_arrays
from .errors import ValidationError
from .mesh import (NODE_DEFORMABLE, FrameState, GraphSample, Mesh, MeshGraph,
                   build_graph_sample, contact_edge_features, mesh_edge_features,
                   one_hot_types, prepare_mesh)

N_TYPES = 4


@dataclass
class Trajectory:
    """Named arrays for one simulated run plus provenance meta."""

    arrays: dict[str, np.ndarray]
    meta: dict

    @property
    def n_frames(self) -> int:
        return self.arrays["x"].shape[0]

    @property
    def n_nodes(self) -> int:
        return self.arrays["X"].shape[0]

    def save(self, path: str) -> None:
        write_arrays(path, self.arrays, meta=meta_to_json(self.meta))

    @classmethod
    def load(cls, path: str) -> "Trajectory":
        arrays, meta = read_arrays(path)
        return cls(arrays=arrays, meta=meta)


@dataclass(frozen=True)
class GraphConfig:
    """Graph construction knobs shared by training, eval and rollout."""

    tied_k: int = 3
    tied_cutoff_factor: float = 3.0
    contact_radius: float | None = None     # None: contact_radius_factor x median edge
    contact_radius_factor: float = 1.5
    n_frequencies: int = 8
    use_contact: bool = True


class ImpactSchema:
    """Pi-beam style state: u, v, alpha, kappa in; u, v, alpha out.

    The displacement u = x - X enters the features in reference-relative form,
    so it stays invariant under joint translation of reference and current
    positions while making absolute next-step targets well conditioned.
    """

    name = "impact"
    dim = 2
    output_dim = 5
    variable_groups = {"u": (0, 2), "v": (2, 4), "alpha": (4, 5)}

    def node_feature_dim(self) -> int:
        return 2 + 2 + 1 + 1 + N_TYPES

    def build_mesh(self, traj: Trajectory) -> Mesh:
        a = traj.arrays
        return Mesh(a["X"], a["elements"], a["node_type"], a["component_id"])

    def frame(self, traj: Trajectory, t: int) -> dict[str, np.ndarray]:
        a = traj.arrays
        n = traj.n_nodes
        return {
            "X": a["X"].copy(),
            "x": a["x"][t].copy(),
            "v": a["v"][t].copy(),
            "alpha": a["alpha"][t].copy(),
            "kappa": np.full(n, float(a["kappa"][0])),
        }

    def node_features(self, frame: dict, node_type: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [frame["x"] - frame["X"], frame["v"], frame["alpha"][:, None],
             frame["kappa"][:, None], one_hot_types(node_type)], axis=1)

    def state_vector(self, frame: dict, X: np.ndarray) -> np.ndarray:
        """Current state in target layout (u, v, alpha)."""
        return np.concatenate(
            [frame["x"] - X, frame["v"], frame["alpha"][:, None]], axis=1)

    def targets(self, traj: Trajectory, t: int, target_mode: str) -> np.ndarray:
        a = traj.arrays
        nxt = np.concatenate(
            [a["x"][t + 1] - a["X"], a["v"][t + 1], a["alpha"][t + 1][:, None]], axis=1)
        if target_mode == "delta":
            cur = np.concatenate(
                [a["x"][t] - a["X"], a["v"][t], a["alpha"][t][:, None]], axis=1)
            return nxt - cur
        return nxt

    def advance(self, frame: dict, pred: np.ndarray, X: np.ndarray,
                boundary: dict, deformable: np.ndarray, target_mode: str) -> dict:
        """Next frame: deformable rows from the prediction, the rest from the
        boundary driver (prescribed kinematics)."""
        state = pred if target_mode != "delta" else self.state_vector(frame, X) + pred
        nxt = {k: v.copy() for k, v in boundary.items()}
        nxt["x"][deformable] = X[deformable] + state[deformable, 0:2]
        nxt["v"][deformable] = state[deformable, 2:4]
        nxt["alpha"][deformable] = state[deformable, 4]
        return nxt

    def inject_noise(self, frame: dict, scale: float, stds: dict, rng,
                     deformable: np.ndarray) -> dict:
        """Gaussian noise on the dynamic state of deformable nodes; positions
        are perturbed too so recomputed edge features see the noise."""
        if scale == 0.0:
            return frame
        out = {k: v.copy() for k, v in frame.items()}
        n_def = int(deformable.sum())
        out["x"][deformable] += rng.normal(size=(n_def, 2)) * (scale * stds["u"])
        out["v"][deformable] += rng.normal(size=(n_def, 2)) * (scale * stds["v"])
        alpha = out["alpha"][deformable] + rng.normal(size=n_def) * (scale * stds["alpha"])
        out["alpha"][deformable] = np.maximum(alpha, 0.0)  # hardening stays nonnegative
        return out

    def noise_stds(self, normalizer) -> dict:
        nf = normalizer.node_std
        return {"u": nf[0:2], "v": nf[2:4], "alpha": float(nf[4])}

    def metric_series(self, traj_arrays: dict) -> dict[str, np.ndarray]:
        """Per-variable [T, N, k] series used by the error metrics."""
        u = traj_arrays["x"] - traj_arrays["X"][None]
        return {"u": u, "v": traj_arrays["v"], "alpha": traj_arrays["alpha"][..., None]}


class ChainSchema:
    """Driven elastic chain: drive increment and kappa in, displacement delta out."""

    name = "chain"
    dim = 2
    output_dim = 1
    variable_groups = {"u": (0, 1)}

    def node_feature_dim(self) -> int:
        return 1 + 1 + N_TYPES

    def build_mesh(self, traj: Trajectory) -> Mesh:
        a = traj.arrays
        return Mesh(a["X"], a["elements"], a["node_type"], a["component_id"])

    def frame(self, traj: Trajectory, t: int) -> dict[str, np.ndarray]:
        a = traj.arrays
        n = traj.n_nodes
        return {
            "x": a["x"][t].copy(),
            "drive": a["drive"][t].copy(),
            "kappa": np.full(n, float(a["kappa"][0])),
        }

    def node_features(self, frame: dict, node_type: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [frame["drive"][:, None], frame["kappa"][:, None], one_hot_types(node_type)],
            axis=1)

    def state_vector(self, frame: dict, X: np.ndarray) -> np.ndarray:
        return (frame["x"][:, 0] - X[:, 0])[:, None]

    def targets(self, traj: Trajectory, t: int, target_mode: str) -> np.ndarray:
        a = traj.arrays
        nxt = (a["x"][t + 1, :, 0] - a["X"][:, 0])[:, None]
        if target_mode == "delta":
            return nxt - (a["x"][t, :, 0] - a["X"][:, 0])[:, None]
        return nxt

    def advance(self, frame: dict, pred: np.ndarray, X: np.ndarray,
                boundary: dict, deformable: np.ndarray, target_mode: str) -> dict:
        u = pred if target_mode != "delta" else self.state_vector(frame, X) + pred
        nxt = {k: v.copy() for k, v in boundary.items()}
        nxt["x"][deformable, 0] = X[deformable, 0] + u[deformable, 0]
        return nxt

    def inject_noise(self, frame: dict, scale: float, stds: dict, rng,
                     deformable: np.ndarray) -> dict:
        if scale == 0.0:
            return frame
        out = {k: v.copy() for k, v in frame.items()}
        n_def = int(deformable.sum())
        out["x"][deformable, 0] += rng.normal(size=n_def) * (scale * stds["u"])
        return out

    def noise_stds(self, normalizer) -> dict:
        return {"u": float(normalizer.target_std[0])}

    def metric_series(self, traj_arrays: dict) -> dict[str, np.ndarray]:
        u = traj_arrays["x"][:, :, 0:1] - traj_arrays["X"][None, :, 0:1]
        return {"u": u}


SCHEMAS = {"impact": ImpactSchema(), "chain": ChainSchema()}


def get_schema(name: str):
    if name not in SCHEMAS:
        raise ValidationError(f"unknown dataset schema {name!r}")
    return SCHEMAS[name]


@dataclass
class PreparedTrajectory:
    """Trajectory plus its once-built static graph structure."""

    traj: Trajectory
    schema: object
    graph: MeshGraph
    graph_cfg: GraphConfig

    @property
    def n_transitions(self) -> int:
        return self.traj.n_frames - 1

    @property
    def deformable(self) -> np.ndarray:
        return self.graph.mesh.node_type == NODE_DEFORMABLE

    def frame(self, t: int) -> dict[str, np.ndarray]:
        return self.schema.frame(self.traj, t)

    def sample_from_frame(self, frame: dict) -> GraphSample:
        features = self.schema.node_features(frame, self.graph.mesh.node_type)
        state = FrameState(positions=frame["x"], state=frame)
        if self.graph_cfg.use_contact:
            return build_graph_sample(self.graph, state, features)
        x_t = frame["x"]
        return GraphSample(
            node_features=features,
            mesh_edges=self.graph.mesh_edges,
            mesh_edge_features=mesh_edge_features(
                self.graph.mesh.reference_positions, x_t, self.graph.mesh_edges),
            contact_edges=np.zeros((0, 2), dtype=np.int64),
            contact_edge_features=np.zeros((0, self.graph.mesh.dim + 1)),
            positional_encoding=self.graph.positional,
            node_type=self.graph.mesh.node_type,
        )

    def sample(self, t: int) -> GraphSample:
        if not 0 <= t < self.traj.n_frames:
            raise ValidationError(f"frame index {t} out of range")
        return self.sample_from_frame(self.frame(t))

    def target(self, t: int, target_mode: str) -> np.ndarray:
        if t >= self.n_transitions:
            raise ValidationError(
                f"step index {t} has no successor frame; last valid index is "
                f"{self.n_transitions - 1}")
        return self.schema.targets(self.traj, t, target_mode)


def prepare_trajectory(traj: Trajectory, schema, graph_cfg: GraphConfig) -> PreparedTrajectory:
    mesh = schema.build_mesh(traj)
    graph = prepare_mesh(
        mesh,
        tied_k=graph_cfg.tied_k,
        tied_cutoff_factor=graph_cfg.tied_cutoff_factor,
        contact_radius=graph_cfg.contact_radius,
        contact_radius_factor=graph_cfg.contact_radius_factor,
        n_frequencies=graph_cfg.n_frequencies,
    )
    return PreparedTrajectory(traj=traj, schema=schema, graph=graph, graph_cfg=graph_cfg)


def feature_dims(schema, graph_cfg: GraphConfig) -> dict[str, int]:
    """Model input/output dimensions implied by a schema and graph config."""
    d = schema.dim
    return {
        "node_feat_dim": schema.node_feature_dim(),
        "mesh_edge_feat_dim": 2 * (d + 1),
        "contact_edge_feat_dim": d + 1,
        "pe_dim": 2 * d * graph_cfg.n_frequencies,
        "output_dim": schema.output_dim,
    }


# ---------------------------------------------------------------------------
# dataset manifests

def write_manifest(path: str, schema_name: str, config: dict,
                   train_files: list[str], test_files: list[str]) -> None:
    doc = {
        "schema": schema_name,
        "config": meta_to_json(config),
        "train": train_files,
        "test": test_files,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=False)
        f.write("\n")


def load_manifest(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def load_split(manifest_path: str) -> tuple[object, dict[str, list[Trajectory]], dict]:
    """Load every trajectory referenced by a manifest, keyed by split."""
    doc = load_manifest(manifest_path)
    schema = get_schema(doc["schema"])
    base = os.path.dirname(os.path.abspath(manifest_path))
    split: dict[str, list[Trajectory]] = {}
    for key in ("train", "test"):
        split[key] = [Trajectory.load(os.path.join(base, rel)) for rel in doc.get(key, [])]
    return schema, split, doc.get("config", {})
