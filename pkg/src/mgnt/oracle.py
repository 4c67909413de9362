"""Ground-truth generators: an elastoplastic lattice impact and a driven chain.

The impact oracle integrates a 2-D mass-spring lattice (axial springs with
1-D return-mapping plasticity and linear isotropic hardening) falling onto a
rigid wall, with a one-sided linear penalty plus critical normal damping for
wall contact and semi-implicit Euler at a fine internal dt.  Hardening is
accumulated per spring and split evenly onto both endpoints, so per-node
hardening is non-decreasing by construction.

The chain benchmark produces a quasi-static 1-D elastic chain whose driven
end receives a random displacement increment each stored frame; the rest of
the chain follows through a global equilibrium solve, so the response at the
far end depends on the driven end's state within a single frame.  The
iterative relaxation is cross-checked against a dense direct solve.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import Trajectory, write_manifest
from .errors import NumericError, ValidationError
from .mesh import NODE_ACTUATOR, NODE_DEFORMABLE, NODE_OBSTACLE


# ---------------------------------------------------------------------------
# elastoplastic impact lattice

@dataclass(frozen=True)
class OracleConfig:
    rows: int = 8
    cols: int = 8
    spacing: float = 0.1
    mass: float = 1.0
    stiffness_base: float = 100000.0  # spring stiffness = kappa * stiffness_base
    kappa: float = 0.2
    yield_strain: float = 0.05
    hardening_ratio: float = 0.2      # H = hardening_ratio * spring stiffness
    damping: float = 1.2              # per-node viscous coefficient
    gravity: float = 9.81
    wall_y: float = 0.0
    wall_stiffness: float = 200000.0
    drop_height: float = 0.2
    initial_velocity: float = -1.0    # initial vertical velocity of the lattice
    dt: float = 2.5e-4
    substeps: int = 40
    frames: int = 50
    wall_margin_nodes: int = 4
    seed: int = 0


def return_map_1d(k: float, hardening: float, yield_force: float,
                  stretch: float, plastic: float, alpha: float
                  ) -> tuple[float, float, float]:
    """Scalar elastoplastic update for one spring.

    Given total stretch, prior plastic stretch and prior hardening, returns
    (force, new plastic stretch, new hardening).  The yield level grows
    linearly with hardening; excess trial force is returned to the (expanded)
    yield surface and the plastic increment is |trial excess| / (k + H).
    """
    trial = k * (stretch - plastic)
    excess = abs(trial) - (yield_force + hardening * alpha)
    if excess <= 0.0:
        return trial, plastic, alpha
    dgamma = excess / (k + hardening)
    plastic = plastic + dgamma * np.sign(trial)
    alpha = alpha + dgamma
    return k * (stretch - plastic), plastic, alpha


def _lattice(cfg: OracleConfig):
    """Node positions and spring list (axial + both diagonals) for the block,
    plus a row of static wall nodes below it."""
    a = cfg.spacing
    xs = np.arange(cfg.cols) * a
    ys = np.arange(cfg.rows) * a + cfg.wall_y + cfg.drop_height
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
    n_lat = lattice.shape[0]

    def nid(r, c):
        return r * cfg.cols + c

    springs = []
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            if c + 1 < cfg.cols:
                springs.append((nid(r, c), nid(r, c + 1)))
            if r + 1 < cfg.rows:
                springs.append((nid(r, c), nid(r + 1, c)))
            if c + 1 < cfg.cols and r + 1 < cfg.rows:
                springs.append((nid(r, c), nid(r + 1, c + 1)))
                springs.append((nid(r, c + 1), nid(r + 1, c)))

    m = cfg.wall_margin_nodes
    wall_x = (np.arange(cfg.cols + 2 * m) - m) * a
    wall = np.stack([wall_x, np.full_like(wall_x, cfg.wall_y)], axis=1)
    wall_elems = [(n_lat + i, n_lat + i + 1) for i in range(wall.shape[0] - 1)]

    X = np.concatenate([lattice, wall])
    elements = np.array(springs + wall_elems, dtype=np.int64)
    node_type = np.concatenate([
        np.full(n_lat, NODE_DEFORMABLE, dtype=np.int64),
        np.full(wall.shape[0], NODE_OBSTACLE, dtype=np.int64),
    ])
    component = np.concatenate([
        np.zeros(n_lat, dtype=np.int64), np.ones(wall.shape[0], dtype=np.int64)])
    return X, elements, node_type, component, n_lat, len(springs)


def simulate_impact(cfg: OracleConfig) -> Trajectory:
    """Integrate one drop-and-impact run and package it as a trajectory."""
    if cfg.drop_height < 0:
        raise ValidationError("lattice must start above the wall")
    X, elements, node_type, component, n_lat, n_springs = _lattice(cfg)
    n = X.shape[0]
    deform = node_type == NODE_DEFORMABLE

    k_spring = cfg.kappa * cfg.stiffness_base
    hardening = cfg.hardening_ratio * k_spring
    springs = elements[:n_springs]
    rest = np.sqrt(((X[springs[:, 0]] - X[springs[:, 1]]) ** 2).sum(-1))
    yield_force = k_spring * cfg.yield_strain * rest
    c_wall = 2.0 * np.sqrt(cfg.wall_stiffness * cfg.mass)

    x = X.copy()
    v = np.zeros_like(X)
    v[deform, 1] = cfg.initial_velocity
    plastic = np.zeros(n_springs)
    alpha_spring = np.zeros(n_springs)
    alpha_node = np.zeros(n)

    frames_x = np.empty((cfg.frames, n, 2))
    frames_v = np.empty((cfg.frames, n, 2))
    frames_a = np.empty((cfg.frames, n))
    frames_x[0], frames_v[0], frames_a[0] = x, v, alpha_node

    extent = max(cfg.cols, cfg.rows) * cfg.spacing
    bound = 100.0 * (extent + cfg.drop_height + 1.0)
    src, dst = springs[:, 0], springs[:, 1]

    for frame in range(1, cfg.frames):
        for _ in range(cfg.substeps):
            force = np.zeros_like(x)
            force[deform, 1] -= cfg.mass * cfg.gravity
            force[deform] -= cfg.damping * v[deform]

            delta = x[src] - x[dst]
            length = np.sqrt((delta * delta).sum(-1))
            direction = delta / length[:, None]
            stretch = length - rest
            trial = k_spring * (stretch - plastic)
            excess = np.abs(trial) - (yield_force + hardening * alpha_spring)
            yielding = excess > 0.0
            dgamma = np.where(yielding, excess / (k_spring + hardening), 0.0)
            plastic = plastic + dgamma * np.sign(trial)
            alpha_spring = alpha_spring + dgamma
            np.add.at(alpha_node, src, 0.5 * dgamma)
            np.add.at(alpha_node, dst, 0.5 * dgamma)
            f_spring = k_spring * (stretch - plastic)
            fvec = f_spring[:, None] * direction
            np.add.at(force, src, -fvec)
            np.add.at(force, dst, fvec)

            pen = cfg.wall_y - x[:, 1]
            contact = deform & (pen > 0.0)
            force[contact, 1] += cfg.wall_stiffness * pen[contact]
            force[contact, 1] -= c_wall * v[contact, 1]

            v[deform] += (cfg.dt / cfg.mass) * force[deform]
            x[deform] += cfg.dt * v[deform]

            if not np.isfinite(x).all() or np.abs(x - X).max() > bound:
                raise NumericError(
                    f"impact oracle unstable at frame {frame}: "
                    f"dt={cfg.dt}, spring stiffness={k_spring}")
        frames_x[frame], frames_v[frame], frames_a[frame] = x, v, alpha_node

    if (np.diff(frames_a, axis=0) < 0).any():
        raise NumericError("hardening decreased; oracle invariant violated")

    arrays = {
        "X": X,
        "x": frames_x,
        "v": frames_v,
        "alpha": frames_a,
        "kappa": np.array([cfg.kappa]),
        "node_type": node_type,
        "component_id": component,
        "elements": elements,
        "dt": np.array([cfg.dt * cfg.substeps]),
    }
    return Trajectory(arrays=arrays, meta={"schema": "impact", "config": asdict(cfg)})


def gen_dataset(n_train: int, n_test: int, base: OracleConfig, seed: int,
                out_dir: str, workers: int = 1) -> str:
    """Generate a train/test split with kappa drawn uniformly from (0.1, 0.3);
    per-trajectory seeds are disjoint.  Returns the manifest path."""
    if n_train < 1 or n_test < 1:
        raise ValidationError("need at least one trajectory per split")
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for i in range(n_train + n_test):
        rng = np.random.default_rng([int(seed), i])
        kappa = float(rng.uniform(0.1, 0.3))
        cfg = OracleConfig(**{**asdict(base), "kappa": kappa, "seed": int(seed) + i})
        split = "train" if i < n_train else "test"
        fname = f"traj_{split}_{i:03d}.mgnt"
        jobs.append((cfg, os.path.join(out_dir, fname), fname, split))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_one, jobs))
    else:
        results = [_gen_one(job) for job in jobs]

    train_files = [f for f, s in results if s == "train"]
    test_files = [f for f, s in results if s == "test"]
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, "impact", asdict(base) | {"seed": int(seed)},
                   train_files, test_files)
    return manifest


def _gen_one(job):
    cfg, path, fname, split = job
    simulate_impact(cfg).save(path)
    return fname, split


# ---------------------------------------------------------------------------
# long-range chain benchmark

@dataclass(frozen=True)
class ChainConfig:
    n_nodes: int = 400
    driven_nodes: int = 16           # rigid actuator segment at the chain head
    spacing: float = 1.0
    stiffness_base: float = 100.0    # chain stiffness = kappa * stiffness_base
    kappa: float = 0.2
    load: float = 0.5                # constant axial load per free node
    drive_std: float = 0.25          # std of the per-frame drive increment
    frames: int = 60
    relax_tol: float = 1e-10
    seed: int = 0


def solve_chain_dense(k: float, load: float, u0: float, n_nodes: int,
                      driven: int = 1) -> np.ndarray:
    """Direct equilibrium solve: the first ``driven`` nodes are prescribed at
    u0, the free remainder carries a constant axial load."""
    m = n_nodes - driven
    A = np.zeros((m, m))
    b = np.full(m, load)
    for i in range(m):
        A[i, i] = 2.0 * k if i < m - 1 else k
        if i > 0:
            A[i, i - 1] = -k
        if i + 1 < m:
            A[i, i + 1] = -k
    b[0] += k * u0
    u = np.linalg.solve(A, b)
    return np.concatenate([np.full(driven, u0), u])


def solve_chain_relaxation(k: float, load: float, u0: float, n_nodes: int,
                           driven: int = 1, tol: float = 1e-10,
                           max_iter: int = 200000) -> np.ndarray:
    """Conjugate-gradient relaxation of the same equilibrium system."""
    m = n_nodes - driven

    def matvec(u):
        out = np.empty(m)
        out[:] = 2.0 * k * u
        out[-1] = k * u[-1]
        out[:-1] -= k * u[1:]
        out[1:] -= k * u[:-1]
        return out

    b = np.full(m, load)
    b[0] += k * u0
    u = np.zeros(m)
    r = b - matvec(u)
    p = r.copy()
    rs = r @ r
    b_norm = np.sqrt(b @ b) or 1.0
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * b_norm:
            break
        Ap = matvec(p)
        alpha = rs / (p @ Ap)
        u += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        raise NumericError(
            f"chain relaxation did not reach tol={tol}; residual {np.sqrt(rs):.3e}")
    return np.concatenate([np.full(driven, u0), u])


def simulate_chain(cfg: ChainConfig) -> Trajectory:
    """One driven-chain run: random drive increments on a rigid head segment,
    global relaxation of the free remainder each frame."""
    if cfg.n_nodes < 100:
        raise ValidationError("chain length must be at least 100 nodes")
    if not 1 <= cfg.driven_nodes < cfg.n_nodes // 4:
        raise ValidationError("driven segment must be short relative to the chain")
    n = cfg.n_nodes
    X = np.stack([np.arange(n) * cfg.spacing, np.zeros(n)], axis=1)
    elements = np.array([(i, i + 1) for i in range(n - 1)], dtype=np.int64)
    node_type = np.full(n, NODE_DEFORMABLE, dtype=np.int64)
    node_type[:cfg.driven_nodes] = NODE_ACTUATOR
    component = np.zeros(n, dtype=np.int64)

    k = cfg.kappa * cfg.stiffness_base
    rng = np.random.default_rng([cfg.seed, 0xC4A1])
    increments = rng.normal(0.0, cfg.drive_std, size=cfg.frames)

    xs = np.empty((cfg.frames, n, 2))
    drive = np.zeros((cfg.frames, n))
    u0 = 0.0
    for t in range(cfg.frames):
        u = solve_chain_relaxation(k, cfg.load, u0, n, driven=cfg.driven_nodes,
                                   tol=cfg.relax_tol)
        xs[t] = X + np.stack([u, np.zeros(n)], axis=1)
        drive[t, :cfg.driven_nodes] = increments[t]
        u0 += increments[t]

    arrays = {
        "X": X,
        "x": xs,
        "drive": drive,
        "kappa": np.array([cfg.kappa]),
        "node_type": node_type,
        "component_id": component,
        "elements": elements,
        "dt": np.array([1.0]),
    }
    return Trajectory(arrays=arrays, meta={"schema": "chain", "config": asdict(cfg)})


def gen_chain_dataset(n_train: int, n_test: int, base: ChainConfig, seed: int,
                      out_dir: str) -> str:
    """Long-range benchmark split; kappa varies per trajectory like the impact set."""
    if n_train < 1 or n_test < 1:
        raise ValidationError("need at least one trajectory per split")
    os.makedirs(out_dir, exist_ok=True)
    train_files, test_files = [], []
    for i in range(n_train + n_test):
        rng = np.random.default_rng([int(seed), 7, i])
        kappa = float(rng.uniform(0.1, 0.3))
        cfg = ChainConfig(**{**asdict(base), "kappa": kappa, "seed": int(seed) + i})
        split = "train" if i < n_train else "test"
        fname = f"chain_{split}_{i:03d}.mgnt"
        simulate_chain(cfg).save(os.path.join(out_dir, fname))
        (train_files if split == "train" else test_files).append(fname)
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, "chain", asdict(base) | {"seed": int(seed)},
                   train_files, test_files)
    return manifest
