"""Teacher-forced one-step training.

Batches are snapshots of a single trajectory merged into one disjoint-union
graph (the token-attention stage still treats each snapshot separately).
Inputs and targets are whitened with statistics accumulated in one streaming
pass over the training split; the loss is the batch mean of the per-sample
mean squared residual over deformable nodes only.  The optimizer is Adam
with an exponential learning-rate decay.  Every random draw comes from a
generator seeded by (run seed, step), so runs are reproducible and a resumed
run continues bit-for-bit.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .container import read_arrays, write_arrays
from .data import PreparedTrajectory
from .errors import (BatchContractError, ConfigError, SchemaFormatError,
                     TrainingAbort, ValidationError)
from .mesh import NODE_DEFORMABLE, GraphSample, merge_samples
from .model import ModelConfig, forward, init_params
from .tensor import Tape, Tensor

CHECKPOINT_FORMAT = "mgnt-checkpoint"
CHECKPOINT_VERSION = 1

_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4           # unreported upstream; MGN-lineage default
    lr_min: float = 1e-6
    noise_scale: float = 0.003  # input noise, in units of feature std
    seed: int = 0
    target_mode: str = "absolute"   # "delta" retrains on state increments
    checkpoint_every: int = 500
    log_every: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("noise scale must be >= 0")
        if self.target_mode not in ("absolute", "delta"):
            raise ConfigError(f"unknown target mode {self.target_mode!r}")


@dataclass
class Normalizer:
    """Per-feature whitening statistics for inputs and targets."""

    node_mean: np.ndarray
    node_std: np.ndarray
    mesh_mean: np.ndarray
    mesh_std: np.ndarray
    contact_mean: np.ndarray
    contact_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def fit(cls, trajs: list[PreparedTrajectory], target_mode: str) -> "Normalizer":
        """Single streaming pass over every frame of the training split."""
        sums: dict[str, list] = {}

        def push(key, mat):
            if mat.shape[0] == 0:
                return
            if key not in sums:
                sums[key] = [np.zeros(mat.shape[1]), np.zeros(mat.shape[1]), 0]
            s = sums[key]
            s[0] += mat.sum(axis=0)
            s[1] += (mat * mat).sum(axis=0)
            s[2] += mat.shape[0]

        for prep in trajs:
            for t in range(prep.traj.n_frames):
                sample = prep.sample(t)
                push("node", sample.node_features)
                push("mesh", sample.mesh_edge_features)
                push("contact", sample.contact_edge_features)
                if t < prep.n_transitions:
                    push("target", prep.target(t, target_mode))

        def stats(key, dim):
            if key not in sums:
                return np.zeros(dim), np.ones(dim)
            s, sq, n = sums[key]
            mean = s / n
            var = np.maximum(sq / n - mean * mean, 0.0)
            return mean, np.maximum(np.sqrt(var), _STD_FLOOR)

        first = trajs[0].sample(0)
        target_dim = trajs[0].schema.output_dim
        node_mean, node_std = stats("node", first.node_features.shape[1])
        mesh_mean, mesh_std = stats("mesh", first.mesh_edge_features.shape[1])
        contact_mean, contact_std = stats("contact", first.contact_edge_features.shape[1]
                                          if first.contact_edge_features.size
                                          else trajs[0].graph.mesh.dim + 1)
        target_mean, target_std = stats("target", target_dim)
        return cls(node_mean, node_std, mesh_mean, mesh_std,
                   contact_mean, contact_std, target_mean, target_std)

    def normalize_sample(self, sample: GraphSample) -> GraphSample:
        from .mesh import normalize_sample_features
        return normalize_sample_features(
            sample, self.node_mean, self.node_std, self.mesh_mean, self.mesh_std,
            self.contact_mean, self.contact_std)

    def normalize_targets(self, y: np.ndarray) -> np.ndarray:
        return (y - self.target_mean) / self.target_std

    def denormalize_targets(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_std + self.target_mean

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"norm.{k}": np.asarray(v) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Normalizer":
        fields = {k.split(".", 1)[1]: arrays[k] for k in arrays if k.startswith("norm.")}
        return cls(**fields)


def compute_loss(pred: Tensor, target: np.ndarray, deformable: np.ndarray,
                 sample_ranges: tuple[tuple[int, int], ...]) -> Tensor:
    """Mean over samples of the per-sample masked mean squared residual norm."""
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, Tensor(target))
    sq = T.mul(diff, diff)
    n_samples = len(sample_ranges)
    acc = None
    for start, stop in sample_ranges:
        idx = start + np.where(deformable[start:stop])[0]
        if idx.size == 0:
            raise ConfigError("loss mask selects no deformable nodes")
        term = T.scale(T.sum_all(T.gather_rows(sq, idx)), 1.0 / (n_samples * idx.size))
        acc = term if acc is None else T.add(acc, term)
    return acc


def make_batch(prep: PreparedTrajectory, step_indices, target_mode: str,
               normalizer: Normalizer | None = None, noise_scale: float = 0.0,
               rng: np.random.Generator | None = None
               ) -> tuple[GraphSample, np.ndarray, np.ndarray]:
    """Merged sample + stacked targets + deformable mask for one batch.

    Inputs come from ground-truth frames (teacher forcing), optionally
    perturbed with input noise; targets always come from the clean successor
    frame.  All snapshots share the trajectory's mesh.
    """
    last = prep.n_transitions - 1
    for t in step_indices:
        if not 0 <= t <= last:
            raise ValidationError(
                f"step index {t} out of range; last valid index is {last}")
    if noise_scale > 0.0 and (normalizer is None or rng is None):
        raise ValidationError("input noise needs a fitted normalizer and an rng")
    samples, targets = [], []
    deform = prep.deformable
    stds = prep.schema.noise_stds(normalizer) if noise_scale > 0.0 else None
    for t in step_indices:
        frame = prep.frame(t)
        if noise_scale > 0.0:
            frame = prep.schema.inject_noise(frame, noise_scale, stds, rng, deform)
        samples.append(prep.sample_from_frame(frame))
        targets.append(prep.target(t, target_mode))
    merged = merge_samples(samples)
    mask = np.concatenate([deform] * len(step_indices))
    return merged, np.concatenate(targets), mask


def make_batch_from_pairs(preps: list[PreparedTrajectory], pairs, target_mode: str,
                          **kwargs):
    """Batch assembly from (trajectory index, step) pairs; snapshots must all
    come from one trajectory."""
    traj_ids = {int(i) for i, _ in pairs}
    if len(traj_ids) != 1:
        raise BatchContractError(
            f"batch mixes trajectories {sorted(traj_ids)}; snapshots must share one")
    (tid,) = traj_ids
    return make_batch(preps[tid], [t for _, t in pairs], target_mode, **kwargs)


def _step_rng(seed: int, step: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0x5EED, int(step), int(salt)])


@dataclass
class FitResult:
    params: dict[str, Tensor]
    normalizer: Normalizer
    history: np.ndarray   # columns: step, loss, lr, grad_norm
    model_config: ModelConfig


def fit(trajs: list[PreparedTrajectory], model_cfg: ModelConfig, train_cfg: TrainConfig,
        out_dir: str | None = None, resume: bool = False,
        progress: bool = False, extra_meta: dict | None = None) -> FitResult:
    """Run the optimizer loop; optionally checkpoint into out_dir."""
    if not trajs:
        raise ValidationError("need at least one training trajectory")
    normalizer = Normalizer.fit(trajs, train_cfg.target_mode)
    params = init_params(model_cfg, train_cfg.seed)
    names = list(params)
    adam_m = {k: np.zeros(params[k].shape) for k in names}
    adam_v = {k: np.zeros(params[k].shape) for k in names}
    start_step = 0
    history_rows: list[list[float]] = []

    ckpt_path = os.path.join(out_dir, "checkpoint.mgnt") if out_dir else None
    if resume:
        if not (ckpt_path and os.path.exists(ckpt_path)):
            raise ValidationError("resume requested but no checkpoint found")
        state = load_checkpoint(ckpt_path)
        params = state["params"]
        normalizer = state["normalizer"]
        adam_m = state["adam_m"]
        adam_v = state["adam_v"]
        start_step = state["meta"]["step"]
        history_rows = state["history"].tolist()

    lr0, lr1 = train_cfg.lr, train_cfg.lr_min
    total = max(train_cfg.steps - 1, 1)
    n_traj = len(trajs)
    grad_norm = 0.0

    for step in range(start_step, train_cfg.steps):
        rng = _step_rng(train_cfg.seed, step)
        prep = trajs[int(rng.integers(n_traj))]
        n_avail = prep.n_transitions
        k = min(train_cfg.batch_size, n_avail)
        picks = rng.choice(n_avail, size=k, replace=False)
        sample, target, mask = make_batch(
            prep, picks.tolist(), train_cfg.target_mode, normalizer=normalizer,
            noise_scale=train_cfg.noise_scale, rng=rng)
        sample = normalizer.normalize_sample(sample)
        target = normalizer.normalize_targets(target)

        lr = lr0 * (lr1 / lr0) ** (step / total)
        with Tape() as tape:
            pred, _ = forward(sample, params, model_cfg, train_mode=True, rng=rng)
            loss = compute_loss(pred, target, mask, sample.sample_ranges)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingAbort(
                    f"non-finite loss at step {step} (lr={lr:.3e}, "
                    f"last grad norm={grad_norm:.3e})")
            grads = tape.gradients(loss, [params[k_] for k_ in names])

        grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        b1, b2, eps = train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps
        tcount = step + 1
        for name, g in zip(names, grads):
            adam_m[name] = b1 * adam_m[name] + (1 - b1) * g
            adam_v[name] = b2 * adam_v[name] + (1 - b2) * g * g
            m_hat = adam_m[name] / (1 - b1 ** tcount)
            v_hat = adam_v[name] / (1 - b2 ** tcount)
            params[name] = Tensor(
                params[name].data - lr * m_hat / (np.sqrt(v_hat) + eps),
                requires_grad=True)

        history_rows.append([float(step), loss_val, lr, grad_norm])
        if progress and (step % train_cfg.log_every == 0 or step == train_cfg.steps - 1):
            print(f"step {step:6d}  loss {loss_val:.6e}  lr {lr:.3e}  |g| {grad_norm:.3e}")
        if ckpt_path and ((step + 1) % train_cfg.checkpoint_every == 0
                          or step == train_cfg.steps - 1):
            meta = {"schema": trajs[0].schema.name}
            meta.update(extra_meta or {})
            save_checkpoint(ckpt_path, params, model_cfg, normalizer,
                            train_cfg=train_cfg, adam_m=adam_m, adam_v=adam_v,
                            step=step + 1, history=np.array(history_rows),
                            extra_meta=meta)

    history = np.array(history_rows).reshape(-1, 4)
    return FitResult(params=params, normalizer=normalizer, history=history,
                     model_config=model_cfg)


def evaluate_one_step_loss(params, model_cfg: ModelConfig, normalizer: Normalizer,
                           trajs: list[PreparedTrajectory], target_mode: str) -> float:
    """Deterministic (eval-mode, noise-free) normalized one-step loss over
    every transition of the given trajectories."""
    total, count = 0.0, 0
    for prep in trajs:
        for t in range(prep.n_transitions):
            sample, target, mask = make_batch(prep, [t], target_mode)
            sample = normalizer.normalize_sample(sample)
            target = normalizer.normalize_targets(target)
            pred, _ = forward(sample, params, model_cfg, train_mode=False)
            loss = compute_loss(pred, target, mask, sample.sample_ranges)
            total += loss.item()
            count += 1
    return total / count


def write_history_csv(path: str, history: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("step,loss,lr,grad_norm\n")
        for row in history:
            f.write(f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r}\n")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str, params: dict[str, Tensor], model_cfg: ModelConfig,
                    normalizer: Normalizer, train_cfg: TrainConfig | None = None,
                    adam_m: dict | None = None, adam_v: dict | None = None,
                    step: int = 0, history: np.ndarray | None = None,
                    extra_meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        arrays[f"param.{name}"] = tensor.data
    if adam_m is not None:
        for name, v in adam_m.items():
            arrays[f"adam_m.{name}"] = v
        for name, v in adam_v.items():
            arrays[f"adam_v.{name}"] = v
    arrays.update(normalizer.to_arrays())
    arrays["history"] = history if history is not None else np.zeros((0, 4))
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "model_config": model_cfg.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg is not None else {},
    }
    if extra_meta:
        meta.update(extra_meta)
    write_arrays(path, arrays, meta=meta)


def load_checkpoint(path: str) -> dict:
    arrays, meta = read_arrays(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise SchemaFormatError(f"{path}: not a checkpoint (format tag {meta.get('format')!r})")
    params = {k.split(".", 1)[1]: Tensor(v, requires_grad=True)
              for k, v in arrays.items() if k.startswith("param.")}
    adam_m = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m.")}
    adam_v = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v.")}
    return {
        "params": params,
        "adam_m": adam_m,
        "adam_v": adam_v,
        "normalizer": Normalizer.from_arrays(arrays),
        "model_config": ModelConfig.from_dict(meta["model_config"]),
        "history": arrays.get("history", np.zeros((0, 4))),
        "meta": meta,
    }
