"""Command-line entry point.

    mgnt <gen-data|train|eval|rollout|export-attention|verify>
         [--config PATH] [--out DIR] [--seed N] [--workers N] [--resume]

Exit codes: 0 success, 1 verification failure, 2 config error, 3 training
abort, 4 schema mismatch.  Every command echoes its resolved configuration
into the output directory.  MGNT_SEED in the environment overrides all
configured seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as C
from .container import write_arrays
from .data import (Trajectory, feature_dims, get_schema, load_split,
                   prepare_trajectory)
from .errors import ConfigError, MgntError, SchemaFormatError, TrainingAbort
from .oracle import gen_chain_dataset, gen_dataset
from .rollout import evaluate, export_attention, rollout
from .train import fit, load_checkpoint, write_history_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgnt")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument("--workers", type=int, default=1)
        return p

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    p = common(sub.add_parser("train", help="train from a dataset manifest"))
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--resume", action="store_true")
    p = common(sub.add_parser("eval", help="metrics on a dataset split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p = common(sub.add_parser("rollout", help="autoregressive rollout of one trajectory"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--export-weights", action="store_true")
    p = common(sub.add_parser("export-attention", help="slice-weight maps for one frame"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--block", type=int, default=0)
    sub.add_parser("verify", help="run the fast invariant suite")
    return parser


def _load_cfg(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides = {"data.seed": args.seed, "chain.seed": args.seed,
                     "train.seed": args.seed}
    return C.load_config(args.config, overrides)


def _checkpoint_context(path: str):
    state = load_checkpoint(path)
    meta = state["meta"]
    schema = get_schema(meta["schema"])
    gdict = meta.get("graph_config", {})
    from .data import GraphConfig
    gcfg = GraphConfig(**{**gdict, "contact_radius": gdict.get("contact_radius")})
    target_mode = meta.get("train_config", {}).get("target_mode", "absolute")
    return state, schema, gcfg, target_mode


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    C.write_resolved(cfg, args.out)
    if cfg["data.kind"] == "impact":
        manifest = gen_dataset(cfg["data.n_train"], cfg["data.n_test"],
                               C.oracle_config(cfg), cfg["data.seed"], args.out,
                               workers=args.workers)
    elif cfg["data.kind"] == "chain":
        manifest = gen_chain_dataset(cfg["chain.n_train"], cfg["chain.n_test"],
                                     C.chain_config(cfg), cfg["chain.seed"], args.out)
    else:
        raise ConfigError(f"unknown data.kind {cfg['data.kind']!r}")
    print(f"wrote {manifest}")
    return 0


def _prepare_split(manifest_dir: str, gcfg, split_names=("train", "test")):
    manifest = os.path.join(manifest_dir, "manifest.json")
    schema, split, ds_cfg = load_split(manifest)
    prepared = {name: [prepare_trajectory(t, schema, gcfg) for t in split[name]]
                for name in split_names}
    return schema, prepared, ds_cfg


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved(cfg, args.out)
    gcfg = C.graph_config(cfg)
    schema, prepared, _ = _prepare_split(args.data, gcfg)
    if not prepared["train"]:
        raise ConfigError("dataset has no training trajectories")
    mcfg = C.model_config(cfg, feature_dims(schema, gcfg))
    tcfg = C.train_config(cfg)
    from dataclasses import asdict
    result = fit(prepared["train"], mcfg, tcfg, out_dir=args.out,
                 resume=args.resume, progress=True,
                 extra_meta={"graph_config": asdict(gcfg)})
    write_history_csv(os.path.join(args.out, "loss_history.csv"), result.history)
    print(f"final loss {result.history[-1, 1]:.6e} after {int(result.history[-1, 0]) + 1} steps")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved(cfg, args.out)
    state, schema, gcfg, target_mode = _checkpoint_context(args.checkpoint)
    manifest = os.path.join(args.data, "manifest.json")
    ds_schema, split, _ = load_split(manifest)
    if ds_schema.name != schema.name:
        raise SchemaFormatError(
            f"checkpoint schema {schema.name!r} does not match dataset "
            f"schema {ds_schema.name!r}")
    preps = [prepare_trajectory(t, schema, gcfg) for t in split[args.split]]
    if not preps:
        raise ConfigError(f"split {args.split!r} is empty")
    horizon = cfg["eval.horizon"] or None
    report = evaluate(state["params"], state["model_config"], state["normalizer"],
                      preps, target_mode, horizon=horizon)
    report["split"] = args.split
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    _write_consistency_csv(os.path.join(args.out, "consistency.csv"), report)
    for name, entry in report["rmse_all"].items():
        print(f"rmse_all[{name}] = {entry['mean']:.6e}")
    for name, entry in report["r_rmse"].items():
        if "mean" in entry:
            print(f"r_rmse[{name}] = {entry['mean']:.3f}%")
    return 0


def _write_consistency_csv(path: str, report: dict) -> None:
    with open(path, "w") as f:
        f.write("trajectory,step,hardening_pred,hardening_gt,kinetic_pred,kinetic_gt\n")
        for i, entry in enumerate(report["consistency"]):
            hp = entry.get("hardening_sum_pred", [])
            hg = entry.get("hardening_sum_gt", [])
            kp = entry.get("kinetic_pred", [])
            kg = entry.get("kinetic_gt", [])
            for s in range(max(len(hp), len(kp))):
                def cell(seq):
                    return repr(seq[s]) if s < len(seq) else ""
                f.write(f"{i},{s},{cell(hp)},{cell(hg)},{cell(kp)},{cell(kg)}\n")


def _cmd_rollout(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved(cfg, args.out)
    state, schema, gcfg, target_mode = _checkpoint_context(args.checkpoint)
    traj = Trajectory.load(args.trajectory)
    if traj.meta.get("schema") != schema.name:
        raise SchemaFormatError(
            f"trajectory schema {traj.meta.get('schema')!r} does not match "
            f"checkpoint schema {schema.name!r}")
    prep = prepare_trajectory(traj, schema, gcfg)
    result = rollout(state["params"], state["model_config"], state["normalizer"], prep,
                     args.horizon, target_mode, collect_weights=args.export_weights)
    stacked = result.stacked()
    arrays = dict(traj.arrays)
    for key, val in stacked.items():
        arrays[key] = val
    arrays["contact_counts"] = result.contact_counts
    out_traj = Trajectory(arrays=arrays, meta={**traj.meta, "format": "mgnt-rollout",
                                               "horizon": args.horizon})
    out_traj.save(os.path.join(args.out, "rollout.mgnt"))
    if args.export_weights:
        wa = {}
        for t, per_block in enumerate(result.slice_weights):
            for b, w in enumerate(per_block):
                wa[f"w_step{t:03d}_block{b}"] = w
        write_arrays(os.path.join(args.out, "slice_weights.mgnt"), wa,
                     meta={"format": "mgnt-attention-rollout"})
    _write_step_error_csv(os.path.join(args.out, "step_error.csv"),
                          schema, stacked, traj, args.horizon)
    print(f"rolled out {args.horizon} steps; contact edges per step: "
          f"{result.contact_counts.tolist()}")
    return 0


def _write_step_error_csv(path: str, schema, stacked: dict, traj: Trajectory,
                          horizon: int) -> None:
    pred = dict(stacked)
    pred["X"] = traj.arrays["X"]
    gt = {k: (np.asarray(v)[: horizon + 1]
              if isinstance(v, np.ndarray) and v.ndim >= 1
              and v.shape[0] == traj.n_frames else v)
          for k, v in traj.arrays.items()}
    ps = schema.metric_series(pred)
    gs = schema.metric_series(gt)
    names = sorted(ps)
    with open(path, "w") as f:
        f.write("step," + ",".join(f"rmse_{n}" for n in names) + "\n")
        for s in range(1, horizon + 1):
            cells = []
            for n in names:
                d = ps[n][s] - gs[n][s]
                cells.append(repr(float(np.sqrt(np.mean(d * d)))))
            f.write(f"{s}," + ",".join(cells) + "\n")


def _cmd_export_attention(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved(cfg, args.out)
    state, schema, gcfg, _ = _checkpoint_context(args.checkpoint)
    traj = Trajectory.load(args.trajectory)
    prep = prepare_trajectory(traj, schema, gcfg)
    positions, weights = export_attention(state["params"], state["model_config"],
                                          state["normalizer"], prep, args.frame,
                                          args.block)
    out = os.path.join(args.out, f"attention_frame{args.frame:03d}_block{args.block}.mgnt")
    write_arrays(out, {"positions": positions, "weights": weights},
                 meta={"format": "mgnt-attention", "frame": args.frame,
                       "block": args.block})
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "rollout":
            return _cmd_rollout(args)
        if args.command == "export-attention":
            return _cmd_export_attention(args)
        if args.command == "verify":
            from .verify import main_verify
            return main_verify()
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except SchemaFormatError as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return 4
    except MgntError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
