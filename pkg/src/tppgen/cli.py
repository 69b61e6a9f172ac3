"""Command-line entry point: ``tppgen {simulate,train,evaluate,sample,dynamics,grid}``.

Exit codes: 0 ok, 2 usage, 3 data/checkpoint problem, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import hawkes
from .data import EventSequence, load_jsonl, make_batch, rescale_time, save_jsonl, split
from .decoders import DECODERS
from .encoders import VARIANTS
from .errors import CheckpointError, ConfigError, DataError, SamplerDiverged, UnstableProcess
from .inference import record_sampling_dynamics, rollout, write_dynamics_csv
from .metrics import evaluate
from .model import TPPModel
from .training import TrainConfig, grid_cells, grid_search, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TARGET_MEAN_LENGTH = 580.36


class UsageError(Exception):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- simulate -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = hawkes.HawkesConfig(num_types=args.types, horizon=args.horizon or 1.0, base_rate=args.base_rate,
                              seed=args.seed, cutting_ratio=args.cut, max_events=args.max_events,
                              stable_kernels=not args.allow_unstable)
    draw = hawkes.sample_kernels if args.allow_unstable else hawkes.sample_stable_kernels
    kernel_ss = np.random.SeedSequence(args.seed).spawn(1)[0]
    kernels = draw(args.types, args.cut, np.random.default_rng(kernel_ss))
    horizon = args.horizon
    if horizon is None:
        horizon = hawkes.calibrate_horizon(cfg, kernels, args.target_mean, num_runs=args.calib_runs,
                                           t_cap=args.calib_cap)
    cfg = replace(cfg, horizon=horizon)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UnstableProcess)
        ds = hawkes.generate_synthetic(args.n, cfg, kernels)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_jsonl(ds, out / "data.jsonl")
    _write_json(out / "kernels.json", {
        "kinds": np.asarray(kernels).tolist(), "legend": {k.name: int(k) for k in hawkes.Kernel},
        "layout": "kinds[target][source]", "mu": cfg.mu.tolist(), "horizon": horizon,
        "spectral_radius": ds.meta["spectral_radius"], "seed": args.seed, "cutting_ratio": args.cut})
    L = ds.lengths()
    _write_json(out / "stats.json", {"num_sequences": len(ds), "num_types": args.types,
                                     "mean_length": float(L.mean()), "min_length": int(L.min()),
                                     "max_length": int(L.max()), "t_max": ds.t_max})
    print(f"wrote {len(ds)} sequences (mean length {L.mean():.2f}) to {out}")
    return EXIT_OK


# -- shared data plumbing -----------------------------------------------------

def _load_splits(path, split_seed: int, num_marks: int | None = None, t_max: float | None = None):
    ds = load_jsonl(path, num_marks)
    tr, va, te = split(ds, split_seed)
    t_max = t_max if t_max is not None else tr.t_max
    return tuple(rescale_time(d, t_max) for d in (tr, va, te)), t_max, ds.num_marks


def _train_config(args) -> TrainConfig:
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    over = {k: getattr(args, k) for k in ("lr", "dim", "layers", "patience", "batch_size", "seed",
                                          "encoder", "decoder", "S", "time_style")
            if getattr(args, k, None) is not None}
    if getattr(args, "epochs", None) is not None:
        over["max_epochs"] = args.epochs
    if getattr(args, "lognorm_std", False):
        over["lognorm_std"] = True
    cfg = replace(base, **over)
    opts = dict(cfg.decoder_options)
    if getattr(args, "weighted", False):
        opts["weighted"] = True
    cfg = replace(cfg, decoder_options=opts)
    cfg.validate(grid=getattr(args, "grid_check", False))
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split_seed = cfg.seed if args.split_seed is None else args.split_seed
    (tr, va, _), t_max, M = _load_splits(args.data, split_seed, args.num_marks)
    cfg.save(out / "config.json")
    res = train(cfg, tr, va, log_path=out / "train_log.csv",
                on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  train {r['train_loss']:.5f}  "
                                         f"val {r['val_loss']:.5f}  {r['wall_seconds']:.1f}s"))
    res.model.save(out / "model.ckpt", {"epoch": res.best_epoch, "train": cfg.to_json(),
                                        "split_seed": split_seed, "t_max": t_max, "num_marks": M})
    _write_json(out / "stats.json", res.model.stats.to_json(t_max))
    print(f"best epoch {res.best_epoch} (val {res.best_val:.5f}); checkpoint in {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path):
    model, header = TPPModel.load(path)
    return model, header


def cmd_evaluate(args) -> int:
    model, header = _load_model(args.ckpt)
    split_seed = args.split_seed if args.split_seed is not None else header.get("split_seed", 0)
    M = header.get("num_marks", model.config.num_marks)
    (tr, va, te), _, _ = _load_splits(args.data, split_seed, M, header.get("t_max"))
    if M != model.config.num_marks:
        raise CheckpointError("dataset mark count differs from the checkpoint")
    target = {"train": tr, "val": va, "test": te}[args.split]
    rep = evaluate(model, target, args.S, args.seed, max_events=args.max_events)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, rep.to_json())
    sim_path = out.with_name(out.stem + "_similarity.csv")
    np.savetxt(sim_path, model.encoder.similarity(), delimiter=",", fmt="%.10g")
    print(json.dumps(rep.to_json(), indent=2))
    return EXIT_OK


def cmd_sample(args) -> int:
    model, header = _load_model(args.ckpt)
    rng = np.random.default_rng(args.seed)
    seqs = [rollout(model, args.horizon, rng, deterministic=args.deter, max_events=args.max_events,
                    num_samples=args.S) for _ in range(args.n)]
    save_jsonl(seqs, args.out)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def cmd_dynamics(args) -> int:
    model, header = _load_model(args.ckpt)
    h = np.zeros((1, model.config.dim))
    if args.data:
        split_seed = header.get("split_seed", 0)
        (_, _, te), _, _ = _load_splits(args.data, split_seed, model.config.num_marks, header.get("t_max"))
        seq = te[args.sequence]
        prefix = EventSequence(seq.timestamps[:args.event], seq.marks[:args.event])
        if len(prefix):
            h = model.histories(make_batch([prefix]))[:, -1]
    checkpoints = None if args.every is None else range(0, 10 ** 7, args.every)
    rows = record_sampling_dynamics(model, h, checkpoints, args.chains, np.random.default_rng(args.seed),
                                    bins=args.bins)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dynamics_csv(rows, args.out)
    peak = max(rows, key=lambda r: r["var"])
    print(f"{len(rows)} checkpoints; peak variance {peak['var']:.4g} at step {peak['step']}")
    return EXIT_OK


def cmd_grid(args) -> int:
    base = _train_config(args)
    split_seed = base.seed if args.split_seed is None else args.split_seed
    (tr, va, _), _, _ = _load_splits(args.data, split_seed, args.num_marks)
    cells = grid_cells(args.lrs, args.dims, args.layer_grid)
    best, rows = grid_search(base, tr, va, cells, table_path=args.out)
    print(f"{len(rows)} cells; best lr={best.lr} dim={best.dim} layers={best.layers}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _add_model_flags(p) -> None:
    p.add_argument("--config", help="JSON training config; flags override its fields")
    p.add_argument("--encoder", choices=VARIANTS)
    p.add_argument("--decoder", choices=DECODERS)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--dim", type=_positive_int, help="hidden size D (multiple of 4)")
    p.add_argument("--layers", type=int, choices=(1, 2, 3))
    p.add_argument("--epochs", type=_positive_int, help="maximum epochs (default 100)")
    p.add_argument("--patience", type=_positive_int, help="early-stopping patience (default 10)")
    p.add_argument("--batch-size", type=_positive_int, dest="batch_size", help="sequences per batch (default 16)")
    p.add_argument("--seed", type=int)
    p.add_argument("-S", type=_positive_int, dest="S", help="samples per prediction (default 100)")
    p.add_argument("--time-style", choices=("positional", "interval"), dest="time_style")
    p.add_argument("--lognorm-std", action="store_true", help="normalise log-intervals by std instead of variance")
    p.add_argument("--weighted", action="store_true", help="step-weighted diffusion objective")
    p.add_argument("--split-seed", type=int, help="seed of the 64/16/20 split (default: --seed)")
    p.add_argument("--num-marks", type=_positive_int, help="override the inferred number of marks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tppgen", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a multivariate Hawkes dataset")
    p.add_argument("--types", type=_positive_int, default=5)
    p.add_argument("--cut", type=float, default=0.2, help="probability that a kernel is zero")
    p.add_argument("--n", type=_positive_int, default=6000, help="number of sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-rate", type=_positive_float, default=0.1, dest="base_rate")
    p.add_argument("--horizon", type=_positive_float, help="observation window; calibrated when omitted")
    p.add_argument("--target-mean", type=_positive_float, default=TARGET_MEAN_LENGTH, dest="target_mean")
    p.add_argument("--calib-runs", type=_positive_int, default=50, dest="calib_runs")
    p.add_argument("--calib-cap", type=_positive_float, default=5000.0, dest="calib_cap")
    p.add_argument("--max-events", type=_positive_int, default=5000, dest="max_events")
    p.add_argument("--allow-unstable", action="store_true", help="keep supercritical kernel draws")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--split-seed", type=int)
    p.add_argument("-S", type=_positive_int, dest="S", default=100)
    p.add_argument("--max-events", type=_positive_int, dest="max_events")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sample", help="generate sequences autoregressively")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=_positive_int, default=1)
    p.add_argument("--horizon", type=_positive_float, default=50.0)
    p.add_argument("--max-events", type=_positive_int, default=1000, dest="max_events")
    p.add_argument("-S", type=_positive_int, dest="S", default=100)
    p.add_argument("--deter", action="store_true", help="mean interval and most likely mark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("dynamics", help="record intermediate sampler distributions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="take the history from a test sequence (default: empty history)")
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--event", type=int, default=10, help="history length taken from the sequence")
    p.add_argument("--chains", type=_positive_int, default=5000)
    p.add_argument("--every", type=_positive_int, help="keep every n-th step (default: all)")
    p.add_argument("--bins", type=_positive_int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="table CSV path")
    p.add_argument("--lrs", type=_positive_float, nargs="+", default=[1e-3, 5e-4, 1e-4])
    p.add_argument("--dims", type=_positive_int, nargs="+", default=[8, 16, 32])
    p.add_argument("--layer-grid", type=int, nargs="+", default=[1, 2, 3], dest="layer_grid")
    _add_model_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, SamplerDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
