"""Training loop with early stopping, grid search and seed replication."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .autodiff import adam_step, backward, no_grad
from .data import Dataset, LogNormStats, iter_batches
from .errors import ConfigError, NonFiniteGradient, NonFiniteLoss
from .model import ModelConfig, TPPModel

log = logging.getLogger(__name__)

LR_GRID = (1e-3, 5e-4, 1e-4)
DIM_GRID = (8, 16, 32)
LAYER_GRID = (1, 2, 3)
LOG_FIELDS = ("epoch", "train_loss", "val_loss", "wall_seconds")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    dim: int = 16
    layers: int = 1
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    seed: int = 0
    encoder: str = "revatt"
    decoder: str = "tcddm"
    S: int = 100
    time_style: str = "positional"
    lognorm_std: bool = False
    decoder_options: dict = field(default_factory=dict)

    def validate(self, grid: bool = False) -> None:
        if self.lr <= 0 or self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("lr, max_epochs, patience and batch_size must be positive")
        if self.S < 1:
            raise ConfigError("S must be at least 1")
        if grid and (self.lr not in LR_GRID or self.dim not in DIM_GRID or self.layers not in LAYER_GRID):
            raise ConfigError("lr / dim / layers outside the tuning grid")

    def model_config(self, num_marks: int) -> ModelConfig:
        return ModelConfig(self.encoder, self.decoder, self.dim, self.layers, num_marks,
                           self.time_style, dict(self.decoder_options))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass
class TrainResult:
    model: TPPModel
    log: list[dict]
    best_epoch: int
    best_val: float
    stopped_early: bool

    def losses(self) -> list[tuple[int, float, float]]:
        """The reproducible part of the log (wall time dropped)."""
        return [(r["epoch"], r["train_loss"], r["val_loss"]) for r in self.log]


def validation_loss(model: TPPModel, dataset: Dataset, seed: int, batch_size: int) -> float:
    """Mean per-sequence loss with a fixed noise stream."""
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    with no_grad():
        for batch in iter_batches(dataset, batch_size):
            total += model.loss(batch, rng).item() * batch.shape[0]
            n += batch.shape[0]
    return total / max(n, 1)


def _write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(LOG_FIELDS):
        raise ValueError(f"{path}: unexpected columns {list(rows[0])}")
    return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "wall_seconds": float(r["wall_seconds"])} for r in rows]


def _abort(model: TPPModel, last_good: dict, epoch: int, checkpoint, log_path, rows: list[dict]) -> None:
    """Roll back to the last finite parameters and persist them with the log so far."""
    model.params.restore(last_good)
    if checkpoint is not None:
        model.save(checkpoint, {"epoch": epoch - 1, "aborted": True})
    if log_path is not None:
        _write_log(log_path, rows)


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset, checkpoint: str | Path | None = None,
          log_path: str | Path | None = None, stats: LogNormStats | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a model; keep the lowest-validation-loss parameters (final ones for adversarial decoders)."""
    config.validate()
    stats = stats or LogNormStats.fit(train_set, config.lognorm_std)
    model = TPPModel(config.model_config(train_set.num_marks), stats, config.seed)
    params = model.params
    rng = np.random.default_rng([config.seed, 1])
    adversarial = model.decoder.adversarial
    gen_names = model.generator_names
    keep_final = adversarial

    rows: list[dict] = []
    best_val, best_epoch = math.inf, 0
    best = params.snapshot()
    last_good = params.snapshot()
    stopped = False
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        try:
            for batch in iter_batches(train_set, config.batch_size, rng):
                if adversarial:
                    for _ in range(model.decoder.critic_steps):
                        c = model.critic_loss(batch, rng)
                        adam_step(params, backward(c), config.lr, names=model.critic_names)
                loss = model.loss(batch, rng)
                grads = backward(loss)
                adam_step(params, grads, config.lr, names=gen_names)
                total += loss.item() * batch.shape[0]
                count += batch.shape[0]
        except (NonFiniteLoss, NonFiniteGradient):
            _abort(model, last_good, epoch, checkpoint, log_path, rows)
            raise
        val = validation_loss(model, val_set, config.seed + 10_000, config.batch_size)
        row = {"epoch": epoch, "train_loss": total / max(count, 1), "val_loss": val,
               "wall_seconds": round(time.perf_counter() - start, 3)}
        rows.append(row)
        log.info("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val)
        if on_epoch is not None:
            on_epoch(row)
        if not math.isfinite(val):
            _abort(model, last_good, epoch, checkpoint, log_path, rows[:-1])
            raise NonFiniteLoss(f"validation loss {val} at epoch {epoch}")
        last_good = params.snapshot()
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = last_good
        elif not keep_final and epoch - best_epoch >= config.patience:
            stopped = True
            break
    if keep_final:
        best_epoch, best_val = rows[-1]["epoch"], rows[-1]["val_loss"]
    else:
        params.restore(best)
    if checkpoint is not None:
        model.save(checkpoint, {"epoch": best_epoch, "train": config.to_json()})
    if log_path is not None:
        _write_log(log_path, rows)
    return TrainResult(model, rows, best_epoch, best_val, stopped)


def grid_cells(lrs: Iterable[float] = LR_GRID, dims: Iterable[int] = DIM_GRID,
               layers: Iterable[int] = LAYER_GRID) -> list[dict]:
    return [{"lr": a, "dim": b, "layers": c} for a, b, c in itertools.product(lrs, dims, layers)]


def grid_search(base: TrainConfig, train_set: Dataset, val_set: Dataset, cells: list[dict] | None = None,
                table_path: str | Path | None = None,
                trainer: Callable = train) -> tuple[TrainConfig, list[dict]]:
    """Train every cell, pick the lowest validation loss (first wins on ties)."""
    cells = grid_cells() if cells is None else cells
    rows = []
    best_cfg, best_val = None, math.inf
    for cell in cells:
        cfg = replace(base, **cell)
        res = trainer(cfg, train_set, val_set)
        row = dict(cell, val_loss=res.best_val, best_epoch=res.best_epoch)
        rows.append(row)
        if res.best_val < best_val:
            best_cfg, best_val = cfg, res.best_val
    if table_path is not None and rows:
        with open(table_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    if best_cfg is None:
        raise ConfigError("grid produced no finite validation loss")
    return best_cfg, rows


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ConfigError("need at least two values for a sample standard deviation")
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


def run_seeds(config: TrainConfig, splits_for_seed: Callable[[int], tuple[Dataset, Dataset, Dataset]],
              seeds: Iterable[int] = range(5), eval_fn: Callable | None = None) -> dict:
    """Train and evaluate once per seed, then aggregate each metric.

    ``splits_for_seed(seed)`` returns (train, val, test); ``eval_fn(model, test, seed)``
    returns a flat dict of metrics.
    """
    from .metrics import evaluate

    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("run_seeds needs n >= 2")
    if eval_fn is None:
        def eval_fn(model, test, seed):
            r = evaluate(model, test, config.S, seed)
            return {k: getattr(r, k) for k in ("mape", "crps", "qqp_dev", "top1_acc", "top3_acc")}
    per_seed = []
    for s in seeds:
        tr, va, te = splits_for_seed(s)
        res = train(replace(config, seed=s), tr, va)
        per_seed.append(eval_fn(res.model, te, s))
    out = {k: mean_std([m[k] for m in per_seed]) for k in per_seed[0]}
    return {"summary": out, "runs": per_seed, "seeds": seeds}
