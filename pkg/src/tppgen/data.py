"""Event-sequence containers, JSON-Lines I/O, splitting and time transforms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDataset, ParseError, RescaleError, SplitError

MAX_SEQ_LEN = 1000
TIME_SCALE = 50.0
TAU_FLOOR = 1e-8


@dataclass(frozen=True)
class EventSequence:
    timestamps: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        m = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        if t.shape != m.shape:
            raise ValueError("timestamps and marks differ in length")
        if t.size and np.any(np.diff(t) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if m.size and m.min() < 0:
            raise ValueError("marks must be non-negative")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "marks", m)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def clamp(self, max_len: int = MAX_SEQ_LEN) -> "EventSequence":
        if len(self) <= max_len:
            return self
        return EventSequence(self.timestamps[:max_len], self.marks[:max_len])

    def prefix(self, n: int) -> "EventSequence":
        return EventSequence(self.timestamps[:n], self.marks[:n])


@dataclass
class Dataset:
    sequences: list[EventSequence]
    num_marks: int
    split_tag: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_marks < 1:
            raise ValueError("num_marks must be >= 1")
        for s in self.sequences:
            if len(s) and s.marks.max() >= self.num_marks:
                raise ValueError(f"mark {s.marks.max()} outside [0, {self.num_marks})")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i) -> EventSequence:
        return self.sequences[i]

    @property
    def t_max(self) -> float:
        ends = [s.timestamps[-1] for s in self.sequences if len(s)]
        return float(max(ends)) if ends else 0.0

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences])

    def subset(self, idx: Iterable[int], tag: str | None = None) -> "Dataset":
        return Dataset([self.sequences[i] for i in idx], self.num_marks,
                       tag or self.split_tag, dict(self.meta))


def load_jsonl(path, num_marks: int | None = None, max_len: int = MAX_SEQ_LEN) -> Dataset:
    """Read ``{"seq": [[t, m], ...]}`` lines into a validated dataset."""
    seqs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs = obj["seq"]
                t = np.array([float(p[0]) for p in pairs], dtype=np.float64)
                m = np.array([p[1] for p in pairs])
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise ParseError(f"malformed record ({exc})", lineno) from None
            if m.size and not np.all(np.equal(np.mod(m, 1), 0)):
                raise ParseError("marks must be integers", lineno)
            if not np.all(np.isfinite(t)):
                raise ParseError("non-finite timestamp", lineno)
            if t.size and np.any(np.diff(t) < 0):
                raise ParseError("timestamps out of order", lineno)
            if m.size and m.min() < 0:
                raise ParseError("negative mark", lineno)
            seqs.append(EventSequence(t, m.astype(np.int64)).clamp(max_len))
    if not seqs:
        raise EmptyDataset(f"{path}: no sequences")
    inferred = 1 + max((int(s.marks.max()) for s in seqs if len(s)), default=0)
    return Dataset(seqs, num_marks if num_marks is not None else inferred)


def save_jsonl(dataset: Dataset | Sequence[EventSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset:
            pairs = [[float(t), int(m)] for t, m in zip(s.timestamps, s.marks)]
            fh.write(json.dumps({"seq": pairs}) + "\n")


def split(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle sequences and cut 64/16/20 into train/val/test."""
    n = len(dataset)
    if n < 5:
        raise SplitError(f"need at least 5 sequences, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(0.2 * n))
    n_val = int(round(0.2 * (n - n_test)))
    test_idx = perm[:n_test]
    val_idx = perm[n_test:n_test + n_val]
    train_idx = perm[n_test + n_val:]
    return (dataset.subset(train_idx, "train"),
            dataset.subset(val_idx, "val"),
            dataset.subset(test_idx, "test"))


def rescale_time(dataset: Dataset, t_max: float | None = None, scale: float = TIME_SCALE) -> Dataset:
    """Map ``[0, t_max]`` onto ``[0, scale]``; ``t_max`` should come from train."""
    t_max = dataset.t_max if t_max is None else t_max
    if not t_max > 0:
        raise RescaleError(f"t_max must be positive, got {t_max}")
    k = scale / t_max
    seqs = [EventSequence(s.timestamps * k, s.marks) for s in dataset]
    meta = dict(dataset.meta, t_max=t_max)
    return Dataset(seqs, dataset.num_marks, dataset.split_tag, meta)


def intervals(seq: EventSequence) -> np.ndarray:
    """Inter-event times, the first measured from the origin."""
    t = seq.timestamps
    if t.size == 0:
        raise ValueError("empty sequence")
    return np.diff(t, prepend=0.0)


@dataclass(frozen=True)
class LogNormStats:
    """Location/scale of log-intervals used to standardise decoder targets.

    The scale is the variance of ``log tau`` unless ``use_std`` is set.
    """

    mean_log: float
    var_log: float
    use_std: bool = False

    def __post_init__(self):
        if not self.var_log > 0:
            raise ValueError("var_log must be positive")

    @property
    def scale(self) -> float:
        return math.sqrt(self.var_log) if self.use_std else self.var_log

    @classmethod
    def fit(cls, dataset: Dataset, use_std: bool = False) -> "LogNormStats":
        taus = np.concatenate([intervals(s) for s in dataset if len(s)])
        logs = np.log(np.maximum(taus, TAU_FLOOR))
        return cls(float(logs.mean()), float(logs.var()), use_std)

    def to_json(self, t_max: float | None = None) -> dict:
        d = {"mean_log": self.mean_log, "var_log": self.var_log}
        if t_max is not None:
            d["t_max"] = t_max
        return d


def log_normalize(tau, stats: LogNormStats) -> np.ndarray:
    tau = np.maximum(np.asarray(tau, dtype=np.float64), TAU_FLOOR)
    return (np.log(tau) - stats.mean_log) / stats.scale


def log_denormalize(z, stats: LogNormStats) -> np.ndarray:
    return np.exp(np.asarray(z, dtype=np.float64) * stats.scale + stats.mean_log)


def write_stats(path, stats: LogNormStats, t_max: float) -> None:
    Path(path).write_text(json.dumps(stats.to_json(t_max), indent=2))


def read_stats(path) -> tuple[LogNormStats, float]:
    d = json.loads(Path(path).read_text())
    return LogNormStats(d["mean_log"], d["var_log"]), float(d["t_max"])


@dataclass
class Batch:
    """Right-padded arrays for a group of sequences."""

    times: np.ndarray     # (B, L)
    marks: np.ndarray     # (B, L) int
    tau: np.ndarray       # (B, L)
    mask: np.ndarray      # (B, L) bool, True on real events
    lengths: np.ndarray   # (B,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.times.shape


def make_batch(seqs: Sequence[EventSequence]) -> Batch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    B, L = len(seqs), int(lengths.max()) if len(seqs) else 0
    times = np.zeros((B, L))
    marks = np.zeros((B, L), dtype=np.int64)
    tau = np.zeros((B, L))
    mask = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        times[b, :n] = s.timestamps
        marks[b, :n] = s.marks
        tau[b, :n] = intervals(s)
        mask[b, :n] = True
        if n < L:
            times[b, n:] = s.timestamps[-1] if n else 0.0
    return Batch(times, marks, tau, mask, lengths)


def iter_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield batches; shuffled when ``rng`` is given."""
    order = np.arange(len(dataset))
    if rng is not None:
        order = rng.permutation(len(dataset))
    for i in range(0, len(order), batch_size):
        yield make_batch([dataset[j] for j in order[i:i + batch_size]])
