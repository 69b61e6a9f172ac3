"""Oracle distributions, a one-sample KS test and per-epoch timing summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

DIAG_DIR = Path("artifacts") / "diag"


@dataclass(frozen=True)
class OracleSpec:
    """Reference distribution: ``exp`` (rate), ``lognormal`` / ``gaussian`` (loc, scale)
    or ``mixture`` (weights + component specs)."""

    family: str
    params: tuple = ()
    weights: tuple = ()
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        f = self.family
        if f == "exp":
            if len(self.params) != 1 or self.params[0] <= 0:
                raise ValueError("exp needs one positive rate")
        elif f in ("lognormal", "gaussian"):
            if len(self.params) != 2 or self.params[1] <= 0:
                raise ValueError(f"{f} needs (loc, positive scale)")
        elif f == "mixture":
            w = np.asarray(self.weights, dtype=np.float64)
            if w.size == 0 or w.size != len(self.components) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
                raise ValueError("mixture weights must be a probability vector matching the components")
        else:
            raise ValueError(f"unknown oracle family {f!r}")

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.family == "exp":
            return np.where(x > 0, -np.expm1(-self.params[0] * np.maximum(x, 0)), 0.0)
        if self.family == "gaussian":
            return special.ndtr((x - self.params[0]) / self.params[1])
        if self.family == "lognormal":
            with np.errstate(divide="ignore"):
                lx = np.log(np.where(x > 0, x, np.nan))
            return np.where(x > 0, special.ndtr((lx - self.params[0]) / self.params[1]), 0.0)
        return sum(w * c.cdf(x) for w, c in zip(self.weights, self.components))

    def mean(self) -> float:
        if self.family == "exp":
            return 1.0 / self.params[0]
        if self.family == "gaussian":
            return float(self.params[0])
        if self.family == "lognormal":
            return math.exp(self.params[0] + 0.5 * self.params[1] ** 2)
        return float(sum(w * c.mean() for w, c in zip(self.weights, self.components)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.family == "exp":
            return rng.exponential(1.0 / self.params[0], size=n)
        if self.family == "gaussian":
            return rng.normal(self.params[0], self.params[1], size=n)
        if self.family == "lognormal":
            return rng.lognormal(self.params[0], self.params[1], size=n)
        comp = rng.choice(len(self.components), size=n, p=np.asarray(self.weights))
        out = np.empty(n)
        for i, c in enumerate(self.components):
            on = comp == i
            out[on] = c.sample(int(on.sum()), rng)
        return out


@dataclass(frozen=True)
class KSResult:
    statistic: float
    critical: float
    alpha: float
    n: int

    @property
    def passed(self) -> bool:
        return self.statistic <= self.critical


def ks_critical(n: int, alpha: float) -> float:
    """Large-sample two-sided critical value ``sqrt(-ln(alpha / 2) / 2) / sqrt(n)``."""
    return math.sqrt(-0.5 * math.log(alpha / 2.0)) / math.sqrt(n)


def ks_statistic(samples, cdf: Callable) -> float:
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    F = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_test(samples, cdf: Callable, alpha: float = 0.05) -> KSResult:
    n = np.asarray(samples).size
    if n < 30:
        raise ValueError(f"KS test needs at least 30 samples, got {n}")
    return KSResult(ks_statistic(samples, cdf), ks_critical(n, alpha), alpha, n)


def seconds_per_epoch(log_rows: Sequence[dict]) -> np.ndarray:
    """Per-epoch durations recovered from the cumulative wall clock column."""
    wall = np.array([r["wall_seconds"] for r in log_rows], dtype=np.float64)
    return np.diff(wall, prepend=0.0)


def timing_report(runs: dict[str, Sequence[dict]], path=None) -> list[dict]:
    """Mean seconds per epoch for each named run, slowest first; optionally written as CSV."""
    rows = []
    for name, log_rows in runs.items():
        per = seconds_per_epoch(log_rows)
        rows.append({"run": name, "epochs": int(per.size),
                     "sec_per_epoch": float(per.mean()) if per.size else 0.0,
                     "total_seconds": float(per.sum())})
    rows.sort(key=lambda r: -r["sec_per_epoch"])
    for r in rows:
        print(f"{r['run']:>12s}  {r['sec_per_epoch']:8.3f} s/epoch  ({r['epochs']} epochs)")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["run", "epochs", "sec_per_epoch", "total_seconds"])
            w.writeheader()
            w.writerows(rows)
    return rows
