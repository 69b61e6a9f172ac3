"""Forecast scores: MAPE, sample CRPS, QQ-plot deviation and top-k accuracy."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, iter_batches
from .errors import ConfigError, EmptyEval, InsufficientData

QQ_GRID = np.linspace(0.01, 0.99, 99)


def mape(pred, true) -> tuple[float, int]:
    """Mean absolute percentage error and the number of zero targets skipped."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    true = np.asarray(true, dtype=np.float64).ravel()
    keep = true != 0
    if not keep.any():
        raise EmptyEval("no events with a non-zero target")
    err = np.abs(pred[keep] - true[keep]) / np.abs(true[keep])
    return 100.0 * float(err.mean()), int((~keep).sum())


def crps_empirical(samples, truth) -> np.ndarray:
    """Per-event ``mean|x - y| - mean|x - x'| / 2`` from ``S`` samples.

    ``samples`` is ``(S,)`` or ``(N, S)``; the pairwise term uses the sorted
    identity ``sum_{k,j} |x_k - x_j| = 2 sum_k (2k - S - 1) x_(k)``.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    y = np.asarray(truth, dtype=np.float64).reshape(-1, 1)
    S = x.shape[1]
    if S < 2:
        raise ConfigError("CRPS needs at least 2 samples")
    first = np.abs(x - y).mean(axis=1)
    xs = np.sort(x, axis=1)
    coef = 2.0 * np.arange(1, S + 1) - S - 1
    pair = 2.0 * (xs * coef).sum(axis=1)
    return first - pair / (2.0 * S * S)


def empirical_cum_hazard(samples, truth) -> np.ndarray:
    """``-log(1 - F(y))`` with ``F`` the sample CDF, clipped away from 0 and 1."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    y = np.asarray(truth, dtype=np.float64).reshape(-1, 1)
    S = x.shape[1]
    F = (x <= y).mean(axis=1)
    F = np.clip(F, 1.0 / (S + 1), S / (S + 1.0))
    return -np.log1p(-F)


def qqp_dev(cum_hazards) -> float:
    """Mean gap between empirical quantiles and Exp(1) quantiles on 0.01..0.99."""
    lam = np.asarray(cum_hazards, dtype=np.float64).ravel()
    if lam.size == 0:
        raise EmptyEval("no intervals")
    if lam.size < 100:
        warnings.warn(f"only {lam.size} intervals for QQ deviation", InsufficientData, stacklevel=2)
    emp = np.quantile(lam, QQ_GRID)
    return float(np.abs(emp + np.log1p(-QQ_GRID)).mean())


def topk_acc(probs, marks, k: int) -> tuple[float, bool]:
    """Fraction of events whose mark ranks in the top ``k``.

    Ties go to the lower mark index.  When there are fewer than ``k`` marks
    the score is 1.0 and the second value flags it as uninformative.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    m = np.asarray(marks, dtype=np.int64).ravel()
    if p.shape[0] == 0:
        raise EmptyEval("no events")
    M = p.shape[1]
    if M < k:
        return 1.0, True
    pt = p[np.arange(m.size), m][:, None]
    idx = np.arange(M)[None, :]
    rank = (p > pt).sum(axis=1) + ((p == pt) & (idx < m[:, None])).sum(axis=1)
    return float((rank < k).mean()), False


@dataclass
class MetricsReport:
    mape: float
    crps: float
    qqp_dev: float
    top1_acc: float
    top3_acc: float
    S: int
    n_events: int
    exclusions: int = 0
    top3_uninformative: bool = False
    per_sequence: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.top1_acc <= self.top3_acc <= 1.0):
            raise ValueError("accuracies must satisfy 0 <= top1 <= top3 <= 1")

    def to_json(self, per_sequence: bool = False) -> dict:
        d = asdict(self)
        if not per_sequence:
            d.pop("per_sequence")
        else:
            d["per_sequence"] = {k: np.asarray(v).tolist() for k, v in self.per_sequence.items()}
        return d


def evaluate(model, dataset: Dataset, num_samples: int = 100, seed: int = 0,
             max_events: int | None = None, chunk: int = 256, batch_size: int = 16) -> MetricsReport:
    """Score next-event predictions for every event of ``dataset``.

    Time metrics may be computed on a random subset of ``max_events`` events
    (mark metrics always use all of them).  Samples are drawn ``chunk``
    events at a time to bound memory.
    """
    rng = np.random.default_rng(seed)
    hs, t_prev, t_true, tau_true, marks, seq_id, probs = [], [], [], [], [], [], []
    offset = 0
    for batch in iter_batches(dataset, batch_size):
        H = model.histories(batch)
        idx = np.nonzero(batch.mask)
        h = H[:, :-1][idx]
        hs.append(h)
        prev = np.concatenate([np.zeros((batch.shape[0], 1)), batch.times[:, :-1]], axis=1)
        t_prev.append(prev[idx])
        t_true.append(batch.times[idx])
        tau_true.append(batch.tau[idx])
        marks.append(batch.marks[idx])
        seq_id.append(idx[0] + offset)
        probs.append(model.mark_probs(h))
        offset += batch.shape[0]
    if not hs:
        raise EmptyEval("dataset has no events")
    h = np.concatenate(hs)
    t_prev, t_true, tau_true = map(np.concatenate, (t_prev, t_true, tau_true))
    marks, seq_id, probs = map(np.concatenate, (marks, seq_id, probs))
    if h.shape[0] == 0:
        raise EmptyEval("dataset has no events")

    pick = np.arange(h.shape[0])
    if max_events is not None and h.shape[0] > max_events:
        pick = np.sort(rng.choice(h.shape[0], size=max_events, replace=False))
    pred = np.empty(pick.size)
    crps = np.empty(pick.size)
    lam = np.empty(pick.size)
    for lo in range(0, pick.size, chunk):
        sel = pick[lo:lo + chunk]
        tau_s = model.sample_intervals(h[sel], num_samples, rng)
        closed = model.closed_form_mean(h[sel])
        mean_tau = closed if closed is not None else tau_s.mean(axis=1)
        pred[lo:lo + chunk] = t_prev[sel] + mean_tau
        crps[lo:lo + chunk] = crps_empirical(t_prev[sel, None] + tau_s, t_true[sel])
        lam[lo:lo + chunk] = empirical_cum_hazard(tau_s, tau_true[sel])

    m, excluded = mape(pred, t_true[pick])
    q = qqp_dev(lam)
    top1, _ = topk_acc(probs, marks, 1)
    top3, flag = topk_acc(probs, marks, 3)

    n_seq = len(dataset)
    per_seq_crps = np.full(n_seq, np.nan)
    per_seq_ape = np.full(n_seq, np.nan)
    ape = np.where(t_true[pick] != 0, np.abs(pred - t_true[pick]) / np.where(t_true[pick] != 0, t_true[pick], 1.0), np.nan)
    sid = seq_id[pick]
    for s in np.unique(sid):
        on = sid == s
        per_seq_crps[s] = crps[on].mean()
        per_seq_ape[s] = 100.0 * np.nanmean(ape[on]) if np.isfinite(ape[on]).any() else np.nan
    return MetricsReport(m, float(crps.mean()), q, top1, top3, num_samples, int(pick.size),
                         excluded, flag, {"crps": per_seq_crps, "mape": per_seq_ape})
