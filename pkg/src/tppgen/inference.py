"""Prediction, sampler-trajectory recording and autoregressive rollout."""

from __future__ import annotations

import csv
import json

import numpy as np

from .data import EventSequence, make_batch
from .errors import ConfigError

DYNAMICS_FIELDS = ("step", "checkpoint_k", "mean", "var", "hist_bin_edges", "hist_counts")


def predict_next_time(model, h, t_prev, num_samples: int = 100, rng=None,
                      closed_form: bool = True) -> np.ndarray:
    """``t_prev + E[tau | h]`` estimated from ``num_samples`` draws (or exactly when available)."""
    if num_samples < 1:
        raise ConfigError("need at least one sample")
    h = np.atleast_2d(h)
    if closed_form:
        m = model.closed_form_mean(h)
        if m is not None:
            return np.asarray(t_prev) + m
    rng = rng or np.random.default_rng()
    return np.asarray(t_prev) + model.sample_intervals(h, num_samples, rng).mean(axis=1)


def record_sampling_dynamics(model, h, checkpoints=None, num_chains: int = 5000, rng=None,
                             bins: int = 30) -> list[dict]:
    """Run the iterative sampler for one history and summarise the chains at chosen steps.

    Statistics are taken after mapping the intermediate states back to
    interval space.  ``checkpoints`` lists sampler step indices (0 is the
    initial draw); ``None`` keeps every step.
    """
    if not model.decoder.iterative:
        raise ConfigError(f"decoder {model.decoder.kind!r} has no iterative sampler")
    rng = rng or np.random.default_rng()
    wanted = None if checkpoints is None else set(int(c) for c in checkpoints)
    rows = []

    def record(step, level, x):
        if wanted is not None and step not in wanted:
            return
        tau = model.to_intervals(x)
        with np.errstate(over="ignore", invalid="ignore"):
            counts, edges = np.histogram(np.log(tau), bins=bins)
        rows.append({"step": step, "checkpoint_k": level, "mean": float(tau.mean()),
                     "var": float(tau.var()), "hist_bin_edges": edges.tolist(),
                     "hist_counts": counts.tolist(), "latent_var": float(np.var(x))})

    model.sample_intervals(np.atleast_2d(h), num_chains, rng, record=record)
    return rows


def write_dynamics_csv(rows: list[dict], path) -> None:
    """Histogram edges (of log-interval) and counts are stored as JSON lists."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DYNAMICS_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(dict(r, hist_bin_edges=json.dumps(r["hist_bin_edges"]),
                            hist_counts=json.dumps(r["hist_counts"])))


def read_dynamics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DYNAMICS_FIELDS:
            raise ValueError(f"{path}: expected columns {DYNAMICS_FIELDS}")
        return [{"step": int(r["step"]), "checkpoint_k": int(r["checkpoint_k"]),
                 "mean": float(r["mean"]), "var": float(r["var"]),
                 "hist_bin_edges": json.loads(r["hist_bin_edges"]),
                 "hist_counts": json.loads(r["hist_counts"])} for r in reader]


def _next_history(model, times: list, marks: list) -> np.ndarray:
    if not times:
        return np.zeros((1, model.config.dim))
    batch = make_batch([EventSequence(np.array(times), np.array(marks))])
    return model.histories(batch)[:, -1]


def rollout(model, horizon: float, rng: np.random.Generator, deterministic: bool = False,
            max_events: int = 1000, num_samples: int = 100) -> EventSequence:
    """Generate one sequence on ``[0, horizon]`` by feeding each new event back in.

    The deterministic variant takes the predicted mean interval and the most
    likely mark; otherwise one interval draw and a sampled mark per step.
    """
    times, marks = [], []
    t = 0.0
    while len(times) < max_events:
        h = _next_history(model, times, marks)
        if deterministic:
            tau = float(predict_next_time(model, h, 0.0, num_samples, rng)[0])
            m = int(np.argmax(model.mark_probs(h)[0]))
        else:
            tau = float(model.sample_intervals(h, 1, rng)[0, 0])
            p = model.mark_probs(h)[0]
            m = int(rng.choice(p.size, p=p))
        t += tau
        if t > horizon:
            break
        times.append(t)
        marks.append(m)
    return EventSequence(np.array(times), np.array(marks, dtype=np.int64))
