"""Next-mark classifier and the combined time + mark objective."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .nn import add_linear, linear


def mark_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Value, marks) -> Value:
    return -ad.pick(ad.log_softmax(logits, axis=-1), marks)


def total_loss(time_loss, probs, mark) -> Value:
    """``l - log p[mark]`` for a probability vector (or rows of them)."""
    probs = probs if isinstance(probs, Value) else Value(probs)
    return time_loss - ad.pick(probs, np.asarray(mark)).log()


class MarkHead:
    def __init__(self, params: ParamStore, dim: int, num_marks: int, rng: np.random.Generator,
                 prefix: str = "mark"):
        self.params = params
        self.prefix = prefix
        self.num_marks = num_marks
        add_linear(params, prefix, dim, num_marks, rng)

    def logits(self, h) -> Value:
        return linear(self.params, self.prefix, h)

    def probs(self, h) -> np.ndarray:
        with ad.no_grad():
            return mark_probs(self.logits(h).data)
