"""Common decoder contract."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..autodiff import ParamStore, Value

# record(step, level, samples) is called by iterative samplers after each update
Recorder = Callable[[int, int, np.ndarray], None]


class Decoder:
    """Conditional model of the next inter-event time given a history vector.

    ``normalized`` decoders model log-normalised intervals and their samples
    must be mapped back; the others work directly on rescaled intervals.
    """

    kind = "base"
    normalized = True
    adversarial = False
    iterative = False

    def __init__(self, params: ParamStore, dim: int, rng: np.random.Generator, prefix: str = "dec"):
        self.params = params
        self.dim = dim
        self.prefix = prefix

    def _p(self, key: str) -> Value:
        return self.params[f"{self.prefix}.{key}"]

    def loss(self, target: np.ndarray, h: Value, rng: np.random.Generator) -> Value:
        """Per-event training loss, shape ``(N,)``."""
        raise NotImplementedError

    def sample(self, h: np.ndarray, num_samples: int, rng: np.random.Generator,
               record: Recorder | None = None) -> np.ndarray:
        """``(N, S)`` draws in the decoder's own space."""
        raise NotImplementedError

    def mean(self, h: np.ndarray) -> np.ndarray | None:
        """Closed-form expected interval, if the family has one."""
        return None


def repeat_rows(h: np.ndarray, num_samples: int) -> np.ndarray:
    """``(N, D) -> (N * S, D)`` with each row repeated ``S`` times in place."""
    return np.repeat(np.asarray(h, dtype=np.float64), num_samples, axis=0)
