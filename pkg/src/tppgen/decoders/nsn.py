"""Noise-conditional score network sampled by annealed Langevin dynamics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autodiff import Value, no_grad
from ..errors import SamplerDiverged
from ..nn import CondMLP
from .base import Decoder, Recorder, repeat_rows


@dataclass(frozen=True)
class NoiseLadder:
    sigmas: np.ndarray
    step_scale: float = 2e-5

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 1 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("noise levels must be positive and strictly decreasing")
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def geometric(cls, K: int = 1000, sigma_max: float = 1.0, sigma_min: float = 0.01,
                  step_scale: float = 2e-5) -> "NoiseLadder":
        return cls(np.geomspace(sigma_max, sigma_min, K), step_scale)

    @property
    def K(self) -> int:
        return self.sigmas.size

    @property
    def step_sizes(self) -> np.ndarray:
        return self.step_scale * self.sigmas ** 2 / self.sigmas[-1] ** 2


def score_matching_loss(s: Value, noisy, target, sigma) -> Value:
    """``sigma^2 / 2 * (s / sigma + (noisy - target) / sigma^2)^2`` per event."""
    sigma = np.asarray(sigma, dtype=np.float64)
    r = s / sigma + (np.asarray(noisy) - np.asarray(target)) / sigma ** 2
    return 0.5 * sigma ** 2 * r * r


def annealed_langevin(x: np.ndarray, score_fn: Callable[[np.ndarray, int], np.ndarray],
                      ladder: NoiseLadder, steps_per_level: int, rng: np.random.Generator,
                      record: Recorder | None = None, step_sizes=None) -> np.ndarray:
    """``x += a_k * score(x, k) + sqrt(2 a_k) z`` for every level, largest noise first."""
    alphas = ladder.step_sizes if step_sizes is None else np.asarray(step_sizes, dtype=np.float64)
    step = 0
    for k in range(1, ladder.K + 1):
        a = alphas[k - 1]
        for _ in range(steps_per_level):
            x = x + a * score_fn(x, k) + np.sqrt(2.0 * a) * rng.standard_normal(x.shape)
            step += 1
            if record is not None:
                record(step, k, x)
        if not np.all(np.isfinite(x)):
            raise SamplerDiverged(f"non-finite Langevin state at level {k}")
    return x


class ScoreDecoder(Decoder):
    """The network output is the score multiplied by the noise level."""

    kind = "tcnsn"
    iterative = True

    def __init__(self, params, dim, rng, prefix="dec", ladder: NoiseLadder | None = None,
                 steps_per_level: int = 5):
        super().__init__(params, dim, rng, prefix)
        self.ladder = ladder or NoiseLadder.geometric()
        self.steps_per_level = steps_per_level
        self.net = CondMLP(params, f"{prefix}.score", dim, dim, rng)
        params.add(f"{prefix}.wsig", rng.uniform(-1.0, 1.0, size=dim))

    def level_code(self, sigma) -> Value:
        return np.log(np.asarray(sigma, dtype=np.float64))[..., None] * self._p("wsig")

    def loss(self, target, h, rng):
        n = target.shape[0]
        k = rng.integers(1, self.ladder.K + 1, size=n)
        sigma = self.ladder.sigmas[k - 1]
        noisy = target + sigma * rng.standard_normal(n)
        s = self.net(noisy, h, extra=self.level_code(sigma))
        return score_matching_loss(s, noisy, target, sigma)

    def sample(self, h, num_samples, rng, record=None):
        hs = repeat_rows(h, num_samples)
        sig = self.ladder.sigmas
        with no_grad():
            ctx = self.net.context(hs)

            def score_fn(x, k):
                return self.net(x, ctx=ctx, extra=self.level_code(sig[k - 1])).data / sig[k - 1]

            x0 = sig[0] * rng.standard_normal(hs.shape[0])
            if record is not None:
                record(0, 0, x0)
            x = annealed_langevin(x0, score_fn, self.ladder, self.steps_per_level, rng, record)
        return x.reshape(-1, num_samples)
