"""Denoising diffusion decoder over log-normalised intervals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autodiff import Value, no_grad
from ..errors import SamplerDiverged
from ..nn import CondMLP
from .base import Decoder, Recorder, repeat_rows


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, K: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        return cls(np.linspace(beta_start, beta_end, K))

    @property
    def K(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def posterior_var(self) -> np.ndarray:
        """``(1 - abar_{k-1}) / (1 - abar_k) * beta_k``; zero at the first step."""
        ab = self.alpha_bars
        prev = np.concatenate([[1.0], ab[:-1]])
        return (1.0 - prev) / (1.0 - ab) * self.betas

    def at(self, k):
        """Schedule arrays indexed by 1-based step ``k``."""
        i = np.asarray(k) - 1
        return self.betas[i], self.alphas[i], self.alpha_bars[i]


def forward_marginal(tau0, k, schedule: DiffusionSchedule, eps):
    _, _, ab = schedule.at(k)
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def reverse_chain(x: np.ndarray, eps_fn: Callable[[np.ndarray, int], np.ndarray],
                  schedule: DiffusionSchedule, rng: np.random.Generator | None,
                  record: Recorder | None = None) -> np.ndarray:
    """Ancestral sampling from step K down to 0.

    ``eps_fn(x, k)`` predicts the injected noise; ``rng=None`` disables the
    fresh noise term, leaving a deterministic map of the starting point.
    """
    sigma2 = schedule.posterior_var
    for step, k in enumerate(range(schedule.K, 0, -1), start=1):
        beta, alpha, ab = schedule.betas[k - 1], schedule.alphas[k - 1], schedule.alpha_bars[k - 1]
        x = (x - beta / np.sqrt(1.0 - ab) * eps_fn(x, k)) / np.sqrt(alpha)
        if k > 1 and rng is not None:
            x = x + np.sqrt(sigma2[k - 1]) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise SamplerDiverged(f"non-finite sample at diffusion step {k}")
        if record is not None:
            record(step, k, x)
    return x


class DiffusionDecoder(Decoder):
    kind = "tcddm"
    iterative = True

    def __init__(self, params, dim, rng, prefix="dec", schedule: DiffusionSchedule | None = None,
                 weighted: bool = False):
        super().__init__(params, dim, rng, prefix)
        self.schedule = schedule or DiffusionSchedule.linear()
        self.weighted = weighted
        self.net = CondMLP(params, f"{prefix}.eps", dim, dim, rng)
        params.add(f"{prefix}.Ek", np.logspace(-2, 0.5, dim))

    def step_code(self, k) -> Value:
        return (np.asarray(k, dtype=np.float64)[..., None] * self._p("Ek")).cos()

    def eps(self, x, h, k) -> Value:
        return self.net(x, h, extra=self.step_code(k))

    def loss(self, target, h, rng):
        n = target.shape[0]
        k = rng.integers(1, self.schedule.K + 1, size=n)
        eps = rng.standard_normal(n)
        x = forward_marginal(target, k, self.schedule, eps)
        err = (self.eps(x, h, k) - eps).square()
        if self.weighted:
            beta, alpha, ab = self.schedule.at(k)
            err = err * (beta / (2.0 * alpha * (1.0 - ab)))
        return err

    def sample(self, h, num_samples, rng, record=None):
        hs = repeat_rows(h, num_samples)
        with no_grad():
            ctx = self.net.context(hs)

            def eps_fn(x, k):
                return self.net(x, ctx=ctx, extra=self.step_code(k)).data

            x0 = rng.standard_normal(hs.shape[0])
            if record is not None:
                record(0, self.schedule.K + 1, x0)
            x = reverse_chain(x0, eps_fn, self.schedule, rng, record)
        return x.reshape(-1, num_samples)
