"""Wasserstein-style adversarial decoder with a Lipschitz penalty."""

from __future__ import annotations

import numpy as np

from ..autodiff import Value, no_grad
from ..nn import CondMLP
from .base import Decoder, repeat_rows

RATIO_FLOOR = 1e-8


def critic_objectives(d_real: Value, d_fake: Value, real, fake, eta: float = 1.0):
    """Per-event (critic loss, generator loss), both to be minimised.

    The critic maximises ``d(real) - d(fake) - eta * | |d(real) - d(fake)| / |fake - real| - 1 |``.
    """
    gap = d_real - d_fake
    dist = np.maximum(np.abs(np.asarray(fake) - np.asarray(real)), RATIO_FLOOR)
    penalty = (gap.abs() / dist - 1.0).abs()
    return -gap + eta * penalty, gap


class GANDecoder(Decoder):
    kind = "tcgan"
    adversarial = True

    def __init__(self, params, dim, rng, prefix="dec", eta: float = 1.0, critic_steps: int = 5,
                 noise_dim: int | None = None):
        super().__init__(params, dim, rng, prefix)
        self.eta = eta
        self.critic_steps = critic_steps
        self.noise_dim = noise_dim or dim
        self.gen = CondMLP(params, f"{prefix}.gen", dim, dim, rng, in_dim=self.noise_dim)
        self.critic = CondMLP(params, f"{prefix}.critic", dim, dim, rng)

    @property
    def critic_names(self) -> list[str]:
        return self.params.names(f"{self.prefix}.critic.")

    def generate(self, h, rng) -> Value:
        n = h.shape[0]
        return self.gen(rng.standard_normal((n, self.noise_dim)), h)

    def critic_loss(self, target, h: np.ndarray, rng) -> Value:
        """Critic side; history and generated samples are treated as constants."""
        with no_grad():
            fake = self.generate(h, rng).data
        c, _ = critic_objectives(self.critic(target, h), self.critic(fake, h), target, fake, self.eta)
        return c

    def loss(self, target, h, rng):
        """Generator side: minimise ``d(real) - d(fake)``."""
        fake = self.generate(h, rng)
        return self.critic(target, h) - self.critic(fake, h)

    def sample(self, h, num_samples, rng, record=None):
        hs = repeat_rows(h, num_samples)
        with no_grad():
            x = self.generate(hs, rng).data
        return x.reshape(-1, num_samples)
