"""Conditional variational autoencoder over log-normalised intervals."""

from __future__ import annotations

import numpy as np

from ..autodiff import Value, matmul, no_grad
from ..nn import CondMLP, add_linear, linear
from .base import Decoder, repeat_rows

# Reconstruction by squared error is the Gaussian log-likelihood with this variance.
OBS_VAR = 0.5


def gaussian_kl(mu: Value, logvar: Value) -> Value:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis."""
    return 0.5 * (mu * mu + logvar.exp() - 1.0 - logvar).sum(axis=-1)


class VAEDecoder(Decoder):
    kind = "tcvae"

    def __init__(self, params, dim, rng, prefix="dec", latent: int | None = None,
                 obs_noise: bool = True):
        super().__init__(params, dim, rng, prefix)
        self.latent = latent or dim
        self.obs_noise = obs_noise
        self.enc = CondMLP(params, f"{prefix}.q", dim, dim, rng)  # only its first layer is used
        add_linear(params, f"{prefix}.q_mu", dim, self.latent, rng)
        add_linear(params, f"{prefix}.q_lv", dim, self.latent, rng)
        self.dec = CondMLP(params, f"{prefix}.p", dim, dim, rng, in_dim=self.latent)

    def posterior(self, target, h) -> tuple[Value, Value]:
        q = self.enc
        u = (q.context(h) + matmul(Value(np.asarray(target)[..., None]), q._p("wt"))).tanh()
        return linear(self.params, f"{self.prefix}.q_mu", u), linear(self.params, f"{self.prefix}.q_lv", u)

    def loss(self, target, h, rng):
        mu, logvar = self.posterior(target, h)
        noise = rng.standard_normal(mu.shape)
        z = mu + (0.5 * logvar).exp() * noise
        recon = (self.dec(z, h) - target).square()
        return gaussian_kl(mu, logvar) + recon

    def decode(self, z, h) -> np.ndarray:
        with no_grad():
            return self.dec(z, h).data

    def sample(self, h, num_samples, rng, record=None):
        hs = repeat_rows(h, num_samples)
        z = rng.standard_normal((hs.shape[0], self.latent))
        x = self.decode(z, hs)
        if self.obs_noise:
            x = x + np.sqrt(OBS_VAR) * rng.standard_normal(x.shape)
        return x.reshape(-1, num_samples)
