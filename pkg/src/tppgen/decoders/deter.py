"""Point-prediction head with positively constrained weights."""

from __future__ import annotations

import numpy as np

from ..autodiff import matmul, no_grad
from ..nn import uniform_weight
from .base import Decoder


class DeterministicDecoder(Decoder):
    kind = "deter"
    normalized = False

    def __init__(self, params, dim, rng, prefix="dec"):
        super().__init__(params, dim, rng, prefix)
        params.add(f"{prefix}.w_raw", uniform_weight(rng, dim, (dim,)) - 2.0)
        params.add(f"{prefix}.b_raw", np.zeros(()))

    def predict(self, h):
        """``softplus(w) . h + softplus(b)``."""
        return matmul(h, self._p("w_raw").softplus()) + self._p("b_raw").softplus()

    def loss(self, target, h, rng):
        return (self.predict(h) - target).square()

    def mean(self, h):
        with no_grad():
            return self.predict(h).data

    def sample(self, h, num_samples, rng, record=None):
        return np.repeat(self.mean(h)[:, None], num_samples, axis=1)
