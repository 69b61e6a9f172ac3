"""Closed-form mixture baselines on rescaled intervals."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .. import autodiff as ad
from ..autodiff import Value, no_grad
from ..data import TAU_FLOOR
from ..nn import add_linear, linear
from .base import Decoder

FAMILIES = ("gauss", "lognorm", "gompertz", "weibull")
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def component_logpdf(family: str, tau, p1: Value, p2: Value) -> Value:
    """Log-density of every component at ``tau``; ``tau`` broadcasts over the last axis.

    gauss/lognorm: p1 = location, p2 = scale.  gompertz: p1 = rate lam,
    p2 = growth w.  weibull: p1 = scale, p2 = shape.  Scales are positive.
    """
    tau = np.asarray(tau, dtype=np.float64)[..., None]
    if family == "gauss":
        z = (tau - p1) / p2
        return -HALF_LOG_2PI - p2.log() - 0.5 * z * z
    tau = np.maximum(tau, TAU_FLOOR)
    if family == "lognorm":
        z = (np.log(tau) - p1) / p2
        return -HALF_LOG_2PI - p2.log() - 0.5 * z * z - np.log(tau)
    if family == "gompertz":
        lam, w = p1, p2
        return lam.log() + w * tau - lam / w * ((w * tau).exp() - 1.0)
    if family == "weibull":
        scale, shape = p1, p2
        log_r = np.log(tau) - scale.log()
        return shape.log() - scale.log() + (shape - 1.0) * log_r - (shape * log_r).exp()
    raise ValueError(f"unknown family {family!r}")


def mixture_nll(family: str, tau, logits: Value, p1: Value, p2: Value) -> Value:
    return -ad.logsumexp(ad.log_softmax(logits, axis=-1) + component_logpdf(family, tau, p1, p2), axis=-1)


def component_mean(family: str, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    if family == "gauss":
        return p1
    if family == "lognorm":
        return np.exp(p1 + 0.5 * p2 ** 2)
    if family == "gompertz":
        # integral of the survival exp(-(lam/w)(e^{w t} - 1)) over t >= 0
        x = np.clip(p1 / p2, None, 700.0)
        return np.exp(x) * special.exp1(x) / p2
    if family == "weibull":
        return p1 * special.gamma(1.0 + 1.0 / p2)
    raise ValueError(f"unknown family {family!r}")


def component_sample(family: str, p1: np.ndarray, p2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if family == "gauss":
        return p1 + p2 * rng.standard_normal(p1.shape)
    if family == "lognorm":
        return np.exp(p1 + p2 * rng.standard_normal(p1.shape))
    u = rng.random(p1.shape)
    if family == "gompertz":
        return np.log1p(-(p2 / p1) * np.log1p(-u)) / p2
    if family == "weibull":
        return p1 * (-np.log1p(-u)) ** (1.0 / p2)
    raise ValueError(f"unknown family {family!r}")


class MixtureDecoder(Decoder):
    normalized = False

    def __init__(self, params, dim, rng, prefix="dec", family: str = "lognorm", components: int = 3):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        super().__init__(params, dim, rng, prefix)
        self.kind = family
        self.family = family
        self.components = components
        for part in ("logit", "p1", "p2"):
            add_linear(params, f"{prefix}.{part}", dim, components, rng)
        if family in ("gompertz", "weibull"):
            # start from unit rate / shape rather than softplus(0)
            params[f"{prefix}.p1.b"].data[:] = math.log(math.e - 1.0)
        params[f"{prefix}.p2.b"].data[:] = math.log(math.e - 1.0)

    def heads(self, h) -> tuple[Value, Value, Value]:
        logits = linear(self.params, f"{self.prefix}.logit", h)
        p1 = linear(self.params, f"{self.prefix}.p1", h)
        p2 = linear(self.params, f"{self.prefix}.p2", h).softplus() + 1e-6
        if self.family in ("gompertz", "weibull"):
            p1 = p1.softplus() + 1e-6
        return logits, p1, p2

    def loss(self, target, h, rng):
        return mixture_nll(self.family, target, *self.heads(h))

    def _numpy_heads(self, h):
        with no_grad():
            logits, p1, p2 = self.heads(h)
        return ad.softmax(logits).data, p1.data, p2.data

    def mean(self, h):
        w, p1, p2 = self._numpy_heads(h)
        return (w * component_mean(self.family, p1, p2)).sum(axis=-1)

    def sample(self, h, num_samples, rng, record=None):
        w, p1, p2 = self._numpy_heads(h)
        n, C = w.shape
        u = rng.random((n, num_samples))
        comp = (u[..., None] > np.cumsum(w, axis=-1)[:, None, :]).sum(axis=-1)
        comp = np.minimum(comp, C - 1)
        rows = np.arange(n)[:, None]
        return component_sample(self.family, p1[rows, comp], p2[rows, comp], rng)
