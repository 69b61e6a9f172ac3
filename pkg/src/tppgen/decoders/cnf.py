"""Continuous normalising flow on a scalar state, integrated with RK4."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..autodiff import Value, no_grad
from ..errors import ConfigError, SamplerDiverged
from ..nn import CondMLP
from .base import Decoder, Recorder, repeat_rows

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_steps(steps: int) -> None:
    if steps < 2:
        raise ConfigError(f"integrator needs at least 2 steps, got {steps}")


def rk4(field: Callable, x, k0: float, k1: float, steps: int = 100,
        record: Recorder | None = None):
    """Integrate ``dx/dk = field(x, k)`` from ``k0`` to ``k1`` (either direction).

    Works on numpy arrays and on graph values alike.
    """
    _check_steps(steps)
    dk = (k1 - k0) / steps
    for n in range(steps):
        k = k0 + n * dk
        a = field(x, k)
        b = field(x + 0.5 * dk * a, k + 0.5 * dk)
        c = field(x + 0.5 * dk * b, k + 0.5 * dk)
        d = field(x + dk * c, k + dk)
        x = x + (dk / 6.0) * (a + 2.0 * b + 2.0 * c + d)
        if record is not None:
            record(n + 1, n + 1, x.data if isinstance(x, Value) else x)
    return x


def flow_nll(field_slope: Callable, tau, k0: float = 0.0, k1: float = 1.0, steps: int = 100) -> Value:
    """Negative log-density of ``tau`` under the flow started from N(0, 1).

    ``field_slope(x, k)`` returns ``(f, df/dx)``.  The state and the running
    trace integral are carried backward from ``k1`` to ``k0`` together.
    """
    _check_steps(steps)
    x = tau if isinstance(tau, Value) else Value(np.asarray(tau, dtype=np.float64))
    acc = Value(np.zeros(x.shape))
    dk = (k0 - k1) / steps
    for n in range(steps):
        k = k1 + n * dk
        f1, s1 = field_slope(x, k)
        f2, s2 = field_slope(x + 0.5 * dk * f1, k + 0.5 * dk)
        f3, s3 = field_slope(x + 0.5 * dk * f2, k + 0.5 * dk)
        f4, s4 = field_slope(x + dk * f3, k + dk)
        x = x + (dk / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        acc = acc + (dk / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4)
    if not np.all(np.isfinite(x.data)):
        raise SamplerDiverged("flow trajectory diverged")
    # acc integrates the trace from k1 down to k0, i.e. minus the forward integral
    return HALF_LOG_2PI + 0.5 * x * x - acc


class FlowDecoder(Decoder):
    kind = "tccnf"
    iterative = True

    def __init__(self, params, dim, rng, prefix="dec", steps: int = 100,
                 span: tuple[float, float] = (0.0, 1.0)):
        super().__init__(params, dim, rng, prefix)
        _check_steps(steps)
        self.steps = steps
        self.span = span
        self.net = CondMLP(params, f"{prefix}.field", dim, dim, rng)
        params.add(f"{prefix}.wk", rng.uniform(-1.0, 1.0, size=dim))

    def field(self, ctx):
        wk = self._p("wk")
        return lambda x, k: self.net(x, ctx=ctx, extra=k * wk)

    def loss(self, target, h, rng):
        ctx = self.net.context(h)
        wk = self._p("wk")
        return flow_nll(lambda x, k: self.net.with_slope(x, ctx, extra=k * wk), target,
                        *self.span, self.steps)

    def transform(self, z, h):
        with no_grad():
            x = rk4(self.field(self.net.context(h)), Value(z), *self.span, self.steps)
        return x.data

    def inverse(self, tau, h):
        k0, k1 = self.span
        with no_grad():
            x = rk4(self.field(self.net.context(h)), Value(tau), k1, k0, self.steps)
        return x.data

    def sample(self, h, num_samples, rng, record=None):
        hs = repeat_rows(h, num_samples)
        z = rng.standard_normal(hs.shape[0])
        if record is not None:
            record(0, 0, z)
        with no_grad():
            x = rk4(self.field(self.net.context(hs)), Value(z), *self.span, self.steps, record)
        if not np.all(np.isfinite(x.data)):
            raise SamplerDiverged("flow sample diverged")
        return x.data.reshape(-1, num_samples)
