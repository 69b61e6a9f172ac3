"""History encoders: event embedding, GRU/LSTM and (revised) causal attention.

All encoders work on right-padded batches and return a tensor ``H`` of shape
``(B, L + 1, D)`` where ``H[:, i]`` summarises the first ``i`` events, so
``H[:, 0]`` is the zero vector and ``H[:, i - 1]`` conditions event ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .data import Batch
from .errors import ConfigError
from .nn import add_linear, linear, uniform_weight

VARIANTS = ("gru", "lstm", "att", "revatt")
MASKED_LOGIT = -1e9
SIM_ZERO_TOL = 1e-12


@dataclass
class EncoderConfig:
    variant: str = "revatt"
    dim: int = 16
    layers: int = 1
    num_marks: int = 1
    time_style: str = "positional"   # or "interval" (separate sin/cos frequencies)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder {self.variant!r}")
        if self.dim < 4 or self.dim % 4:
            raise ConfigError(f"dim must be a positive multiple of 4, got {self.dim}")
        if not 1 <= self.layers <= 3:
            raise ConfigError("layers must be 1, 2 or 3")
        if self.time_style not in ("positional", "interval"):
            raise ConfigError(f"unknown time style {self.time_style!r}")


# -- embedding -----------------------------------------------------------------

def unit_rows(E: Value) -> Value:
    return E / ((E * E).sum(axis=1, keepdims=True)).sqrt()


def time_features(tau, positions, omega1, omega2, style: str = "positional") -> Value:
    """Interleaved ``[sin, cos]`` pairs, one pair per frequency.

    positional: ``sin/cos(w1 * j + w2 * tau)``; interval: ``sin(w1 * tau)``,
    ``cos(w2 * tau)``.
    """
    tau = np.asarray(tau, dtype=np.float64)[..., None]
    if style == "positional":
        theta = omega1 * np.asarray(positions, dtype=np.float64)[..., None] + omega2 * tau
        s, c = theta.sin(), theta.cos()
    else:
        s, c = (omega1 * tau).sin(), (omega2 * tau).cos()
    pairs = ad.stack([s, c], axis=-1)
    return pairs.reshape(*pairs.shape[:-2], pairs.shape[-2] * 2)


def type_similarity_matrix(E) -> np.ndarray:
    """Cosine similarity between type embeddings (rows normalised)."""
    E = np.asarray(E.data if isinstance(E, Value) else E, dtype=np.float64)
    U = E / np.linalg.norm(E, axis=1, keepdims=True)
    S = U @ U.T
    np.fill_diagonal(S, 1.0)
    return S


class Encoder:
    def __init__(self, config: EncoderConfig, params: ParamStore, rng: np.random.Generator,
                 prefix: str = "enc"):
        config.validate()
        self.config = config
        self.params = params
        self.prefix = prefix
        D, M = config.dim, config.num_marks
        nf = D // 4
        # geometric spread of frequencies so that both fine and coarse scales are visible
        params.add(f"{prefix}.omega1", np.logspace(0, -3, nf))
        params.add(f"{prefix}.omega2", np.logspace(1, -2, nf))
        params.add(f"{prefix}.E", rng.normal(size=(M, D // 2)))
        v = config.variant
        for l in range(config.layers):
            p = f"{prefix}.l{l}"
            if v == "gru":
                for g in ("z", "r", "n"):
                    add_linear(params, f"{p}.W{g}", D, D, rng)
                    add_linear(params, f"{p}.U{g}", D, D, rng, bias=False)
            elif v == "lstm":
                for g in ("i", "f", "o", "c"):
                    add_linear(params, f"{p}.W{g}", D, D, rng)
                    add_linear(params, f"{p}.U{g}", D, D, rng, bias=False)
            else:
                for g in ("Q", "K", "V"):
                    params.add(f"{p}.W{g}", uniform_weight(rng, D, (D, D)))
                if v == "revatt":
                    params.add(f"{p}.a", np.zeros(()))
                if l < config.layers - 1:
                    add_linear(params, f"{p}.ff1", D, 2 * D, rng)
                    add_linear(params, f"{p}.ff2", 2 * D, D, rng)

    def _p(self, key: str) -> Value:
        return self.params[f"{self.prefix}.{key}"]

    @property
    def dim(self) -> int:
        return self.config.dim

    def embed(self, tau, marks, positions) -> Value:
        t = time_features(tau, positions, self._p("omega1"), self._p("omega2"),
                          self.config.time_style)
        types = ad.take_rows(unit_rows(self._p("E")), marks)
        return ad.concat([t, types], axis=-1)

    def similarity(self) -> np.ndarray:
        return type_similarity_matrix(self._p("E"))

    def __call__(self, batch: Batch) -> Value:
        B, L = batch.shape
        pos = np.broadcast_to(np.arange(1, L + 1), (B, L))
        x = self.embed(batch.tau, batch.marks, pos)
        if self.config.variant in ("gru", "lstm"):
            out = self._recurrent(x)
        else:
            out = self._attend(x, batch)
        zero = Value(np.zeros((B, 1, self.dim)))
        return ad.concat([zero, out], axis=1)

    # -- recurrent -------------------------------------------------------------
    def _gru_step(self, p: str, x: Value, h: Value) -> Value:
        z = (linear(self.params, f"{p}.Wz", x) + linear(self.params, f"{p}.Uz", h)).sigmoid()
        r = (linear(self.params, f"{p}.Wr", x) + linear(self.params, f"{p}.Ur", h)).sigmoid()
        n = (linear(self.params, f"{p}.Wn", x) + linear(self.params, f"{p}.Un", r * h)).tanh()
        return (1.0 - z) * n + z * h

    def _lstm_step(self, p: str, x: Value, h: Value, c: Value) -> tuple[Value, Value]:
        gate = lambda g: linear(self.params, f"{p}.W{g}", x) + linear(self.params, f"{p}.U{g}", h)
        i, f, o = gate("i").sigmoid(), gate("f").sigmoid(), gate("o").sigmoid()
        c = f * c + i * gate("c").tanh()
        return o * c.tanh(), c

    def _recurrent(self, x: Value) -> Value:
        B, L, D = x.shape
        seq = [x[:, i] for i in range(L)]
        for l in range(self.config.layers):
            p = f"{self.prefix}.l{l}"
            h = Value(np.zeros((B, D)))
            c = Value(np.zeros((B, D)))
            outs = []
            for xi in seq:
                if self.config.variant == "gru":
                    h = self._gru_step(p, xi, h)
                else:
                    h, c = self._lstm_step(p, xi, h, c)
                outs.append(h)
            seq = outs
        return ad.stack(seq, axis=1)

    # -- attention -------------------------------------------------------------
    def attention_weights(self, x: Value, batch: Batch | None, layer: int = 0) -> Value:
        """Causal weights ``w[b, q, j]`` of key ``j`` for query ``q``."""
        p = f"{self.prefix}.l{layer}"
        B, L, D = x.shape
        keys = ad.matmul(x, self._p(f"l{layer}.WQ"))
        query = ad.matmul(x, self._p(f"l{layer}.WK"))
        phi = ad.matmul(query, keys.swapaxes(-1, -2)) * (1.0 / np.sqrt(D))
        causal = np.tril(np.ones((L, L), dtype=bool))[None]
        logits = phi
        if self.config.variant == "revatt":
            logits, nonzero = self._revise(phi, batch, f"{p}.a")
            logits = ad.where(nonzero, logits, MASKED_LOGIT)
        logits = ad.where(np.broadcast_to(causal, (B, L, L)), logits, -np.inf)
        return ad.softmax(logits, axis=-1)

    def _revise(self, phi: Value, batch: Batch, a_name: str) -> tuple[Value, np.ndarray]:
        B, L, _ = phi.shape
        M = self.config.num_marks
        U = unit_rows(self._p("E"))
        sim_table = ad.matmul(U, U.T).reshape(M * M, 1)
        pair = batch.marks[:, :, None] * M + batch.marks[:, None, :]
        sim = ad.take_rows(sim_table, pair).reshape(B, L, L)
        dt = batch.times[:, :, None] - batch.times[:, None, :]
        dt = np.where(dt > 0, dt, 0.0)              # future pairs are masked anyway
        recency = (self.params[a_name] * dt).exp()
        nonzero = np.abs(sim.data) > SIM_ZERO_TOL
        return sim * recency * phi, nonzero

    def _attend(self, x: Value, batch: Batch) -> Value:
        for l in range(self.config.layers):
            w = self.attention_weights(x, batch, l)
            att = ad.matmul(w, ad.matmul(x, self._p(f"l{l}.WV")))
            if l == self.config.layers - 1:
                return att
            x = x + att
            p = f"{self.prefix}.l{l}"
            x = x + linear(self.params, f"{p}.ff2", linear(self.params, f"{p}.ff1", x).relu())
        raise AssertionError("unreachable")
