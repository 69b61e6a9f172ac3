"""Small layer helpers shared by encoders and decoders."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore, Value, _unbroadcast, as_value, matmul


def uniform_weight(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def add_linear(params: ParamStore, name: str, n_in: int, n_out: int,
               rng: np.random.Generator, bias: bool = True) -> None:
    params.add(f"{name}.W", uniform_weight(rng, n_in, (n_in, n_out)))
    if bias:
        params.add(f"{name}.b", np.zeros(n_out))


def linear(params: ParamStore, name: str, x) -> Value:
    y = matmul(x, params[f"{name}.W"])
    b = f"{name}.b"
    return y + params[b] if b in params else y


class CondMLP:
    """Scalar-in, scalar-out network conditioned on a history vector.

    ``out = w3 . (u + tanh(W2 u + b2)) + b3`` with
    ``u = tanh(Wh h + wt x + extra)``.  ``extra`` is an optional additive
    code (the diffusion step embedding, a noise-level code, or a latent
    projection).  Inputs broadcast: ``x`` has shape ``(N,)``, ``h`` ``(N, D)``
    or ``(D,)``.
    """

    def __init__(self, params: ParamStore, prefix: str, dim: int, hidden: int,
                 rng: np.random.Generator, in_dim: int = 1):
        self.params = params
        self.prefix = prefix
        self.dim = dim
        self.hidden = hidden
        self.in_dim = in_dim
        params.add(f"{prefix}.Wh", uniform_weight(rng, dim, (dim, hidden)))
        params.add(f"{prefix}.wt", uniform_weight(rng, in_dim, (in_dim, hidden)))
        params.add(f"{prefix}.b1", np.zeros(hidden))
        params.add(f"{prefix}.W2", uniform_weight(rng, hidden, (hidden, hidden)))
        params.add(f"{prefix}.b2", np.zeros(hidden))
        params.add(f"{prefix}.w3", uniform_weight(rng, hidden, (hidden,)))
        params.add(f"{prefix}.b3", np.zeros(()))

    def _p(self, key: str) -> Value:
        return self.params[f"{self.prefix}.{key}"]

    def context(self, h) -> Value:
        """The part of the first pre-activation that depends only on ``h``."""
        return matmul(h, self._p("Wh")) + self._p("b1")

    def __call__(self, x, h=None, extra=None, ctx=None) -> Value:
        x = x if isinstance(x, Value) else Value(x)
        ctx = self.context(h) if ctx is None else ctx
        xin = x if self.in_dim > 1 else x.reshape(*x.shape, 1)
        pre = ctx + matmul(xin, self._p("wt"))
        if extra is not None:
            pre = pre + extra
        u = pre.tanh()
        v = u + (matmul(u, self._p("W2")) + self._p("b2")).tanh()
        return matmul(v, self._p("w3")) + self._p("b3")

    def with_slope(self, x, ctx, extra=None) -> tuple[Value, Value]:
        """Output and its derivative with respect to scalar input ``x``.

        Evaluated as a single graph node; the flow likelihood calls this a
        few hundred times per event, so per-node overhead dominates otherwise.
        """
        x = as_value(x)
        ctx = as_value(ctx)
        extra = as_value(np.zeros(self.hidden) if extra is None else extra)
        both = _slope_node(x, ctx, extra, *(self._p(k) for k in ("wt", "W2", "b2", "w3", "b3")))
        return _row(both, 0), _row(both, 1)


def _row(v: Value, i: int) -> Value:
    def vjp(g):
        full = np.zeros_like(v.data)
        full[i] = g
        return full

    return Value._make(v.data[i], ((v, vjp),), "row")


def _slope_node(x: Value, ctx: Value, extra: Value, wt: Value, W2: Value, b2: Value,
                w3: Value, b3: Value) -> Value:
    """Stacked ``[out, d out / dx]`` of the conditioned MLP for 1-D ``x``."""
    X = x.data
    wv = wt.data.reshape(-1)
    a = ctx.data + X[..., None] * wv + extra.data
    u = np.tanh(a)
    p = 1.0 - u * u
    r = np.tanh(u @ W2.data + b2.data)
    s = 1.0 - r * r
    ux = p * wv
    vx = ux @ W2.data
    rx = s * vx
    out = (u + r) @ w3.data + b3.data
    slope = (ux + rx) @ w3.data
    cache: dict = {}

    def grads(g):
        if cache.get("g") is g:
            return cache["grads"]
        go, gs = g[0], g[1]
        w = w3.data
        go_w, gs_w = go[..., None] * w, gs[..., None] * w
        s_bar = gs_w * vx
        vx_bar = gs_w * s
        r_bar = go_w - 2.0 * r * s_bar
        ux_bar = gs_w + vx_bar @ W2.data.T
        q_bar = r_bar * s
        p_bar = ux_bar * wv
        u_bar = go_w + q_bar @ W2.data.T - 2.0 * u * p_bar
        a_bar = u_bar * p
        flat = lambda m: m.reshape(-1, m.shape[-1])
        out_g = {
            "x": (a_bar * wv).sum(axis=-1),
            "ctx": _unbroadcast(a_bar, ctx.shape),
            "extra": _unbroadcast(a_bar, extra.shape),
            "wt": ((ux_bar * p).reshape(-1, wv.size).sum(axis=0)
                   + (a_bar * X[..., None]).reshape(-1, wv.size).sum(axis=0)).reshape(wt.shape),
            "W2": flat(ux).T @ flat(vx_bar) + flat(u).T @ flat(q_bar),
            "b2": flat(q_bar).sum(axis=0),
            "w3": flat(u + r).T @ go.reshape(-1) + flat(ux + rx).T @ gs.reshape(-1),
            "b3": np.asarray(go.sum()),
        }
        cache["g"], cache["grads"] = g, out_g
        return out_g

    parents = tuple((v, (lambda key: lambda g: grads(g)[key])(k))
                    for k, v in (("x", x), ("ctx", ctx), ("extra", extra), ("wt", wt), ("W2", W2),
                                 ("b2", b2), ("w3", w3), ("b3", b3)))
    return Value._make(np.stack([out, slope]), parents, "mlp_slope")
