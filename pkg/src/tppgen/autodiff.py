"""Reverse-mode automatic differentiation over small numpy arrays.

Every node of the graph is a :class:`Value` wrapping a float64 array (a 0-d
array for scalars).  Each node keeps ``(parent, vjp)`` pairs, where ``vjp``
maps the upstream gradient to the contribution for that parent.  Broadcasting
is limited to what numpy does for elementwise ops; gradients are summed back
to the parent's shape.
"""

from __future__ import annotations

import contextlib
import json
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import CheckpointError, NonFiniteGradient, NonFiniteLoss

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build values without recording parents (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "parents", "op", "name", "requires_grad")
    __array_ufunc__ = None   # make ``ndarray <op> Value`` defer to the reflected method

    def __init__(self, data, parents=(), op: str = "", name: str | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents if _GRAD_ENABLED else ()
        self.op = op
        self.name = name
        self.requires_grad = requires_grad or bool(self.parents)

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents, op):
        if not _GRAD_ENABLED:
            return Value(data, (), op)
        live = tuple((p, f) for p, f in parents if p.requires_grad)
        return Value(data, live, op)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Value(op={self.op!r}, shape={self.data.shape})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_value(other)
        a, b = self, other
        return Value._make(a.data + b.data, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ), "add")

    __radd__ = __add__

    def __neg__(self):
        return Value._make(-self.data, ((self, lambda g: -g),), "neg")

    def __sub__(self, other):
        other = as_value(other)
        a, b = self, other
        return Value._make(a.data - b.data, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ), "sub")

    def __rsub__(self, other):
        return as_value(other) - self

    def __mul__(self, other):
        other = as_value(other)
        a, b = self, other
        return Value._make(a.data * b.data, (
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other)
        a, b = self, other
        out = a.data / b.data
        return Value._make(out, (
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
        ), "div")

    def __rtruediv__(self, other):
        return as_value(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Value):
            raise TypeError("only constant exponents are supported")
        a = self
        return Value._make(a.data ** p, (
            (a, lambda g: g * p * a.data ** (p - 1)),
        ), f"pow{p}")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_value(other), self)

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]

        def vjp(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return full

        return Value._make(out, ((a, vjp),), "getitem")

    # -- shape ops ------------------------------------------------------------
    def reshape(self, *shape):
        a = self
        return Value._make(a.data.reshape(*shape), ((a, lambda g: g.reshape(a.shape)),), "reshape")

    @property
    def T(self):
        return self.transpose()

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Value._make(a.data.transpose(axes), ((a, lambda g: g.transpose(inv)),), "transpose")

    def swapaxes(self, i, j):
        a = self
        return Value._make(np.swapaxes(a.data, i, j), ((a, lambda g: np.swapaxes(g, i, j)),), "swapaxes")

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape).copy()

        return Value._make(out, ((a, vjp),), "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions -----------------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)
        return Value._make(out, ((a, lambda g: g * out),), "exp")

    def log(self):
        a = self
        return Value._make(np.log(a.data), ((a, lambda g: g / a.data),), "log")

    def sin(self):
        a = self
        return Value._make(np.sin(a.data), ((a, lambda g: g * np.cos(a.data)),), "sin")

    def cos(self):
        a = self
        return Value._make(np.cos(a.data), ((a, lambda g: -g * np.sin(a.data)),), "cos")

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Value._make(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)
        return Value._make(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")

    def softplus(self):
        a = self
        out = np.logaddexp(0.0, a.data)
        return Value._make(out, ((a, lambda g: g * _sigmoid(a.data)),), "softplus")

    def relu(self):
        a = self
        mask = a.data > 0
        return Value._make(a.data * mask, ((a, lambda g: g * mask),), "relu")

    def abs(self):
        a = self
        return Value._make(np.abs(a.data), ((a, lambda g: g * np.sign(a.data)),), "abs")

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Value._make(out, ((a, lambda g: g * 0.5 / out),), "sqrt")

    def square(self):
        a = self
        return Value._make(a.data * a.data, ((a, lambda g: 2.0 * g * a.data),), "square")

    def clamp_min(self, lo: float):
        a = self
        mask = a.data >= lo
        return Value._make(np.where(mask, a.data, lo), ((a, lambda g: g * mask),), "clamp_min")

    def backward(self) -> dict:
        return backward(self)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x) -> Value:
    return Value(x)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.expand_dims(g, -1) * bd
        elif ad.ndim == 1:
            ga = np.matmul(bd, np.expand_dims(g, -1))[..., 0]
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        return _unbroadcast(ga, ad.shape)

    def vjp_b(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            gb = np.expand_dims(ad, -1) * np.expand_dims(g, -2)
        elif bd.ndim == 1:
            gb = np.matmul(np.swapaxes(ad, -1, -2), np.expand_dims(g, -1))[..., 0]
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(gb, bd.shape)

    return Value._make(out, ((a, vjp_a), (b, vjp_b)), "matmul")


def concat(values: Iterable, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in vals], axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parents = []
    for i, v in enumerate(vals):
        parents.append((v, (lambda i: lambda g: np.split(g, sizes, axis=axis)[i])(i)))
    return Value._make(out, tuple(parents), "concat")


def stack(values: Iterable, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    out = np.stack([v.data for v in vals], axis=axis)
    parents = []
    for i, v in enumerate(vals):
        parents.append((v, (lambda i: lambda g: np.take(g, i, axis=axis))(i)))
    return Value._make(out, tuple(parents), "stack")


def where(mask: np.ndarray, a, b) -> Value:
    """Select ``a`` where mask is true, else ``b``; mask is a constant."""
    a, b = as_value(a), as_value(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return Value._make(out, (
        (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)),
        (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    ), "where")


def softmax(x: Value, axis: int = -1) -> Value:
    x = as_value(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return Value._make(out, ((x, vjp),), "softmax")


def logsumexp(x: Value, axis: int = -1) -> Value:
    x = as_value(x)
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = np.squeeze(out_k, axis=axis)

    def vjp(g):
        return np.expand_dims(g, axis) * np.exp(x.data - out_k)

    return Value._make(out, ((x, vjp),), "logsumexp")


def log_softmax(x: Value, axis: int = -1) -> Value:
    x = as_value(x)
    lse = logsumexp(x, axis=axis)
    return x - expand_dims(lse, axis)


def expand_dims(x: Value, axis: int) -> Value:
    x = as_value(x)
    return Value._make(np.expand_dims(x.data, axis), ((x, lambda g: np.squeeze(g, axis=axis)),), "expand")


def take_rows(table: Value, idx: np.ndarray) -> Value:
    """Gather rows ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        flat_g = g.reshape(-1, table.shape[-1])
        np.add.at(full, idx.reshape(-1), flat_g)
        return full

    return Value._make(out, ((table, vjp),), "take_rows")


def pick(x: Value, idx: np.ndarray) -> Value:
    """``x[..., idx]`` along the last axis, one index per leading row."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return full

    return Value._make(out, ((x, vjp),), "pick")


def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack_: list[tuple[Value, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Value, params: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Populate ``grad`` on every node reachable from scalar ``root``.

    Returns a map from parameter name to gradient.  When ``params`` is given,
    parameters the root does not depend on get a zero gradient.
    """
    if root.data.size != 1:
        raise ValueError("backward needs a scalar root")
    if not np.isfinite(root.data).all():
        raise NonFiniteLoss(f"loss is {root.data!r}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + contrib
    grads = {node.name: node.grad for node in order if node.name is not None and not node.parents}
    if params is not None:
        return {name: grads.get(name, np.zeros_like(p.data)) for name, p in params.items()}
    return grads


class ParamStore:
    """Named trainable arrays plus adaptive-moment optimizer state."""

    def __init__(self):
        self._params: OrderedDict[str, Value] = OrderedDict()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, init: np.ndarray) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Value(np.array(init, dtype=np.float64), name=name, requires_grad=True)
        self._params[name] = p
        self._m[name] = np.zeros_like(p.data)
        self._v[name] = np.zeros_like(p.data)
        self._t[name] = 0
        return p

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    @property
    def num_scalars(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def shapes(self) -> dict[str, list[int]]:
        return {n: list(p.data.shape) for n, p in self._params.items()}

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.data.ravel() for p in self._params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_scalars:
            raise CheckpointError(f"expected {self.num_scalars} scalars, got {flat.size}")
        i = 0
        for p in self._params.values():
            n = p.data.size
            p.data = flat[i:i + n].reshape(p.data.shape).copy()
            i += n

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self._params[n].data = arr.copy()


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              names: Iterable[str] | None = None) -> None:
    """One adaptive-moment update of ``params`` (restricted to ``names`` if given).

    Step counters live per parameter, so two optimizers over disjoint name
    sets (generator / critic) keep independent bias corrections.
    """
    b1, b2 = betas
    selected = list(names) if names is not None else list(params)
    for name in selected:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    for name in selected:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name].data)
        t = params._t[name] = params._t[name] + 1
        m = params._m[name] = b1 * params._m[name] + (1.0 - b1) * g
        v = params._v[name] = b2 * params._v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p = params[name]
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def finite_diff_check(loss_fn: Callable[[], Value], params: ParamStore, h: float = 1e-5,
                      tol: float = 1e-4, names: Iterable[str] | None = None,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      abs_floor: float = 1e-8) -> dict[str, dict]:
    """Compare autodiff gradients against central differences.

    ``loss_fn`` must be deterministic (fix any noise it draws).  The report
    maps parameter name to ``{"max_rel_err", "passed"}`` where the relative
    error is ``|g_ad - g_fd| / (|g_fd| + abs_floor)``.  ``max_entries``
    subsamples coordinates of large parameters.
    """
    root = loss_fn()
    grads = backward(root, params)
    report = {}
    for name in (names if names is not None else list(params)):
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        g_ad = grads[name].reshape(-1)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            g_fd = (up - down) / (2.0 * h)
            err = abs(g_ad[i] - g_fd) / (abs(g_fd) + abs_floor)
            worst = max(worst, err)
        report[name] = {"max_rel_err": worst, "passed": bool(worst <= tol)}
    return report


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"TPPCKPT1"


def save_checkpoint(path, params: ParamStore, header: dict) -> None:
    """JSON header followed by every parameter as little-endian float64."""
    head = dict(header)
    head["shapes"] = params.shapes()
    head["order"] = list(params)
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.flat().astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return header, flat


def load_into(params: ParamStore, header: dict, flat: np.ndarray) -> None:
    if header.get("order") != list(params) or header.get("shapes") != params.shapes():
        raise CheckpointError("checkpoint parameter layout does not match the model")
    params.load_flat(flat)
