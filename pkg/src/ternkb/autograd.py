"""Minimal reverse-mode autodiff over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in order;
:meth:`Tape.backward` walks the record in exact reverse.  Arrays are N-D so
that batched models avoid per-sample Python loops; every kernel reduces to
2-D row-major algebra on the trailing two axes.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, TrainingError

PROB_EPS = 1e-7

_TAPE_STACK: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; all go through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records primitive operations for one forward pass.

    Use as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad = inp.grad + gi
            # intermediate buffers are not needed after their node has fired
            if node.out.name is None:
                node.out.grad = None


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            if ad.ndim == 1:
                return g * bd, g * ad
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(a.data @ b.data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.data.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape); output ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ConfigError(f"row id out of range [0, {table.data.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# composite kernels


def attention(Q: Tensor, K: Tensor, V: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over the second-to-last axis.

    Inputs are ``(..., F, d)``; each head sees a ``d // heads`` slice and
    scores are scaled by ``1/sqrt(d // heads)``.
    """
    if not (Q.shape == K.shape == V.shape):
        raise ConfigError(f"Q, K, V shapes differ: {Q.shape}, {K.shape}, {V.shape}")
    if heads < 1 or Q.shape[-1] % heads:
        raise ConfigError(f"width {Q.shape[-1]} not divisible by {heads} heads")
    *lead, F, d = Q.shape
    dh = d // heads

    def split(t):
        t = reshape(t, (*lead, F, heads, dh))
        n = len(lead)
        return transpose(t, (*range(n), n + 1, n, n + 2))

    q, k, v = split(Q), split(K), split(V)
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    n = len(lead)
    out = transpose(out, (*range(n), n + 1, n, n + 2))
    return reshape(out, (*lead, F, d))


def mlp_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor, str]]) -> Tensor:
    """Apply ``(weight[in, out], bias[out], activation)`` layers in order."""
    h = x
    for i, (w, b, act) in enumerate(layers):
        if h.shape[-1] != w.shape[0] or w.shape[1] != b.shape[-1]:
            raise ConfigError(f"layer {i}: input width {h.shape[-1]} does not chain into "
                              f"weight {w.shape} / bias {b.shape}")
        h = add(matmul(h, w), b)
        h = activate(h, act)
    return h


def activate(h: Tensor, act: str) -> Tensor:
    if act == "tanh":
        return tanh(h)
    if act == "sigmoid":
        return sigmoid(h)
    if act in ("linear", "identity", None):
        return h
    raise ConfigError(f"unknown activation {act!r}")


def bce_loss(pred: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities, clamped to [eps, 1-eps]."""
    y = np.asarray(labels, dtype=np.float64).reshape(pred.shape)
    n = y.size
    if n == 0:
        raise ValueError("bce_loss of an empty batch")
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n
    inside = (pred.data > PROB_EPS) & (pred.data < 1.0 - PROB_EPS)

    def backward(g):
        return (g * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n,)

    return _make(np.asarray(loss), (pred,), backward)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter map."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], dict]:
    """Functional Adam step; returns new params and new state, inputs untouched.

    ``state`` holds ``m``, ``v`` (dicts shaped like params) and step ``t``;
    pass ``{}`` for a fresh optimiser.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.get("t", 0) + 1
    m_old = state.get("m", {})
    v_old = state.get("v", {})
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        m = beta1 * m_old.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * v_old.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# verification


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-4, max_coords: int = 256, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values on every call.  Coordinates are sampled uniformly across all
    parameters, at most ``max_coords`` of them.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]

    sizes = np.array([p.data.size for p in plist])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= max_coords else rng.choice(total, max_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[pi])
        p = plist[pi]
        view = p.data.reshape(-1)
        orig = view[local]
        view[local] = orig + eps
        f_plus = loss_fn().data.item()
        view[local] = orig - eps
        f_minus = loss_fn().data.item()
        view[local] = orig
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        g_ad = float(analytic[pi].reshape(-1)[local])
        if not (math.isfinite(g_fd) and math.isfinite(g_ad)):
            raise TrainingError(f"non-finite value in grad check at {p.name or pi}[{local}]")
        err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        worst = max(worst, err)
    for p in plist:
        p.grad = None
    return worst
