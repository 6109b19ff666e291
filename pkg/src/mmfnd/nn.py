"""Minimal numpy layers with hand-written backward passes.

Parameters live in one flat ``dict[str, ndarray]`` owned by the model; layers
only remember their parameter names and the activations needed for the
backward pass of the most recent forward call.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

Params = dict[str, np.ndarray]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise binary cross-entropy on logits and its derivative."""
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return loss, sigmoid(logits) - targets


def _accumulate(grads: Params, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy()


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.w, self.b = f"{name}.weight", f"{name}.bias"

    def init(self, params: Params, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.n_in)
        params[self.w] = rng.uniform(-bound, bound, (self.n_in, self.n_out))
        params[self.b] = rng.uniform(-bound, bound, self.n_out)

    def forward(self, params: Params, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.name}: expected last dim {self.n_in}, got {x.shape[-1]}")
        self._x = x
        return x @ params[self.w] + params[self.b]

    def backward(self, params: Params, grads: Params, dy: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        _accumulate(grads, self.w, x2.T @ dy2)
        _accumulate(grads, self.b, dy2.sum(axis=0))
        return dy @ params[self.w].T


class ReLU:
    def forward(self, params, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, params, grads, dy):
        return dy * self._mask


class GELU:
    """Exact (erf-based) GELU."""

    def forward(self, params, x):
        self._x = x
        self._cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        return x * self._cdf

    def backward(self, params, grads, dy):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * self._x**2)
        return dy * (self._cdf + self._x * pdf)


class Tanh:
    def forward(self, params, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, params, grads, dy):
        return dy * (1.0 - self._y**2)


ACTIVATIONS = {"relu": ReLU, "gelu": GELU, "tanh": Tanh}


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def init(self, params, rng):
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(params, rng)

    def forward(self, params, x):
        for layer in self.layers:
            x = layer.forward(params, x)
        return x

    def backward(self, params, grads, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(params, grads, dy)
        return dy


def mlp(name: str, n_in: int, sizes, activations) -> Sequential:
    layers, d = [], n_in
    for k, (size, act) in enumerate(zip(sizes, activations)):
        layers.append(Linear(f"{name}.{k}", d, size))
        layers.append(ACTIVATIONS[act]())
        d = size
    return Sequential(*layers)


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.g, self.b, self.dim, self.eps = f"{name}.gamma", f"{name}.beta", dim, eps

    def init(self, params, rng):
        params[self.g] = np.ones(self.dim)
        params[self.b] = np.zeros(self.dim)

    def forward(self, params, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._inv
        return self._xhat * params[self.g] + params[self.b]

    def backward(self, params, grads, dy):
        lead = tuple(range(dy.ndim - 1))
        _accumulate(grads, self.g, (dy * self._xhat).sum(axis=lead))
        _accumulate(grads, self.b, dy.sum(axis=lead))
        dxhat = dy * params[self.g]
        return self._inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - self._xhat * (dxhat * self._xhat).mean(axis=-1, keepdims=True)
        )


class Embedding:
    def __init__(self, name: str, n: int, dim: int):
        self.w, self.n, self.dim = f"{name}.weight", n, dim

    def init(self, params, rng):
        params[self.w] = rng.normal(0.0, 0.02, (self.n, self.dim))

    def forward(self, params, ids):
        self._ids = ids
        return params[self.w][ids]

    def backward(self, params, grads, dy):
        g = np.zeros((self.n, self.dim), dtype=dy.dtype)
        np.add.at(g, self._ids.reshape(-1), dy.reshape(-1, self.dim))
        _accumulate(grads, self.w, g)
        return None


_MASKED = -1e9


class SelfAttention:
    """Multi-head self-attention over (B, T, H) with a key padding mask."""

    def __init__(self, name: str, dim: int, heads: int):
        if dim % heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        self.heads, self.dh = heads, dim // heads
        self.q, self.k, self.v, self.o = (Linear(f"{name}.{p}", dim, dim) for p in "qkvo")

    def init(self, params, rng):
        for lin in (self.q, self.k, self.v, self.o):
            lin.init(params, rng)

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)

    def forward(self, params, x, mask):
        q = self._split(self.q.forward(params, x))
        k = self._split(self.k.forward(params, x))
        v = self._split(self.v.forward(params, x))
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.dh)
        scores = np.where(mask[:, None, None, :], scores, _MASKED)
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        self._cache = (q, k, v, p)
        return self.o.forward(params, self._merge(p @ v))

    def backward(self, params, grads, dy):
        q, k, v, p = self._cache
        dctx = self._split(self.o.backward(params, grads, dy))
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / np.sqrt(self.dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dx = self.q.backward(params, grads, self._merge(dq))
        dx = dx + self.k.backward(params, grads, self._merge(dk))
        dx = dx + self.v.backward(params, grads, self._merge(dv))
        return dx


class TransformerBlock:
    """Post-norm encoder block: LN(x + attn(x)) then LN(h + ffn(h))."""

    def __init__(self, name: str, dim: int, heads: int, ffn_dim: int):
        self.attn = SelfAttention(f"{name}.attn", dim, heads)
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.ffn = Sequential(Linear(f"{name}.ffn.0", dim, ffn_dim), GELU(), Linear(f"{name}.ffn.1", ffn_dim, dim))
        self.ln2 = LayerNorm(f"{name}.ln2", dim)

    def init(self, params, rng):
        self.attn.init(params, rng)
        self.ln1.init(params, rng)
        self.ffn.init(params, rng)
        self.ln2.init(params, rng)

    def forward(self, params, x, mask):
        h = self.ln1.forward(params, x + self.attn.forward(params, x, mask))
        return self.ln2.forward(params, h + self.ffn.forward(params, h))

    def backward(self, params, grads, dy):
        dsum = self.ln2.backward(params, grads, dy)
        dh = dsum + self.ffn.backward(params, grads, dsum)
        dsum = self.ln1.backward(params, grads, dh)
        return dsum + self.attn.backward(params, grads, dsum)


class Adam:
    """Adam with per-parameter learning rates."""

    def __init__(self, params: Params, lr: float | dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr if isinstance(lr, dict) else {name: lr for name in params}
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
