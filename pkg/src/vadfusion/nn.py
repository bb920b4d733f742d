"""Minimal numpy layers with explicit forward/backward passes.

Everything is dtype-generic: training runs in float32 for byte-stable
checkpoints, gradient checks run the same code in float64. Layers cache
what their backward pass needs; ``grads`` mirror the parameter arrays.
"""

from __future__ import annotations

import numpy as np


def fan_in_uniform(rng: np.random.Generator, n_in: int, n_out: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


class Dense:
    """Affine layer; accepts (..., n_in) inputs (flattened to one GEMM)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        self.W = fan_in_uniform(rng, n_in, n_out, dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        x2 = x.reshape(-1, self.W.shape[0])
        return (x2 @ self.W + self.b).reshape(*x.shape[:-1], self.W.shape[1])

    def backward(self, d):
        x2 = self._x.reshape(-1, self.W.shape[0])
        d2 = d.reshape(-1, self.W.shape[1])
        self.gW = (x2.T @ d2).astype(self.W.dtype)
        self.gb = d2.sum(axis=0).astype(self.b.dtype)
        return (d2 @ self.W.T).reshape(self._x.shape)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, d):
        return d * self._mask


class BatchNorm:
    """1-d batch normalization over axis 0 with running statistics."""

    def __init__(self, n: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(n, dtype=dtype)
        self.beta = np.zeros(n, dtype=dtype)
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x, train: bool):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * var).astype(self.running_var.dtype)
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std, train, x.shape[0])
        return self.gamma * xhat + self.beta

    def backward(self, d):
        xhat, inv_std, train, n = self._cache
        self.ggamma = (d * xhat).sum(axis=0).astype(self.gamma.dtype)
        self.gbeta = d.sum(axis=0).astype(self.beta.dtype)
        dxhat = d * self.gamma
        if not train:
            return dxhat * inv_std
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class LayerNorm:
    """Normalization over the last axis with learnable gain and bias."""

    def __init__(self, n: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = np.ones(n, dtype=dtype)
        self.beta = np.zeros(n, dtype=dtype)
        self.eps = eps
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std)
        return self.gamma * xhat + self.beta

    def backward(self, d):
        xhat, inv_std = self._cache
        axes = tuple(range(d.ndim - 1))
        self.ggamma = (d * xhat).sum(axis=axes).astype(self.gamma.dtype)
        self.gbeta = d.sum(axis=axes).astype(self.beta.dtype)
        dxhat = d * self.gamma
        n = xhat.shape[-1]
        return (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )


class SelfAttention:
    """Multi-head self-attention over (B, T, D) token stacks.

    Scores are softmax(Q K^T / sqrt(c)) with c the per-head feature
    dimension; no output projection and no positional encoding.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.Wq = fan_in_uniform(rng, dim, dim, dtype)
        self.Wk = fan_in_uniform(rng, dim, dim, dtype)
        self.Wv = fan_in_uniform(rng, dim, dim, dtype)
        self.bq = np.zeros(dim, dtype=dtype)
        self.bk = np.zeros(dim, dtype=dtype)
        self.bv = np.zeros(dim, dtype=dtype)
        for name in ("Wq", "Wk", "Wv", "bq", "bk", "bv"):
            setattr(self, "g" + name, np.zeros_like(getattr(self, name)))
        self._cache = None

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def forward(self, x):
        x2 = x.reshape(-1, self.dim)
        shape = x.shape
        q = self._split((x2 @ self.Wq + self.bq).reshape(shape))
        k = self._split((x2 @ self.Wk + self.bk).reshape(shape))
        v = self._split((x2 @ self.Wv + self.bv).reshape(shape))
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = (q @ k.swapaxes(-1, -2)) * scale
        attn = softmax(scores, axis=-1)
        out = attn @ v
        self._cache = (x, q, k, v, attn, scale)
        return self._merge(out)

    def backward(self, d):
        x, q, k, v, attn, scale = self._cache
        d4 = self._split(d)
        dattn = d4 @ v.swapaxes(-1, -2)
        dv = attn.swapaxes(-1, -2) @ d4
        # softmax backward, row-wise over the key axis
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.swapaxes(-1, -2) @ q) * scale

        dq2, dk2, dv2 = (self._merge(a).reshape(-1, self.dim) for a in (dq, dk, dv))
        x2 = x.reshape(-1, self.dim)
        self.gWq = (x2.T @ dq2).astype(self.Wq.dtype)
        self.gWk = (x2.T @ dk2).astype(self.Wk.dtype)
        self.gWv = (x2.T @ dv2).astype(self.Wv.dtype)
        self.gbq = dq2.sum(axis=0).astype(self.bq.dtype)
        self.gbk = dk2.sum(axis=0).astype(self.bk.dtype)
        self.gbv = dv2.sum(axis=0).astype(self.bv.dtype)
        return (dq2 @ self.Wq.T + dk2 @ self.Wk.T + dv2 @ self.Wv.T).reshape(x.shape)


class Adam:
    """Adaptive-moment optimizer; weight decay is added to the gradient."""

    def __init__(self, params: list[np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g + self.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.m = [np.asarray(a, dtype=p.dtype).copy() for a, p in zip(state["m"], self.params)]
        self.v = [np.asarray(a, dtype=p.dtype).copy() for a, p in zip(state["v"], self.params)]
