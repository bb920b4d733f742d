"""Embedding fusion and the two classifier heads.

The token path stacks 10 visual tokens over 10 replicated text tokens
into a 20x512 input for a small self-attention network; the vector path
mean-pools the visual tokens and concatenates the text embedding into a
single 1024-vector for a dense network. Both end in one logit trained
with binary cross-entropy on logits.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NonFiniteLogit, ReplicationError, ShapeMismatch
from .nn import BatchNorm, Dense, LayerNorm, ReLU, SelfAttention, softmax

VISUAL_TOKENS = 10
FUSED_TOKENS = 20
TOKEN_DIM = 512
MLP_INPUT_DIM = 2 * TOKEN_DIM


def _check_pair(visual_tokens: np.ndarray, text_tokens: np.ndarray):
    visual_tokens = np.asarray(visual_tokens)
    text_tokens = np.asarray(text_tokens)
    if visual_tokens.ndim != 2 or text_tokens.ndim != 2:
        raise ShapeMismatch("visual and text embeddings must be 2-d matrices")
    if visual_tokens.shape != text_tokens.shape:
        raise ShapeMismatch(
            f"visual {visual_tokens.shape} and text {text_tokens.shape} shapes differ"
        )
    if not np.all(text_tokens == text_tokens[0]):
        raise ReplicationError("text embedding rows are not identical; replicate the caption vector first")
    return visual_tokens, text_tokens


def fuse_for_transformer(visual_tokens: np.ndarray, text_tokens: np.ndarray) -> np.ndarray:
    """Row-stack visual tokens over replicated text tokens -> (2N, D)."""
    visual_tokens, text_tokens = _check_pair(visual_tokens, text_tokens)
    return np.vstack([visual_tokens, text_tokens])


def fuse_for_mlp(visual_tokens: np.ndarray, text_tokens: np.ndarray) -> np.ndarray:
    """Mean-pool visual rows, concatenate one text row -> (2D,)."""
    visual_tokens, text_tokens = _check_pair(visual_tokens, text_tokens)
    return np.concatenate([visual_tokens.mean(axis=0), text_tokens[0]])


def self_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, return_weights: bool = False):
    """Single-shot attention: softmax(Q K^T / sqrt(c)) V, c = K's feature dim."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionMismatch("Q, K, V must be 2-d matrices")
    if Q.shape[1] != K.shape[1]:
        raise DimensionMismatch(f"Q feature dim {Q.shape[1]} != K feature dim {K.shape[1]}")
    if not (Q.shape[0] == K.shape[0] == V.shape[0]):
        raise DimensionMismatch("Q, K, V must have equal row counts")
    weights = softmax(Q @ K.T / np.sqrt(K.shape[1]), axis=-1)
    out = weights @ V
    return (out, weights) if return_weights else out


def bce_with_logits(logits, labels):
    """Numerically stable binary cross-entropy on raw logits.

    loss = max(z, 0) - z*y + log(1 + exp(-|z|)), elementwise.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogit("logits contain non-finite values")
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits_grad(logits, labels):
    """d loss / d logit = sigmoid(z) - y."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogit("logits contain non-finite values")
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))) - y


class MlpFusionNet:
    """Dense classifier over the 1024-dim fused vector.

    ``layer_sizes`` is the dense-layer dimension ladder ending at the
    single logit: the default (1024, 512, 256, 1) gives weight shapes
    1024->512 and 512->256, each followed by batch normalization and a
    rectifier, and a bare 256->1 classification layer.
    """

    def __init__(self, layer_sizes: tuple[int, ...] = (MLP_INPUT_DIM, 512, 256, 1),
                 seed: int = 0, dtype=np.float32):
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input size and the output size")
        if layer_sizes[-1] != 1:
            raise ValueError("the final layer emits one logit; layer_sizes must end in 1")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.blocks = []
        for n_in, n_out in zip(self.layer_sizes[:-2], self.layer_sizes[1:-1]):
            self.blocks.append((Dense(n_in, n_out, rng, dtype), BatchNorm(n_out, dtype), ReLU()))
        self.out = Dense(self.layer_sizes[-2], 1, rng, dtype)
        self.grads: dict[str, np.ndarray] = {}

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"expected (batch, {self.input_dim}) input, got {x.shape}")
        for dense, bn, relu in self.blocks:
            x = relu.forward(bn.forward(dense.forward(x), train))
        return self.out.forward(x)[:, 0]

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.out.backward(np.asarray(dlogits, dtype=self.dtype)[:, None])
        for dense, bn, relu in reversed(self.blocks):
            d = dense.backward(bn.backward(relu.backward(d)))
        self.grads = {name: g for name, g in self._grad_items()}
        return d

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, (dense, bn, _) in enumerate(self.blocks):
            items += [(f"dense{i}.W", dense.W), (f"dense{i}.b", dense.b),
                      (f"bn{i}.gamma", bn.gamma), (f"bn{i}.beta", bn.beta)]
        items += [("out.W", self.out.W), ("out.b", self.out.b)]
        return items

    def _grad_items(self):
        for i, (dense, bn, _) in enumerate(self.blocks):
            yield f"dense{i}.W", dense.gW
            yield f"dense{i}.b", dense.gb
            yield f"bn{i}.gamma", bn.ggamma
            yield f"bn{i}.beta", bn.gbeta
        yield "out.W", self.out.gW
        yield "out.b", self.out.gb

    def buffer_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, (_, bn, _) in enumerate(self.blocks):
            items += [(f"bn{i}.running_mean", bn.running_mean), (f"bn{i}.running_var", bn.running_var)]
        return items

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, arr in self.param_items() + self.buffer_items():
            src = np.asarray(tensors[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ShapeMismatch(f"{name}: stored shape {src.shape} != expected {arr.shape}")
            arr[...] = src

    def arch_id(self) -> str:
        return "mlp:" + "-".join(str(s) for s in self.layer_sizes)


class TransformerFusionNet:
    """Self-attention classifier over the 20x512 fused token stack.

    Input tokens pass through a normalization layer, 2-head self-attention,
    and two widening dense projections (512->768, then 768->768); tokens
    are mean-pooled (no class token, no positional encoding) and classified
    through a two-layer head wrapped in two normalization layers.
    """

    def __init__(self, dim: int = TOKEN_DIM, heads: int = 2, proj_dim: int = 768,
                 head_hidden: int = 256, seed: int = 0, dtype=np.float32):
        self.dim = dim
        self.heads = heads
        self.proj_dim = proj_dim
        self.head_hidden = head_hidden
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.in_norm = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.proj1 = Dense(dim, proj_dim, rng, dtype)
        self.proj_act = ReLU()
        self.proj2 = Dense(proj_dim, proj_dim, rng, dtype)
        self.cls_norm1 = LayerNorm(proj_dim, dtype)
        self.cls1 = Dense(proj_dim, head_hidden, rng, dtype)
        self.cls_act = ReLU()
        self.cls_norm2 = LayerNorm(head_hidden, dtype)
        self.cls2 = Dense(head_hidden, 1, rng, dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._n_tokens = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ShapeMismatch(f"expected (batch, tokens, {self.dim}) input, got {x.shape}")
        self._n_tokens = x.shape[1]
        h = self.in_norm.forward(x)
        h = self.attn.forward(h)
        h = self.proj2.forward(self.proj_act.forward(self.proj1.forward(h)))
        pooled = h.mean(axis=1)
        z = self.cls_norm1.forward(pooled)
        z = self.cls_act.forward(self.cls1.forward(z))
        z = self.cls_norm2.forward(z)
        return self.cls2.forward(z)[:, 0]

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.cls2.backward(np.asarray(dlogits, dtype=self.dtype)[:, None])
        d = self.cls_norm2.backward(d)
        d = self.cls1.backward(self.cls_act.backward(d))
        d = self.cls_norm1.backward(d)
        d_tokens = np.repeat(d[:, None, :], self._n_tokens, axis=1) / self._n_tokens
        d_tokens = self.proj1.backward(self.proj_act.backward(self.proj2.backward(d_tokens)))
        d_tokens = self.attn.backward(d_tokens)
        dx = self.in_norm.backward(d_tokens)
        self.grads = {name: g for name, g in self._grad_items()}
        return dx

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        a = self.attn
        return [
            ("in_norm.gamma", self.in_norm.gamma), ("in_norm.beta", self.in_norm.beta),
            ("attn.Wq", a.Wq), ("attn.Wk", a.Wk), ("attn.Wv", a.Wv),
            ("attn.bq", a.bq), ("attn.bk", a.bk), ("attn.bv", a.bv),
            ("proj1.W", self.proj1.W), ("proj1.b", self.proj1.b),
            ("proj2.W", self.proj2.W), ("proj2.b", self.proj2.b),
            ("cls_norm1.gamma", self.cls_norm1.gamma), ("cls_norm1.beta", self.cls_norm1.beta),
            ("cls1.W", self.cls1.W), ("cls1.b", self.cls1.b),
            ("cls_norm2.gamma", self.cls_norm2.gamma), ("cls_norm2.beta", self.cls_norm2.beta),
            ("cls2.W", self.cls2.W), ("cls2.b", self.cls2.b),
        ]

    def _grad_items(self):
        a = self.attn
        pairs = [
            ("in_norm.gamma", self.in_norm.ggamma), ("in_norm.beta", self.in_norm.gbeta),
            ("attn.Wq", a.gWq), ("attn.Wk", a.gWk), ("attn.Wv", a.gWv),
            ("attn.bq", a.gbq), ("attn.bk", a.gbk), ("attn.bv", a.gbv),
            ("proj1.W", self.proj1.gW), ("proj1.b", self.proj1.gb),
            ("proj2.W", self.proj2.gW), ("proj2.b", self.proj2.gb),
            ("cls_norm1.gamma", self.cls_norm1.ggamma), ("cls_norm1.beta", self.cls_norm1.gbeta),
            ("cls1.W", self.cls1.gW), ("cls1.b", self.cls1.gb),
            ("cls_norm2.gamma", self.cls_norm2.ggamma), ("cls_norm2.beta", self.cls_norm2.gbeta),
            ("cls2.W", self.cls2.gW), ("cls2.b", self.cls2.gb),
        ]
        yield from pairs

    def buffer_items(self) -> list[tuple[str, np.ndarray]]:
        return []

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, arr in self.param_items():
            src = np.asarray(tensors[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ShapeMismatch(f"{name}: stored shape {src.shape} != expected {arr.shape}")
            arr[...] = src

    def arch_id(self) -> str:
        return f"transformer:d{self.dim}-h{self.heads}-p{self.proj_dim}-c{self.head_hidden}"
