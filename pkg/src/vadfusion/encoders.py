"""Visual and text embedding extraction.

A frame is resized to the backend's input size, split into a 3x3 grid of
non-overlapping patches, and encoded as 10 tokens (1 whole-crop + 9
patches), each a 512-dim vector. Per-frame token matrices are averaged
over a segment's temporal axis. Captions are encoded once and replicated
to match the visual token count.

Backends are pluggable adapters owning their own preprocessing; seeded
deterministic mocks ship for tests, a tiny trainable linear backbone
supports the fine-tuning path, and a real contrastive image-text encoder
can be attached when its weights are installed.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cache import EmbeddingCache
from .errors import (
    BackendFailure,
    BackendNotTrainable,
    BackendUnavailable,
    EmptyCaption,
    ShapeMismatch,
    TokenLimitExceeded,
    WrongInputSize,
    ZeroNormVector,
)
from .images import image_digest, resize_image

EMBEDDING_DIM = 512
INPUT_SIZE = 224
GRID = 3
TOKENS_PER_FRAME = 1 + GRID * GRID


def _seeded_vector(*parts, dim: int = EMBEDDING_DIM) -> np.ndarray:
    """Deterministic unit vector derived from hashed parts (process-stable)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\x00")
    seed = int.from_bytes(h.digest()[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    vec = rng.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


class EncoderBackend:
    """Adapter contract for image/text encoders.

    Subclasses own preprocessing: encode_image accepts crops at any size
    (patches arrive at their native grid size) and adapts them internally.
    """

    name: str = "base"
    mode: str = "pretrained"
    embedding_dim: int = EMBEDDING_DIM
    input_size: int = INPUT_SIZE
    trainable: bool = False
    max_text_tokens: int | None = 77

    def __init__(self):
        self.image_calls = 0
        self.text_calls = 0

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def encode_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


class MockEncoderBackend(EncoderBackend):
    """Content-hash mock: distinct inputs map to distinct unit vectors."""

    mode = "mock"

    def __init__(self, seed: int = 0, name: str = "mock-hash"):
        super().__init__()
        self.seed = seed
        self.name = name

    def encode_image(self, image):
        self.image_calls += 1
        return _seeded_vector("img", self.seed, image_digest(image))

    def encode_text(self, text):
        self.text_calls += 1
        return _seeded_vector("txt", self.seed, text)


class MeanPixelBackend(EncoderBackend):
    """Mock whose image embedding is filled with the mean pixel value.

    Useful as an analytic oracle (the expected embedding is a one-line
    computation) and for brightness-separable synthetic datasets.
    """

    mode = "mock"

    def __init__(self, seed: int = 0, name: str = "mock-mean"):
        super().__init__()
        self.seed = seed
        self.name = name

    def encode_image(self, image):
        self.image_calls += 1
        mean = float(np.asarray(image, dtype=np.float64).mean()) / 255.0
        return np.full(self.embedding_dim, mean, dtype=np.float32)

    def encode_text(self, text):
        self.text_calls += 1
        return _seeded_vector("txt", self.seed, text)


class TinyLinearBackend(EncoderBackend):
    """Trainable toy backbone: grid-sampled pixels through one dense layer.

    Stands in for a heavyweight visual encoder wherever gradient updates
    must actually happen (fine-tuning path, divergence probes).
    """

    trainable = True
    _SAMPLE = 32  # images are grid-sampled to 32x32 before the dense layer

    def __init__(self, seed: int = 0, name: str = "tiny-linear", mode: str = "pretrained",
                 weights: tuple[np.ndarray, np.ndarray] | None = None):
        super().__init__()
        self.seed = seed
        self.name = name
        self.mode = mode
        n_in = self._SAMPLE * self._SAMPLE * 3
        if weights is not None:
            self.W, self.b = weights
        else:
            rng = np.random.Generator(np.random.PCG64(seed))
            bound = 1.0 / np.sqrt(n_in)
            self.W = rng.uniform(-bound, bound, size=(n_in, self.embedding_dim)).astype(np.float32)
            self.b = np.zeros(self.embedding_dim, dtype=np.float32)

    def features(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float32) / 255.0
        h, w = img.shape[:2]
        rows = np.minimum((np.arange(self._SAMPLE) * h) // self._SAMPLE, h - 1)
        cols = np.minimum((np.arange(self._SAMPLE) * w) // self._SAMPLE, w - 1)
        return img[rows][:, cols].reshape(-1)

    def encode_image(self, image):
        self.image_calls += 1
        return (self.features(image) @ self.W + self.b).astype(np.float32)

    def encode_text(self, text):
        self.text_calls += 1
        return _seeded_vector("txt", self.seed, text)

    def with_weights(self, W, b, mode: str) -> "TinyLinearBackend":
        return TinyLinearBackend(seed=self.seed, name=self.name, mode=mode,
                                 weights=(W.astype(np.float32), b.astype(np.float32)))


class ClipBackend(EncoderBackend):
    """Adapter for a real contrastive image-text encoder (optional).

    Requires torch plus either the ``clip`` or ``open_clip`` package with
    downloadable/installed weights; raises BackendUnavailable otherwise.
    """

    def __init__(self, model_name: str = "RN101", mode: str = "pretrained", device: str = "cpu"):
        super().__init__()
        self.name = f"clip-{model_name.lower().replace('/', '-')}"
        self.mode = mode
        self.device = device
        try:
            import clip  # type: ignore
            import torch  # noqa: F401

            self._model, self._preprocess = clip.load(model_name, device=device)
            self._tokenize = clip.tokenize
            self._flavor = "clip"
        except Exception:
            try:
                import open_clip  # type: ignore
                import torch  # noqa: F401

                self._model, _, self._preprocess = open_clip.create_model_and_transforms(
                    model_name, pretrained="openai", device=device
                )
                self._tokenize = open_clip.get_tokenizer(model_name)
                self._flavor = "open_clip"
            except Exception as exc:
                raise BackendUnavailable(
                    f"no usable contrastive encoder for {model_name!r}: {exc}"
                ) from exc

    def encode_image(self, image):
        import torch
        from PIL import Image

        self.image_calls += 1
        pil = Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB")
        with torch.no_grad():
            tensor = self._preprocess(pil).unsqueeze(0).to(self.device)
            feats = self._model.encode_image(tensor)
        return feats.squeeze(0).cpu().numpy().astype(np.float32)

    def encode_text(self, text):
        import torch

        self.text_calls += 1
        with torch.no_grad():
            tokens = self._tokenize([text]).to(self.device)
            feats = self._model.encode_text(tokens)
        return feats.squeeze(0).cpu().numpy().astype(np.float32)


_BACKENDS = {
    "mock-hash": MockEncoderBackend,
    "mock-mean": MeanPixelBackend,
    "tiny-linear": TinyLinearBackend,
}


def get_backend(name: str, **kwargs) -> EncoderBackend:
    if name in _BACKENDS:
        return _BACKENDS[name](**kwargs)
    if name.startswith("clip-"):
        model = {"clip-rn101": "RN101", "clip-vit-b16": "ViT-B/16"}.get(name, name[5:])
        return ClipBackend(model_name=model, **kwargs)
    raise BackendUnavailable(f"unknown encoder backend {name!r}")


# --- patch tiling ---------------------------------------------------------

def patch_bounds(size: int = INPUT_SIZE) -> list[int]:
    """3x3 grid boundaries; the last cell absorbs the division remainder."""
    base = size // GRID
    return [0, base, 2 * base, size]


def partition_patches(frame: np.ndarray) -> list[np.ndarray]:
    """Split a 224x224 frame into 9 non-overlapping patches, row-major."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != INPUT_SIZE or frame.shape[1] != INPUT_SIZE:
        raise WrongInputSize(
            f"expected a {INPUT_SIZE}x{INPUT_SIZE} image, got shape {frame.shape}"
        )
    bounds = patch_bounds(INPUT_SIZE)
    patches = []
    for r in range(GRID):
        for c in range(GRID):
            patches.append(frame[bounds[r]:bounds[r + 1], bounds[c]:bounds[c + 1]])
    return patches


# --- frame / segment / text encoding --------------------------------------

def encode_frame(frame: np.ndarray, backend: EncoderBackend, frame_ref: str = "") -> np.ndarray:
    """Encode one frame as a (10, 512) token matrix.

    Row 0 is the whole-crop embedding; rows 1-9 the patch embeddings in
    row-major grid order.
    """
    resized = resize_image(frame, backend.input_size)
    inputs = [resized] + partition_patches(resized)
    rows = []
    for i, crop in enumerate(inputs):
        try:
            rows.append(np.asarray(backend.encode_image(crop), dtype=np.float32))
        except Exception as exc:
            raise BackendFailure(
                f"backend {backend.name!r} failed on token {i} of frame {frame_ref or '<array>'}: {exc}"
            ) from exc
    out = np.stack(rows)
    if out.shape != (TOKENS_PER_FRAME, backend.embedding_dim):
        raise ShapeMismatch(f"backend produced {out.shape}, expected {(TOKENS_PER_FRAME, backend.embedding_dim)}")
    return out


def encode_segment(segment, backend: EncoderBackend) -> np.ndarray:
    """Temporal average of the segment's per-frame token matrices -> (10, 512)."""
    if len(segment.frames) != 10:
        raise ShapeMismatch(f"segment {segment.segment_id!r} has {len(segment.frames)} frames, expected 10")
    stack = np.stack([
        encode_frame(f, backend, frame_ref=f"{segment.segment_id}[{i}]")
        for i, f in enumerate(segment.frames)
    ])
    return stack.mean(axis=0)


def encode_text(caption, backend: EncoderBackend, on_overflow: str = "truncate") -> np.ndarray:
    """Encode caption text as a 512-vector.

    Whitespace is normalized first; an empty result raises EmptyCaption.
    Texts beyond the backend token limit are truncated with a warning, or
    rejected when on_overflow="error".
    """
    text = caption.text if hasattr(caption, "text") else caption
    normalized = " ".join(str(text).split())
    if not normalized:
        raise EmptyCaption("caption is empty after whitespace normalization")
    limit = backend.max_text_tokens
    if limit is not None:
        words = normalized.split(" ")
        if len(words) > limit:
            if on_overflow == "error":
                raise TokenLimitExceeded(f"caption has {len(words)} tokens, backend limit is {limit}")
            warnings.warn(f"caption truncated from {len(words)} to {limit} tokens")
            normalized = " ".join(words[:limit])
    vec = np.asarray(backend.encode_text(normalized), dtype=np.float32)
    if vec.shape != (backend.embedding_dim,):
        raise ShapeMismatch(f"text backend produced {vec.shape}, expected ({backend.embedding_dim},)")
    return vec


def replicate_text(vec: np.ndarray, n: int = 10) -> np.ndarray:
    """Tile one text embedding into n identical rows."""
    vec = np.asarray(vec)
    if vec.ndim != 1:
        raise ShapeMismatch(f"expected a 1-d vector, got shape {vec.shape}")
    return np.tile(vec, (n, 1))


# --- zero-shot scoring -----------------------------------------------------

@dataclass
class ZeroShotScorer:
    """Softmax over temperature-scaled cosine similarities to class texts."""

    class_embeddings: np.ndarray  # (K, D)
    temperature: float = 0.01

    def __post_init__(self):
        self.class_embeddings = np.asarray(self.class_embeddings, dtype=np.float64)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.class_embeddings.ndim != 2 or self.class_embeddings.shape[0] < 1:
            raise ShapeMismatch("class_embeddings must be (K, D) with K >= 1")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormVector("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def zero_shot_score(visual_embedding: np.ndarray, scorer: ZeroShotScorer) -> np.ndarray:
    """Class probabilities for one visual embedding."""
    visual_embedding = np.asarray(visual_embedding, dtype=np.float64)
    sims = np.array([_cosine(visual_embedding, c) for c in scorer.class_embeddings])
    logits = sims / scorer.temperature
    logits -= logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


# --- cache-aware pipeline helpers ------------------------------------------

def embed_segments(segments, backend: EncoderBackend, cache: EmbeddingCache | None = None) -> dict[str, np.ndarray]:
    """Segment visual embeddings, reading/writing the cache when given."""
    out = {}
    for seg in segments:
        emb = cache.get(seg.segment_id, backend.name, backend.mode) if cache is not None else None
        if emb is None:
            emb = encode_segment(seg, backend).astype(np.float32)
            if cache is not None:
                cache.put(seg.segment_id, backend.name, backend.mode, emb)
        out[seg.segment_id] = emb
    return out


def embed_caption_texts(texts, backend: EncoderBackend, cache: EmbeddingCache | None = None) -> dict[str, np.ndarray]:
    """Text embeddings keyed by caption text, cached by content hash."""
    out = {}
    for text in texts:
        key = "txt-" + hashlib.sha256(text.encode()).hexdigest()[:32]
        vec = cache.get(key, backend.name, backend.mode) if cache is not None else None
        if vec is None:
            vec = encode_text(text, backend)
            if cache is not None:
                cache.put(key, backend.name, backend.mode, vec)
        out[text] = vec
    return out


# --- visual backbone fine-tuning -------------------------------------------

@dataclass
class FinetuneConfig:
    steps: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    head_hidden: tuple[int, ...] = (256,)


@dataclass
class FinetuneResult:
    backend: EncoderBackend
    head: "object"
    probe: dict = field(default_factory=dict)


def probe_image(seed: int = 7, size: int = 64) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def finetune_visual_backbone(backend: EncoderBackend, train_segments, config: FinetuneConfig,
                             checkpoint_path=None) -> FinetuneResult:
    """Train the visual backbone plus a dense classification head.

    The head consumes the pooled (mean over the 10 tokens) segment
    embedding. Gradients flow through the temporal and token averages into
    the backbone weights. Only trainable backends qualify.
    """
    from .data import LABEL_TO_INT, sample_balanced_batch
    from .fusion import MlpFusionNet, bce_with_logits_grad
    from .nn import Adam

    if not backend.trainable:
        raise BackendNotTrainable(f"backend {backend.name!r} does not support gradient updates")
    assert isinstance(backend, TinyLinearBackend)  # only trainable backend shipped

    probe = probe_image()
    probe_before = backend.encode_image(probe).copy()

    W = backend.W.astype(np.float32).copy()
    b = backend.b.astype(np.float32).copy()
    head = MlpFusionNet(layer_sizes=(backend.embedding_dim, *config.head_hidden, 1), seed=config.seed)
    params = [("backbone.W", W), ("backbone.b", b)] + head.param_items()
    opt = Adam([p for _, p in params], lr=config.learning_rate, weight_decay=config.weight_decay)

    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        batch = sample_balanced_batch(train_segments, config.batch_size, rng)
        y = np.array([LABEL_TO_INT[s.label] for s in batch.segments], dtype=np.float32)

        # features: (B, 100, n_in) -> embeddings -> pooled (B, 512)
        feats = np.stack([
            np.stack([backend.features(crop) for f in seg.frames
                      for crop in ([resize_image(f, backend.input_size)]
                                   + partition_patches(resize_image(f, backend.input_size)))])
            for seg in batch.segments
        ]).astype(np.float32)
        emb = feats @ W + b
        pooled = emb.mean(axis=1)
        logits = head.forward(pooled, train=True)
        loss_grad = bce_with_logits_grad(logits, y) / len(y)
        d_pooled = head.backward(loss_grad)
        d_emb = np.repeat(d_pooled[:, None, :], feats.shape[1], axis=1) / feats.shape[1]
        dW = np.einsum("btf,bte->fe", feats, d_emb).astype(np.float32)
        db = d_emb.sum(axis=(0, 1)).astype(np.float32)
        opt.step([dW, db] + [head.grads[name] for name, _ in head.param_items()])

    tuned = backend.with_weights(W, b, mode="finetuned")
    probe_after = tuned.encode_image(probe)
    probe_report = {
        "steps": config.steps,
        "probe_sha_pretrained": hashlib.sha256(probe_before.tobytes()).hexdigest(),
        "probe_sha_finetuned": hashlib.sha256(probe_after.tobytes()).hexdigest(),
        "outputs_differ": bool(not np.array_equal(probe_before, probe_after)),
    }
    if config.steps > 0 and not probe_report["outputs_differ"]:
        warnings.warn("fine-tuned backbone is identical to pretrained on the probe image")

    if checkpoint_path is not None:
        from pathlib import Path

        path = Path(checkpoint_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, W=W, b=b, **{name: arr for name, arr in head.param_items()})
        path.with_suffix(".probe.json").write_text(json.dumps(probe_report, indent=2, sort_keys=True))

    return FinetuneResult(backend=tuned, head=head, probe=probe_report)
