"""Per-fold training orchestration.

Assembles fused feature arrays from the embedding/caption stores, runs the
seeded balanced-batch optimization for either fusion architecture, and
persists checkpoints that reload to bit-identical eval-mode behavior.
"""

from __future__ import annotations

import hashlib
import json
import struct
import subprocess
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .captioning import Caption, caption_segments
from .data import LABEL_TO_INT, FoldSpec
from .encoders import EncoderBackend, embed_caption_texts, embed_segments, replicate_text
from .errors import ConfigError, CorruptCheckpoint, InsufficientData
from .estimators import MlpFusionClassifier, TransformerFusionClassifier
from .fusion import fuse_for_mlp, fuse_for_transformer

LEARNING_RATE_GRID = (0.01, 0.001, 0.0001)

FUSION_ARCHS = ("mlp", "transformer")
CAPTION_MODES = ("fixed", "variable")
ENCODER_MODES = ("pretrained", "finetuned")


@dataclass
class TrainConfig:
    """Training settings: Adam at lr 0.001 (grid 0.01/0.001/0.0001),
    weight decay 1e-4, up to 50 epochs of 64+64 balanced batches."""

    learning_rate: float = 0.001
    weight_decay: float = 1e-4
    max_epochs: int = 50
    batch_size: int = 128
    optimizer: str = "adam"
    seed: int = 0
    fusion_arch: str = "mlp"
    caption_mode: str = "fixed"
    encoder_mode: str = "pretrained"
    threshold: float = 0.0
    early_stop_patience: int = 0  # 0 disables the train-split early stop
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even, got {self.batch_size}")
        if self.fusion_arch not in FUSION_ARCHS:
            raise ConfigError(f"fusion_arch must be one of {FUSION_ARCHS}, got {self.fusion_arch!r}")
        if self.caption_mode not in CAPTION_MODES:
            raise ConfigError(f"caption_mode must be one of {CAPTION_MODES}, got {self.caption_mode!r}")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"encoder_mode must be one of {ENCODER_MODES}, got {self.encoder_mode!r}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.optimizer!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureStores:
    """Precomputed features the trainer reads; training never re-encodes."""

    visual: dict[str, np.ndarray]        # segment_id -> (10, 512)
    captions: dict[str, Caption]         # segment_id -> Caption
    text_vectors: dict[str, np.ndarray]  # caption text -> (512,)


def build_stores(segments, encoder_backend: EncoderBackend, vlm_client, caption_mode: str,
                 embedding_cache=None, caption_cache=None,
                 text_backend: EncoderBackend | None = None) -> FeatureStores:
    """Run the embedding and captioning stages for a segment list."""
    visual = embed_segments(segments, encoder_backend, embedding_cache)
    captions = caption_segments(segments, vlm_client, caption_mode, caption_cache)
    texts = sorted({c.text for c in captions.values()})
    text_vectors = embed_caption_texts(texts, text_backend or encoder_backend, embedding_cache)
    return FeatureStores(visual=visual, captions=captions, text_vectors=text_vectors)


def build_fused_arrays(segments, stores: FeatureStores, fusion_arch: str):
    """Fused inputs, integer labels, and segment ids, in segment order."""
    xs, ys, ids = [], [], []
    for seg in segments:
        visual = stores.visual[seg.segment_id]
        caption = stores.captions[seg.segment_id]
        text = replicate_text(stores.text_vectors[caption.text], visual.shape[0])
        if fusion_arch == "mlp":
            xs.append(fuse_for_mlp(visual, text))
        else:
            xs.append(fuse_for_transformer(visual, text))
        ys.append(LABEL_TO_INT[seg.label])
        ids.append(seg.segment_id)
    if not xs:
        raise InsufficientData("no segments to fuse")
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64), ids


def make_estimator(config: TrainConfig, max_epochs: int | None = None):
    epochs = config.max_epochs if max_epochs is None else max_epochs
    common = dict(learning_rate=config.learning_rate, weight_decay=config.weight_decay,
                  max_epochs=epochs, batch_size=config.batch_size, seed=config.seed,
                  threshold=config.threshold)
    if config.fusion_arch == "mlp":
        return MlpFusionClassifier(**common)
    return TransformerFusionClassifier(**common)


# --- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"VADCKPT1"


@lru_cache(maxsize=1)
def build_tag() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"vadfusion-{__version__}"


@dataclass
class Checkpoint:
    arch_id: str
    config: dict
    epoch: int
    loss_history: list[float]
    tensors: dict[str, np.ndarray]
    optimizer_state: dict
    held_out_person: str | None = None
    train_persons: list[str] = field(default_factory=list)
    build: str = ""
    # per-batch segment-id log; instrumentation only, never serialized
    batch_log: list[list[str]] = field(default_factory=list, repr=False)


def checkpoint_from_estimator(est, config: TrainConfig, fold: FoldSpec | None = None) -> Checkpoint:
    tensors = {name: arr.copy() for name, arr in est.net_.param_items() + est.net_.buffer_items()}
    names = [name for name, _ in est.net_.param_items()]
    state = est.optimizer_.state_dict()
    for name, m, v in zip(names, state["m"], state["v"]):
        tensors[f"opt.m.{name}"] = m
        tensors[f"opt.v.{name}"] = v
    return Checkpoint(
        arch_id=est.net_.arch_id(),
        config=config.as_dict(),
        epoch=est.epochs_run_,
        loss_history=list(est.loss_history_),
        tensors=tensors,
        optimizer_state={"t": state["t"]},
        held_out_person=fold.held_out_person if fold else None,
        train_persons=sorted(fold.train_persons) if fold else [],
        build=build_tag(),
        batch_log=[list(batch) for batch in getattr(est, "batch_log_", [])],
    )


def estimator_from_checkpoint(ckpt: Checkpoint, X_like):
    """Rebuild a fitted estimator; eval-mode outputs reload bit-exactly."""
    config = TrainConfig(**ckpt.config)
    est = make_estimator(config)
    net_tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    try:
        est.restore(X_like, net_tensors, _optimizer_state(ckpt), ckpt.epoch, ckpt.loss_history)
    except KeyError as exc:
        raise CorruptCheckpoint(f"checkpoint is missing tensor {exc}") from None
    return est


def _optimizer_state(ckpt: Checkpoint) -> dict:
    m = {k[len("opt.m."):]: v for k, v in ckpt.tensors.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: t for k, t in ckpt.tensors.items() if k.startswith("opt.v.")}
    if set(m) != set(v):
        raise CorruptCheckpoint("optimizer moment tensors are inconsistent")
    return {"t": ckpt.optimizer_state["t"], "m": m, "v": v}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Binary checkpoint: JSON header + named float tensors + sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    payload = bytearray()
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        manifest.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload += arr.tobytes()
    header = json.dumps({
        "format": 1,
        "arch": ckpt.arch_id,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "optimizer_state": ckpt.optimizer_state,
        "held_out_person": ckpt.held_out_person,
        "train_persons": ckpt.train_persons,
        "build": ckpt.build,
        "tensors": manifest,
    }, sort_keys=True).encode()
    body = _CKPT_MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CorruptCheckpoint(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 4 + 32 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path.name}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path.name}: checksum mismatch")
    header_len = struct.unpack("<I", body[len(_CKPT_MAGIC): len(_CKPT_MAGIC) + 4])[0]
    header_start = len(_CKPT_MAGIC) + 4
    header = json.loads(body[header_start: header_start + header_len])
    payload = body[header_start + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        tensors[entry["name"]] = np.frombuffer(
            payload[start: start + nbytes], dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
    return Checkpoint(
        arch_id=header["arch"],
        config=header["config"],
        epoch=header["epoch"],
        loss_history=header["loss_history"],
        tensors=tensors,
        optimizer_state=header["optimizer_state"],
        held_out_person=header["held_out_person"],
        train_persons=header["train_persons"],
        build=header["build"],
    )


# --- fold training -----------------------------------------------------------

def _split_train_val(ids, y, seed: int, val_fraction: float):
    rng = np.random.default_rng([seed, 104729])
    val_idx = set()
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        n_val = max(1, int(round(len(idx) * val_fraction)))
        val_idx.update(rng.permutation(idx)[:n_val].tolist())
    train_mask = np.array([i not in val_idx for i in range(len(y))])
    return train_mask, ~train_mask


def train_fold(fold: FoldSpec, config: TrainConfig, stores: FeatureStores, segments) -> Checkpoint:
    """Train one leave-one-person-out fold; the held-out person never enters a batch."""
    train_segments = [s for s in segments if s.person_id in fold.train_persons]
    forbidden = {s.segment_id for s in segments if s.person_id == fold.held_out_person}
    if not train_segments:
        raise InsufficientData(f"no training segments outside person {fold.held_out_person!r}")
    X, y, ids = build_fused_arrays(train_segments, stores, config.fusion_arch)

    if config.early_stop_patience <= 0:
        est = make_estimator(config)
        est.fit(X, y, sample_ids=ids, forbidden_ids=forbidden)
        return checkpoint_from_estimator(est, config, fold)

    # patience-based stop on a slice of the training persons, never the held-out one
    train_mask, val_mask = _split_train_val(ids, y, config.seed, config.val_fraction)
    X_tr, y_tr = X[train_mask], y[train_mask]
    ids_tr = [i for i, keep in zip(ids, train_mask) if keep]
    X_val, y_val = X[val_mask], y[val_mask]
    est = make_estimator(config, max_epochs=0)
    est.fit(X_tr, y_tr, sample_ids=ids_tr, forbidden_ids=forbidden)
    from .fusion import bce_with_logits

    best = None
    since_best = 0
    for _ in range(config.max_epochs):
        est.continue_fit(X_tr, y_tr, 1, sample_ids=ids_tr, forbidden_ids=forbidden)
        val_loss = float(bce_with_logits(est.decision_function(X_val), y_val).mean())
        if best is None or val_loss < best[0]:
            best = (val_loss, checkpoint_from_estimator(est, config, fold))
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    return best[1]


def train_all(segments, config: TrainConfig, stores: FeatureStores) -> Checkpoint:
    """Train one model on every person (cross-dataset / deployment model)."""
    X, y, ids = build_fused_arrays(segments, stores, config.fusion_arch)
    est = make_estimator(config)
    est.fit(X, y, sample_ids=ids)
    ckpt = checkpoint_from_estimator(est, config, None)
    ckpt.train_persons = sorted({s.person_id for s in segments})
    return ckpt


def resume(ckpt: Checkpoint, additional_epochs: int, stores: FeatureStores, segments) -> Checkpoint:
    """Continue a checkpointed run; matches an uninterrupted run of the same length."""
    config = TrainConfig(**ckpt.config)
    if ckpt.held_out_person is not None:
        train_segments = [s for s in segments if s.person_id != ckpt.held_out_person]
        forbidden = {s.segment_id for s in segments if s.person_id == ckpt.held_out_person}
        fold = FoldSpec(ckpt.held_out_person, {s.person_id for s in train_segments})
    else:
        train_segments, forbidden, fold = list(segments), set(), None
    X, y, ids = build_fused_arrays(train_segments, stores, config.fusion_arch)
    est = estimator_from_checkpoint(ckpt, X)
    est.continue_fit(X, y, additional_epochs, sample_ids=ids, forbidden_ids=forbidden)
    out = checkpoint_from_estimator(est, config, fold)
    if fold is None:
        out.train_persons = sorted({s.person_id for s in train_segments})
    return out


# --- learning-rate sweep -------------------------------------------------------

@dataclass
class SweepResult:
    config: TrainConfig
    metrics: dict | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def sweep(configs, fold: FoldSpec, stores: FeatureStores, segments) -> list[SweepResult]:
    """Train each config on the fold; score on a train-split validation slice.

    Selection never sees the held-out person. A failing config is reported
    in its row; the remaining configs still run.
    """
    from .evaluation import f1_from_arrays

    if not configs:
        raise ConfigError("sweep needs at least one config")
    train_segments = [s for s in segments if s.person_id in fold.train_persons]
    results = []
    for config in configs:
        try:
            X, y, ids = build_fused_arrays(train_segments, stores, config.fusion_arch)
            train_mask, val_mask = _split_train_val(ids, y, config.seed, config.val_fraction)
            ids_tr = [i for i, keep in zip(ids, train_mask) if keep]
            est = make_estimator(config)
            est.fit(X[train_mask], y[train_mask], sample_ids=ids_tr,
                    forbidden_ids={s.segment_id for s in segments
                                   if s.person_id == fold.held_out_person})
            y_pred = est.predict(X[val_mask])
            metrics = {
                "val_f1": f1_from_arrays(y[val_mask], y_pred),
                "final_train_loss": est.loss_history_[-1] if est.loss_history_ else None,
                "epochs": est.epochs_run_,
            }
            results.append(SweepResult(config=config, metrics=metrics))
        except Exception as exc:  # keep sweeping the other cells
            results.append(SweepResult(config=config, metrics=None, error=f"{type(exc).__name__}: {exc}"))
    return results
