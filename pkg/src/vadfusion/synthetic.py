"""Synthetic datasets for desk-scale end-to-end runs.

Two flavors: separable Gaussian-blob segment embeddings (exercises the
training/evaluation stack without touching images), and a tiny on-disk
image dataset whose brightness encodes the speaking state (exercises the
full ingest -> embed -> caption -> train -> eval pipeline with mock
backends).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .captioning import FIXED_CAPTION_NO, FIXED_CAPTION_YES
from .data import CSV_HEADER, LABELS, NOT_SPEAKING, SPEAKING
from .encoders import EMBEDDING_DIM, MockEncoderBackend, embed_caption_texts
from .training import FeatureStores


@dataclass(frozen=True)
class SegmentInfo:
    """Minimal segment record for embedding-level pipelines."""

    segment_id: str
    person_id: str
    label: str
    padded: bool = False


def make_blob_dataset(n_persons: int = 3, segments_per_class: int = 40, seed: int = 0,
                      separation: float = 4.0, noise: float = 1.0,
                      vlm_accuracy: float = 0.9, person_prefix: str = "p",
                      domain_shift: float = 0.0):
    """Separable synthetic segments with embeddings and captions prefilled.

    Returns (segments, stores). Speaking and not-speaking segments live in
    two Gaussian blobs separated along a random direction; each pseudo
    person gets a small offset (the person-level domain shift). Captions
    simulate an imperfect yes/no captioner with the given accuracy and are
    stored as the two fixed sentences.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(EMBEDDING_DIM)
    direction /= np.linalg.norm(direction)
    mu = {SPEAKING: direction * (separation / 2), NOT_SPEAKING: -direction * (separation / 2)}
    shift = rng.standard_normal(EMBEDDING_DIM) * domain_shift

    from .captioning import Caption

    segments: list[SegmentInfo] = []
    visual: dict[str, np.ndarray] = {}
    captions: dict[str, Caption] = {}
    for p in range(n_persons):
        person = f"{person_prefix}{p}"
        offset = rng.standard_normal(EMBEDDING_DIM) * 0.3
        for label in LABELS:
            for k in range(segments_per_class):
                seg_id = f"{person_prefix}synth:{person}:{label}:{k:04d}"
                rows = mu[label] + offset + shift + rng.standard_normal((10, EMBEDDING_DIM)) * noise
                segments.append(SegmentInfo(seg_id, person, label))
                visual[seg_id] = rows.astype(np.float32)
                correct = rng.random() < vlm_accuracy
                says_speaking = (label == SPEAKING) == correct
                text = FIXED_CAPTION_YES if says_speaking else FIXED_CAPTION_NO
                captions[seg_id] = Caption(text=text, prompt_id="P1", source="fixed",
                                           segment_id=seg_id)

    text_vectors = embed_caption_texts(
        sorted({c.text for c in captions.values()}), MockEncoderBackend(seed=0)
    )
    stores = FeatureStores(visual=visual, captions=captions, text_vectors=text_vectors)
    return segments, stores


def make_image_dataset(root: str | Path, n_persons: int = 3, runs_per_label: int = 2,
                       run_length: int = 10, image_size: int = 32, seed: int = 0,
                       video_id: str = "vid0"):
    """Write a brightness-coded image dataset: frames on disk plus a CSV.

    Speaking frames are bright (mean ~190), not-speaking frames dark
    (mean ~60), so mock mean-pixel encoders and the brightness mock VLM
    both separate the classes. Returns (annotations_csv, frames_root).
    """
    from .images import write_image

    root = Path(root)
    frames_root = root / "frames"
    csv_path = root / "annotations.csv"
    rng = np.random.default_rng(seed)
    rows = []
    for p in range(n_persons):
        person = f"person{p}"
        frame_index = 0
        for r in range(runs_per_label):
            for label in (SPEAKING, NOT_SPEAKING):
                base = 190 if label == SPEAKING else 60
                for _ in range(run_length):
                    img = np.clip(
                        rng.normal(base, 12, size=(image_size, image_size, 3)), 0, 255
                    ).astype(np.uint8)
                    write_image(frames_root / video_id / person / f"{frame_index:06d}.png", img)
                    rows.append([video_id, frame_index, person, 0, 0, image_size, image_size, label])
                    frame_index += 1
    root.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
    return csv_path, frames_root
