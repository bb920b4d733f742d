"""Dataset ingestion and segment construction.

Annotated upper-body frame sequences come in as a CSV table
(``video_id,frame_index,person_id,x,y,w,h,label``); they are chunked into
fixed-length labeled video segments, grouped into leave-one-person-out
folds, and served as class-balanced batches.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateKey,
    InsufficientClassSamples,
    MalformedRow,
    MissingFile,
    SinglePersonDataset,
)
from .images import read_image

SPEAKING = "speaking"
NOT_SPEAKING = "not_speaking"
LABELS = (SPEAKING, NOT_SPEAKING)
LABEL_TO_INT = {NOT_SPEAKING: 0, SPEAKING: 1}

CSV_HEADER = ["video_id", "frame_index", "person_id", "x", "y", "w", "h", "label"]

SEGMENT_LENGTH = 10


@dataclass(frozen=True)
class AnnotationRecord:
    """One labeled frame of one person in one video."""

    video_id: str
    frame_index: int
    person_id: str
    bbox: tuple[int, int, int, int]  # x, y, w, h in pixels
    label: str

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.video_id, self.frame_index, self.person_id)


@dataclass
class AnnotationTable:
    """Records sorted by (person_id, frame_index); video_id breaks ties."""

    records: list[AnnotationRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def persons(self) -> list[str]:
        """Dataset-declared person order (sorted, unique)."""
        return sorted({r.person_id for r in self.records})


@dataclass
class VideoSegment:
    """A fixed run of frames of one person sharing one label.

    ``frames`` holds uint8 (H, W, 3) arrays; it may be empty for
    manifest-only workflows where pixel data was never loaded.
    """

    segment_id: str
    person_id: str
    label: str
    frames: list[np.ndarray]
    padded: bool
    video_id: str = ""
    frame_indices: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class SegmentPlan:
    """Frame bookkeeping for one segment, before any pixels are read."""

    segment_id: str
    video_id: str
    person_id: str
    label: str
    frame_indices: tuple[int, ...]
    padded: bool


@dataclass
class FoldSpec:
    held_out_person: str
    train_persons: set[str]


@dataclass
class Batch:
    segments: list[VideoSegment]

    def label_counts(self) -> dict[str, int]:
        counts = {lab: 0 for lab in LABELS}
        for seg in self.segments:
            counts[seg.label] += 1
        return counts


def load_annotations(path: str | Path) -> AnnotationTable:
    """Parse the annotation CSV, validating rows and key uniqueness.

    Raises MissingFile, MalformedRow (with the offending row number), or
    DuplicateKey.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"annotation file not found: {path}")

    records: list[AnnotationRecord] = []
    seen: set[tuple[str, int, str]] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "missing header") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise MalformedRow(1, f"expected header {','.join(CSV_HEADER)}")
        for row_number, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise MalformedRow(row_number, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            video_id, frame_s, person_id, x_s, y_s, w_s, h_s, label = (v.strip() for v in row)
            try:
                frame_index = int(frame_s)
                x, y, w, h = int(x_s), int(y_s), int(w_s), int(h_s)
            except ValueError as exc:
                raise MalformedRow(row_number, f"non-integer field: {exc}") from None
            if frame_index < 0:
                raise MalformedRow(row_number, "frame_index must be non-negative")
            if w <= 0 or h <= 0:
                raise MalformedRow(row_number, "bbox width and height must be positive")
            if label not in LABELS:
                raise MalformedRow(row_number, f"label must be one of {LABELS}, got {label!r}")
            record = AnnotationRecord(video_id, frame_index, person_id, (x, y, w, h), label)
            if record.key in seen:
                raise DuplicateKey(f"duplicate (video_id, frame_index, person_id) key {record.key}")
            seen.add(record.key)
            records.append(record)

    records.sort(key=lambda r: (r.person_id, r.frame_index, r.video_id))
    return AnnotationTable(records)


def frame_path(frames_root: str | Path, video_id: str, person_id: str, frame_index: int) -> Path:
    return Path(frames_root) / video_id / person_id / f"{frame_index:06d}.png"


def plan_segments(table: AnnotationTable, T: int = SEGMENT_LENGTH) -> list[SegmentPlan]:
    """Chunk per-(video, person) runs of same-label consecutive frames.

    A run of length n yields floor(n/T) full segments; a trailing remainder
    of r frames yields one padded segment built by repeating those r frames
    cyclically (padding frame i is tail[i mod r]). Label changes and frame
    gaps both end a run; runs never cross videos.
    """
    if T < 1:
        raise ValueError("T must be >= 1")

    groups: dict[tuple[str, str], list[AnnotationRecord]] = {}
    for rec in table.records:
        groups.setdefault((rec.video_id, rec.person_id), []).append(rec)

    plans: list[SegmentPlan] = []
    for (video_id, person_id) in sorted(groups):
        recs = sorted(groups[(video_id, person_id)], key=lambda r: r.frame_index)
        run: list[AnnotationRecord] = []
        for rec in recs:
            if run and (rec.label != run[-1].label or rec.frame_index != run[-1].frame_index + 1):
                plans.extend(_chunk_run(run, T))
                run = []
            run.append(rec)
        if run:
            plans.extend(_chunk_run(run, T))
    return plans


def _chunk_run(run: list[AnnotationRecord], T: int) -> list[SegmentPlan]:
    plans = []
    n = len(run)
    for start in range(0, n - n % T, T):
        chunk = run[start : start + T]
        plans.append(_make_plan(chunk, [r.frame_index for r in chunk], padded=False))
    r = n % T
    if r:
        tail = run[n - r :]
        indices = [tail[i % r].frame_index for i in range(T)]
        plans.append(_make_plan(tail, indices, padded=True))
    return plans


def _make_plan(source: list[AnnotationRecord], frame_indices: list[int], padded: bool) -> SegmentPlan:
    first = source[0]
    seg_id = f"{first.video_id}:{first.person_id}:{first.frame_index:06d}"
    return SegmentPlan(
        segment_id=seg_id,
        video_id=first.video_id,
        person_id=first.person_id,
        label=first.label,
        frame_indices=tuple(frame_indices),
        padded=padded,
    )


def load_segment(plan: SegmentPlan, frames_root: str | Path) -> VideoSegment:
    """Materialize one planned segment by reading its frames from disk."""
    cache: dict[int, np.ndarray] = {}
    frames = []
    for idx in plan.frame_indices:
        if idx not in cache:
            cache[idx] = read_image(frame_path(frames_root, plan.video_id, plan.person_id, idx))
        frames.append(cache[idx])
    return VideoSegment(
        segment_id=plan.segment_id,
        person_id=plan.person_id,
        label=plan.label,
        frames=frames,
        padded=plan.padded,
        video_id=plan.video_id,
        frame_indices=list(plan.frame_indices),
    )


def build_segments(table: AnnotationTable, frames_root: str | Path, T: int = SEGMENT_LENGTH) -> list[VideoSegment]:
    """Plan and materialize all segments of an annotation table."""
    return [load_segment(plan, frames_root) for plan in plan_segments(table, T)]


def write_segment_manifest(segments: list[VideoSegment] | list[SegmentPlan], path: str | Path) -> None:
    """JSON-lines manifest: one object per segment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for seg in segments:
            fh.write(
                json.dumps(
                    {
                        "segment_id": seg.segment_id,
                        "person_id": seg.person_id,
                        "label": seg.label,
                        "frame_indices": list(seg.frame_indices),
                        "padded": seg.padded,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def make_lopo_folds(segments) -> list[FoldSpec]:
    """One fold per person, each held out exactly once."""
    persons = sorted({seg.person_id for seg in segments})
    if len(persons) < 2:
        raise SinglePersonDataset(f"need >= 2 persons for leave-one-person-out, have {persons}")
    return [FoldSpec(held_out_person=p, train_persons=set(persons) - {p}) for p in persons]


def sample_balanced_batch(segments: list[VideoSegment], size: int, rng_seed) -> Batch:
    """Sample size/2 segments per class, without replacement, seeded."""
    if size % 2 != 0:
        raise ValueError("batch size must be even")
    per_class = size // 2
    by_label = {lab: [s for s in segments if s.label == lab] for lab in LABELS}
    for lab in LABELS:
        if len(by_label[lab]) < per_class:
            raise InsufficientClassSamples(lab, len(by_label[lab]), per_class)

    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    chosen: list[VideoSegment] = []
    for lab in LABELS:
        pool = by_label[lab]
        idx = rng.choice(len(pool), size=per_class, replace=False)
        chosen.extend(pool[i] for i in idx)
    order = rng.permutation(len(chosen))
    return Batch([chosen[i] for i in order])


@dataclass(frozen=True)
class AugmentConfig:
    """Mild, label-preserving transforms applied segment-consistently."""

    flip_prob: float = 0.5
    jitter_frac: float = 0.05
    brightness_delta: float = 0.10

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, jitter_frac=0.0, brightness_delta=0.0)


def augment(segment: VideoSegment, rng_seed, config: AugmentConfig = AugmentConfig()) -> VideoSegment:
    """Return an augmented copy; one parameter draw covers all frames."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    do_flip = config.flip_prob > 0 and rng.random() < config.flip_prob
    h, w = segment.frames[0].shape[:2]
    dy = dx = y0 = x0 = 0
    if config.jitter_frac > 0:
        max_dy = int(h * config.jitter_frac)
        max_dx = int(w * config.jitter_frac)
        dy = int(rng.integers(0, max_dy + 1))
        dx = int(rng.integers(0, max_dx + 1))
        y0 = int(rng.integers(0, dy + 1))
        x0 = int(rng.integers(0, dx + 1))
    factor = 1.0
    if config.brightness_delta > 0:
        factor = 1.0 + rng.uniform(-config.brightness_delta, config.brightness_delta)

    frames = [_transform_frame(f, do_flip, dy, dx, y0, x0, factor) for f in segment.frames]
    return replace(segment, frames=frames)


def _transform_frame(frame, do_flip, dy, dx, y0, x0, factor):
    out = frame
    if do_flip:
        out = out[:, ::-1, :]
    if dy or dx:
        h, w = out.shape[:2]
        crop = out[y0 : h - (dy - y0), x0 : w - (dx - x0), :]
        out = _resize_nearest(crop, h, w)
    if factor != 1.0:
        out = np.clip(np.rint(out.astype(np.float64) * factor), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out)


def _resize_nearest(img, out_h, out_w):
    in_h, in_w = img.shape[:2]
    rows = np.minimum((np.arange(out_h) * in_h) // out_h, in_h - 1)
    cols = np.minimum((np.arange(out_w) * in_w) // out_w, in_w - 1)
    return img[rows][:, cols]


AUGMENT_ID_MARKER = ":aug"


def is_augmented_id(segment_id: str) -> bool:
    return AUGMENT_ID_MARKER in segment_id


def with_augmented_copies(segments: list[VideoSegment], n_copies: int, seed: int = 0,
                          config: AugmentConfig = AugmentConfig()) -> list[VideoSegment]:
    """Originals plus n_copies augmented variants per segment.

    Embeddings are cached per segment id, so augmentation happens offline,
    before the embedding stage; copies carry an id marker and are excluded
    from evaluation scoring.
    """
    if n_copies <= 0:
        return list(segments)
    out = list(segments)
    for seg in segments:
        id_hash = zlib.crc32(seg.segment_id.encode())  # process-stable, unlike hash()
        for k in range(n_copies):
            rng = np.random.default_rng([seed, k, id_hash])
            copy = augment(seg, rng, config)
            copy.segment_id = f"{seg.segment_id}{AUGMENT_ID_MARKER}{k}"
            out.append(copy)
    return out
