"""Speaking-status caption generation.

The central frame of each segment is paired with one of two prompts and
sent to a vision-language client: a yes/no prompt whose answer can be
mapped to one of two fixed label-agnostic sentences, and a descriptive
prompt producing free-form explanations. Clients are pluggable (mock,
recorded fixtures, HTTP); answers are cached so a segment is captioned at
most once per (image, prompt, model, temperature).

None of these operations accepts a ground-truth label: captions must be
computable at test time exactly as at train time.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NOT_SPEAKING, SPEAKING
from .encoders import EncoderBackend, encode_text
from .errors import TooFewCaptions, UnparseableYesNo, VlmUnavailable
from .images import image_digest

CENTRAL_INDEX = 4  # 0-based index of the 5th frame in a 10-frame segment


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: str
    text: str
    temperature: float
    max_tokens: int


PROMPT_YES_NO = PromptSpec(
    prompt_id="P1",
    text="Is the person speaking? Answer with yes or no.",
    temperature=0.0,
    max_tokens=10,
)
PROMPT_DESCRIBE = PromptSpec(
    prompt_id="P2",
    text="Is the person speaking? Explain why in a few words",
    temperature=0.2,
    max_tokens=50,
)
PROMPTS = {"P1": PROMPT_YES_NO, "P2": PROMPT_DESCRIBE}

FIXED_CAPTION_YES = "the person is engaged in a conversation"
FIXED_CAPTION_NO = "no one is talking"
FIXED_CAPTIONS = {"yes": FIXED_CAPTION_YES, "no": FIXED_CAPTION_NO}


@dataclass
class Caption:
    text: str
    prompt_id: str
    source: str  # "vlm" | "fixed"
    segment_id: str = ""
    frame_index: int = -1


class VlmClient:
    """Adapter contract for vision-language caption generators."""

    model: str = "base"
    mock: bool = False

    def __init__(self):
        self.calls = 0

    def complete(self, image: np.ndarray, prompt: PromptSpec) -> str:
        raise NotImplementedError


class MockVlmClient(VlmClient):
    """Deterministic stand-in: answers from image brightness.

    Bright crops (mean pixel >= threshold) read as speaking. P2 responses
    are templated sentences, stable per (image digest, prompt).
    """

    mock = True

    def __init__(self, model: str = "mock-vlm", threshold: float = 127.5):
        super().__init__()
        self.model = model
        self.threshold = threshold

    def complete(self, image, prompt):
        self.calls += 1
        bright = float(np.asarray(image, dtype=np.float64).mean()) >= self.threshold
        if prompt.prompt_id == "P1":
            return "yes" if bright else "no"
        digest = image_digest(image)[:8]
        if bright:
            return f"The person is speaking because their mouth is open and their gestures are animated ({digest})."
        return f"The person is not speaking because their mouth is closed and there is no visible movement ({digest})."


class RecordedVlmClient(VlmClient):
    """Replays responses from a {image_digest: {prompt_id: text}} table."""

    mock = True

    def __init__(self, responses: dict, model: str = "recorded-vlm"):
        super().__init__()
        self.model = model
        self.responses = responses

    def complete(self, image, prompt):
        self.calls += 1
        digest = image_digest(image)
        try:
            return self.responses[digest][prompt.prompt_id]
        except KeyError:
            raise VlmUnavailable(f"no recorded response for image {digest[:12]} / {prompt.prompt_id}") from None


class HttpVlmClient(VlmClient):
    """Minimal HTTP JSON client: {image_b64, prompt, temperature, max_tokens} -> {text}."""

    def __init__(self, endpoint: str, model: str = "remote-vlm", retries: int = 2,
                 backoff: float = 0.5, timeout: float = 30.0):
        super().__init__()
        self.endpoint = endpoint
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout

    def complete(self, image, prompt):
        self.calls += 1
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
        payload = json.dumps({
            "image_b64": base64.b64encode(buf.getvalue()).decode(),
            "prompt": prompt.text,
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_tokens,
        }).encode()
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(
                    self.endpoint, data=payload, headers={"Content-Type": "application/json"}
                )
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read())["text"]
            except (urllib.error.URLError, OSError, KeyError, json.JSONDecodeError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise VlmUnavailable(f"VLM endpoint {self.endpoint} unreachable: {last_error}")


def get_vlm_client(name: str, **kwargs) -> VlmClient:
    if name == "mock":
        return MockVlmClient(**kwargs)
    if name == "http":
        return HttpVlmClient(**kwargs)
    raise VlmUnavailable(f"unknown VLM client {name!r}")


def select_central_frame(segment) -> tuple[np.ndarray, int]:
    """The 5th of the segment's 10 frames (0-based index 4)."""
    if len(segment.frames) != 10:
        raise ValueError(f"segment {segment.segment_id!r} has {len(segment.frames)} frames, expected 10")
    return segment.frames[CENTRAL_INDEX], CENTRAL_INDEX


def parse_yes_no(response: str) -> str:
    """Map a raw response to 'yes'/'no' by case-insensitive prefix match."""
    stripped = response.strip().lower()
    if stripped.startswith("yes"):
        return "yes"
    if stripped.startswith("no"):
        return "no"
    raise UnparseableYesNo(f"response matches neither yes nor no: {response!r}")


def generate_caption(frame: np.ndarray, prompt: PromptSpec, client: VlmClient,
                     segment_id: str = "", frame_index: int = CENTRAL_INDEX,
                     cache: "CaptionCache | None" = None) -> Caption:
    """Ask the VLM about one frame; P1 responses are normalized to yes/no."""
    digest = image_digest(frame)
    text = cache.get(digest, prompt, client.model) if cache is not None else None
    if text is None:
        raw = client.complete(frame, prompt)
        text = parse_yes_no(raw) if prompt.prompt_id == "P1" else raw.strip()
        if not text:
            raise VlmUnavailable("VLM returned an empty caption")
        if cache is not None:
            cache.put(digest, prompt, client.model, text)
    return Caption(text=text, prompt_id=prompt.prompt_id, source="vlm",
                   segment_id=segment_id, frame_index=frame_index)


def to_fixed_caption(answer: str, segment_id: str = "", frame_index: int = CENTRAL_INDEX) -> Caption:
    """Replace a yes/no answer with its canonical full-sentence caption."""
    if answer not in FIXED_CAPTIONS:
        raise ValueError(f"answer must be 'yes' or 'no', got {answer!r}")
    return Caption(text=FIXED_CAPTIONS[answer], prompt_id="P1", source="fixed",
                   segment_id=segment_id, frame_index=frame_index)


def standalone_vlm_predict(segment, client: VlmClient, cache: "CaptionCache | None" = None) -> str:
    """Label a segment with the VLM alone: yes/no on the central frame."""
    frame, idx = select_central_frame(segment)
    caption = generate_caption(frame, PROMPT_YES_NO, client, segment.segment_id, idx, cache)
    return SPEAKING if caption.text == "yes" else NOT_SPEAKING


def caption_segment(segment, client: VlmClient, caption_mode: str = "fixed",
                    cache: "CaptionCache | None" = None) -> Caption:
    """Caption one segment per the configured mode.

    fixed: yes/no prompt, answer swapped for the canonical sentence.
    variable: descriptive prompt, free-form response kept verbatim.
    """
    frame, idx = select_central_frame(segment)
    if caption_mode == "fixed":
        answer = generate_caption(frame, PROMPT_YES_NO, client, segment.segment_id, idx, cache)
        return to_fixed_caption(answer.text, segment.segment_id, idx)
    if caption_mode == "variable":
        return generate_caption(frame, PROMPT_DESCRIBE, client, segment.segment_id, idx, cache)
    raise ValueError(f"caption_mode must be 'fixed' or 'variable', got {caption_mode!r}")


def caption_segments(segments, client: VlmClient, caption_mode: str = "fixed",
                     cache: "CaptionCache | None" = None) -> dict[str, Caption]:
    return {seg.segment_id: caption_segment(seg, client, caption_mode, cache) for seg in segments}


@dataclass
class CaptionSimilarityStats:
    mean_pairwise_cosine: float
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    n_pairs: int


def caption_similarity_stats(captions, text_backend: EncoderBackend) -> CaptionSimilarityStats:
    """Mean cosine similarity over all unordered caption pairs."""
    texts = [c.text if isinstance(c, Caption) else str(c) for c in captions]
    if len(texts) < 2:
        raise TooFewCaptions(f"need at least 2 captions, got {len(texts)}")
    vecs = np.stack([encode_text(t, text_backend).astype(np.float64) for t in texts])
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = vecs / norms
    sims = []
    for i in range(len(unit)):
        for j in range(i + 1, len(unit)):
            sims.append(float(np.dot(unit[i], unit[j])))
    sims = np.clip(np.asarray(sims), -1.0, 1.0)
    counts, edges = np.histogram(sims, bins=20, range=(-1.0, 1.0))
    return CaptionSimilarityStats(
        mean_pairwise_cosine=float(sims.mean()),
        histogram_counts=counts,
        histogram_edges=edges,
        n_pairs=len(sims),
    )


class CaptionCache:
    """JSON-lines caption store keyed by (image digest, prompt, model, temperature)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[tuple, str] = {}
        self._lock = threading.Lock()  # appends must not interleave
        if self.path.is_file():
            self._load()

    @staticmethod
    def _key(image_sha256: str, prompt: PromptSpec, model: str) -> tuple:
        return (image_sha256, prompt.prompt_id, model, round(float(prompt.temperature), 6))

    def _load(self):
        for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (obj["image_sha256"], obj["prompt_id"], obj["model"],
                       round(float(obj["temperature"]), 6))
                self._entries[key] = obj["caption"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                warnings.warn(f"caption cache {self.path}: skipping corrupt line {lineno}")

    def get(self, image_sha256: str, prompt: PromptSpec, model: str) -> str | None:
        return self._entries.get(self._key(image_sha256, prompt, model))

    def put(self, image_sha256: str, prompt: PromptSpec, model: str, caption: str) -> None:
        key = self._key(image_sha256, prompt, model)
        with self._lock:
            if self._entries.get(key) == caption:
                return
            self._entries[key] = caption
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "image_sha256": image_sha256,
                    "prompt_id": prompt.prompt_id,
                    "model": model,
                    "temperature": prompt.temperature,
                    "max_tokens": prompt.max_tokens,
                    "caption": caption,
                    "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                }, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._entries)
