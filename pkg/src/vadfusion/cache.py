"""Persistent embedding cache.

One binary file per entry under ``<root>/<backend>/<mode>/``, each with a
32-byte header (magic, dtype, shape, CRC of the payload) followed by the
row-major float32 payload, plus a per-directory ``index.json`` mapping
logical keys to filenames. Writes are atomic (temp file + rename), and a
checksum mismatch is surfaced as a warning and treated as a miss.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
import threading
import warnings
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptCacheEntry

_MAGIC = b"VEC1"
# magic(4s) dtype(B) ndim(B) pad(H) shape(4I) crc32(I) payload_len(I)
_HEADER = struct.Struct("<4sBBH4III")
assert _HEADER.size == 32

_DTYPES = {1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("<f4"): 1}

_SAFE_NAME = re.compile(r"^[A-Za-z0-9._-]{1,80}$")


def _filename_for(item_id: str) -> str:
    if _SAFE_NAME.match(item_id):
        return item_id + ".emb"
    return hashlib.sha256(item_id.encode()).hexdigest()[:32] + ".emb"


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        os.write(fd, payload)
    finally:
        os.close(fd)
    os.replace(tmp, path)


class EmbeddingCache:
    """Embeddings keyed by (item_id, backend name, backend mode).

    Keys are namespaced by backend name AND mode so embeddings from a
    pretrained and a fine-tuned variant of the same encoder never alias.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._index_lock = threading.Lock()  # index is read-modify-write

    def _dir(self, backend_name: str, mode: str) -> Path:
        return self.root / backend_name / mode

    def entry_path(self, item_id: str, backend_name: str, mode: str) -> Path:
        return self._dir(backend_name, mode) / _filename_for(item_id)

    def put(self, item_id: str, backend_name: str, mode: str, value: np.ndarray) -> Path:
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if arr.ndim > 4:
            raise ValueError("cache entries support at most 4 dimensions")
        shape = list(arr.shape) + [0] * (4 - arr.ndim)
        payload = arr.tobytes()
        header = _HEADER.pack(
            _MAGIC, _DTYPE_CODES[np.dtype("<f4")], arr.ndim, 0, *shape,
            zlib.crc32(payload) & 0xFFFFFFFF, len(payload),
        )
        directory = self._dir(backend_name, mode)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / _filename_for(item_id)
        _atomic_write(path, header + payload)
        self._update_index(directory, item_id, path.name)
        return path

    def get(self, item_id: str, backend_name: str, mode: str) -> np.ndarray | None:
        """Return the stored array, or None on miss or corrupt entry."""
        path = self.entry_path(item_id, backend_name, mode)
        if not path.is_file():
            return None
        try:
            return read_entry(path)
        except CorruptCacheEntry as exc:
            warnings.warn(f"embedding cache: {exc}; treating as miss")
            return None

    def _update_index(self, directory: Path, item_id: str, filename: str) -> None:
        with self._index_lock:
            index_path = directory / "index.json"
            index = {}
            if index_path.is_file():
                try:
                    index = json.loads(index_path.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    warnings.warn(f"embedding cache: unreadable index {index_path}; rebuilding")
            index[item_id] = filename
            _atomic_write(index_path, json.dumps(index, sort_keys=True, indent=0).encode())

    def entries(self):
        """Yield (backend, mode, path) for every .emb file under the root."""
        if not self.root.is_dir():
            return
        for path in sorted(self.root.rglob("*.emb")):
            rel = path.relative_to(self.root)
            if len(rel.parts) == 3:
                yield rel.parts[0], rel.parts[1], path

    def verify(self) -> list[tuple[Path, str]]:
        """Checksum-scan every entry; returns (path, problem) pairs."""
        bad = []
        for _, _, path in self.entries():
            try:
                read_entry(path)
            except CorruptCacheEntry as exc:
                bad.append((path, str(exc)))
        return bad

    def size_bytes(self) -> int:
        return sum(path.stat().st_size for _, _, path in self.entries())


def read_entry(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptCacheEntry(f"{path.name}: truncated header")
    magic, dtype_code, ndim, _, s0, s1, s2, s3, crc, payload_len = _HEADER.unpack(raw[: _HEADER.size])
    if magic != _MAGIC:
        raise CorruptCacheEntry(f"{path.name}: bad magic")
    if dtype_code not in _DTYPES or not 0 <= ndim <= 4:
        raise CorruptCacheEntry(f"{path.name}: bad dtype/ndim")
    payload = raw[_HEADER.size :]
    if len(payload) != payload_len:
        raise CorruptCacheEntry(f"{path.name}: payload length mismatch")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptCacheEntry(f"{path.name}: checksum mismatch")
    shape = tuple(int(s) for s in (s0, s1, s2, s3)[:ndim])
    return np.frombuffer(payload, dtype=_DTYPES[dtype_code]).reshape(shape).copy()
