"""File-backed, multi-collection vector store with exact cosine search.

Layout under the store root::

    manifest.json              {"format_version": 1, "collections": {...}, "checksum": "<sha256>"}
    collections/<name>.jsonl   one ChunkRecord object per line
    .lock                      flock target held by the single writer

Scores are computed with ``math.fsum`` over IEEE products, so a given store
and query produce bit-identical scores on every platform.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import math
import operator
import os
import re
import threading
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    CorruptManifest,
    DimensionMismatch,
    LockHeld,
    NotWritable,
    PreconditionError,
    UnknownCollection,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_COLLECTION_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,127}$")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def make_chunk_id(source_path: str, source_index: int) -> str:
    return f"{fnv1a_64(source_path.encode('utf-8')):016x}#{source_index}"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


@dataclass
class ChunkRecord:
    collection: str
    chunk_id: str
    text: str
    embedding: list[float]
    source_path: str
    source_index: int
    start: int
    end: int
    created_at: str
    embedding_model: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, allow_nan=False)

    @classmethod
    def from_dict(cls, data: dict) -> ChunkRecord:
        return cls(**{**data, "embedding": [float(x) for x in data["embedding"]]})


@dataclass(frozen=True)
class SearchHit:
    chunk_id: str
    score: float
    text: str
    rank: int


def vector_norm(v: Sequence[float]) -> float:
    return math.sqrt(math.fsum(x * x for x in v))


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    return math.fsum(map(operator.mul, a, b))


def _cosine(a, b, norm_a: float, norm_b: float) -> float:
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return max(-1.0, min(1.0, _dot(a, b) / (norm_a * norm_b)))


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1].

    A zero vector on either side scores 0.0 and logs a warning.
    """
    if len(a) != len(b):
        raise DimensionMismatch(f"vector dimensions differ: {len(a)} vs {len(b)}")
    na, nb = vector_norm(a), vector_norm(b)
    if na == 0.0 or nb == 0.0:
        log.warning("cosine similarity against a zero vector; scoring 0.0")
    return _cosine(a, b, na, nb)


def _check_finite(record: ChunkRecord) -> None:
    if not all(math.isfinite(x) for x in record.embedding):
        raise PreconditionError(f"embedding of {record.chunk_id} has non-finite components")


def _checksum(collections: dict) -> str:
    canonical = json.dumps(collections, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _atomic_write(path: Path, payload: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Collection:
    """In-memory snapshot of one collection file."""

    def __init__(self, records: list[ChunkRecord]):
        self.records = records
        self.norms = [vector_norm(r.embedding) for r in records]
        self.index = {r.chunk_id: i for i, r in enumerate(records)}


class VectorStore:
    """Handle on a store directory. Use :func:`open_store` to create one.

    Read handles load each collection lazily and then keep that snapshot;
    searches on one handle are safe from multiple threads. Write handles
    hold an exclusive ``flock`` on ``<root>/.lock`` until :meth:`close`.
    """

    def __init__(self, root: Path, writable: bool):
        self.root = root
        self.writable = writable
        self._lock_fh = None
        self._cache: dict[str, _Collection] = {}
        self._mutex = threading.Lock()
        self.manifest: dict[str, dict] = {}

    # lifecycle -------------------------------------------------------

    def _acquire(self) -> None:
        fh = open(self.root / ".lock", "a+")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise LockHeld(f"another writer holds the lock on {self.root}") from None
        self._lock_fh = fh

    def _load_manifest(self) -> None:
        path = self.root / "manifest.json"
        if not path.exists():
            self.manifest = {}
            return
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            collections = data["collections"]
            version = data["format_version"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptManifest(f"cannot parse {path}: {exc}") from exc
        if version != FORMAT_VERSION:
            raise CorruptManifest(f"unsupported store format_version {version!r}")
        if "checksum" in data and data["checksum"] != _checksum(collections):
            raise CorruptManifest(f"checksum mismatch in {path}")
        self.manifest = collections

    def _save_manifest(self) -> None:
        payload = {
            "format_version": FORMAT_VERSION,
            "collections": self.manifest,
            "checksum": _checksum(self.manifest),
        }
        _atomic_write(self.root / "manifest.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # helpers ---------------------------------------------------------

    def _path(self, name: str) -> Path:
        return self.root / "collections" / f"{name}.jsonl"

    def _require_writable(self) -> None:
        if not self.writable or self._lock_fh is None:
            raise NotWritable(f"store at {self.root} is open read-only")

    def _load(self, name: str) -> _Collection:
        with self._mutex:
            if name in self._cache:
                return self._cache[name]
            if name not in self.manifest:
                raise UnknownCollection(f"unknown collection {name!r}")
            records = []
            path = self._path(name)
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, 1):
                        if not line.strip():
                            continue
                        try:
                            records.append(ChunkRecord.from_dict(json.loads(line)))
                        except (ValueError, TypeError, KeyError) as exc:
                            raise CorruptManifest(f"{path}:{lineno}: bad record ({exc})") from exc
            expected = self.manifest[name]["record_count"]
            if len(records) != expected:
                raise CorruptManifest(
                    f"collection {name!r} has {len(records)} records but the manifest says {expected}")
            coll = _Collection(records)
            self._cache[name] = coll
            return coll

    def _rewrite(self, name: str, records: list[ChunkRecord]) -> None:
        path = self._path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, "".join(r.to_json() + "\n" for r in records))

    # public API ------------------------------------------------------

    def list_collections(self) -> list[dict]:
        return [
            {"name": name, "record_count": meta["record_count"], "dimension": meta["dimension"]}
            for name, meta in sorted(self.manifest.items())
        ]

    def has_collection(self, name: str) -> bool:
        return name in self.manifest

    def records(self, collection: str) -> list[ChunkRecord]:
        return list(self._load(collection).records)

    def get(self, collection: str, chunk_id: str) -> ChunkRecord | None:
        coll = self._load(collection)
        i = coll.index.get(chunk_id)
        return None if i is None else coll.records[i]

    def upsert_chunks(self, records: Iterable[ChunkRecord]) -> int:
        """Insert or replace records in one collection; returns how many were written.

        The first insert fixes the collection's dimension and embedding model.
        The data file and manifest are fsynced before returning.
        """
        self._require_writable()
        records = list(records)
        if not records:
            return 0
        name = records[0].collection
        if any(r.collection != name for r in records):
            raise PreconditionError("all records in one upsert must share a collection")
        if not _COLLECTION_NAME.match(name):
            raise PreconditionError(f"invalid collection name {name!r}")
        dim = len(records[0].embedding)
        meta = self.manifest.get(name)
        expected = meta["dimension"] if meta else dim
        for r in records:
            if len(r.embedding) != expected:
                raise DimensionMismatch(
                    f"record {r.chunk_id} has dimension {len(r.embedding)}, collection {name!r} expects {expected}")
            _check_finite(r)

        # last occurrence wins within a batch
        batch = {r.chunk_id: r for r in records}
        if meta is None:
            existing: list[ChunkRecord] = []
            meta = {"dimension": dim, "embedding_model": records[0].embedding_model, "record_count": 0}
        else:
            existing = self._load(name).records

        positions = {r.chunk_id: i for i, r in enumerate(existing)}
        merged = list(existing)
        appended = []
        for cid, rec in batch.items():
            if cid in positions:
                merged[positions[cid]] = rec
            else:
                appended.append(rec)
        merged.extend(appended)

        path = self._path(name)
        if len(appended) == len(batch) and (path.exists() or not existing):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write("".join(r.to_json() + "\n" for r in appended))
                fh.flush()
                os.fsync(fh.fileno())
        else:
            self._rewrite(name, merged)

        self.manifest[name] = {**meta, "record_count": len(merged)}
        self._save_manifest()
        with self._mutex:
            self._cache[name] = _Collection(merged)
        return len(batch)

    def delete_chunks(self, collection: str, chunk_ids: Iterable[str]) -> int:
        self._require_writable()
        doomed = set(chunk_ids)
        coll = self._load(collection)
        kept = [r for r in coll.records if r.chunk_id not in doomed]
        removed = len(coll.records) - len(kept)
        if removed:
            self._rewrite(collection, kept)
            self.manifest[collection]["record_count"] = len(kept)
            self._save_manifest()
            with self._mutex:
                self._cache[collection] = _Collection(kept)
        return removed

    def delete_collection(self, name: str) -> bool:
        self._require_writable()
        if name not in self.manifest:
            return False
        self._path(name).unlink(missing_ok=True)
        del self.manifest[name]
        self._save_manifest()
        with self._mutex:
            self._cache.pop(name, None)
        return True

    def similarity_search(self, collection: str, query_vec: Sequence[float], top_k: int = 5,
                          score_threshold: float = 0.0) -> list[SearchHit]:
        """Exact top-k cosine search.

        Hits are ordered by score descending, then chunk_id ascending. The
        threshold is applied after truncation to ``top_k``, so fewer than
        ``top_k`` hits may come back.
        """
        if isinstance(top_k, bool) or not isinstance(top_k, int) or top_k <= 0:
            raise PreconditionError(f"top_k must be a positive integer, got {top_k!r}")
        coll = self._load(collection)
        dim = self.manifest[collection]["dimension"]
        if len(query_vec) != dim:
            raise DimensionMismatch(f"query has dimension {len(query_vec)}, collection {collection!r} has {dim}")
        qnorm = vector_norm(query_vec)
        if qnorm == 0.0:
            log.warning("zero query vector; every record scores 0.0")
        scored = [
            (_cosine(r.embedding, query_vec, n, qnorm), r.chunk_id, r.text)
            for r, n in zip(coll.records, coll.norms)
        ]
        scored.sort(key=lambda t: (-t[0], t[1]))
        return [
            SearchHit(chunk_id=cid, score=score, text=text, rank=rank)
            for rank, (score, cid, text) in enumerate(scored[:top_k], 1)
            if score >= score_threshold
        ]


def open_store(root_path: str | os.PathLike, writable: bool = False) -> VectorStore:
    """Open (creating if needed) the store at ``root_path``.

    Write handles raise LockHeld when another writer is active.
    """
    root = Path(root_path)
    if writable:
        root.mkdir(parents=True, exist_ok=True)
        (root / "collections").mkdir(exist_ok=True)
    store = VectorStore(root, writable)
    if writable:
        store._acquire()
    try:
        store._load_manifest()
    except Exception:
        store.close()
        raise
    return store
