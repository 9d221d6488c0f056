"""Ingestion orchestration, grounded querying and the QA log."""

from __future__ import annotations

import contextlib
import csv
import fcntl
import hashlib
import json
import logging
import os
import re
import uuid
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import (
    DuplicateQaId,
    IoFailure,
    MalformedCsv,
    MalformedLog,
    MissingFile,
    PreconditionError,
    ProviderError,
    RagkitError,
    UnknownCollection,
    UnknownStrategy,
)
from .llmgw import (
    ChatRequest,
    EmbeddingBatch,
    Gateway,
    ProviderConfig,
    as_gateway,
    register_mock_task,
)
from .textprep import (
    STRATEGIES,
    _validate_chunking,
    chunk_document,
    clean_text,
    content_tokens,
    load_document,
    split_sentences,
)
from .vecstore import ChunkRecord, SearchHit, VectorStore, make_chunk_id, utc_now

log = logging.getLogger(__name__)

GROUNDING_INSTRUCTION = "Answer using only the context above. If the context is insufficient, say so."
INSUFFICIENT_CONTEXT_ANSWER = "The context does not contain enough information to answer the question."


@dataclass
class RagParams:
    collection: str = "default"
    top_k: int = 5
    embedding_model: str = "text-embedding-3-small"
    chat_model: str = "gpt-4o-mini"
    temperature: float = 0.0
    max_output_tokens: int = 2000
    score_threshold: float = 0.0
    system_prompt: str | None = "You are a helpful assistant."


@dataclass
class RagResult:
    answer: str
    hits: list[SearchHit]
    prompt_final: str
    chat_model: str

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "hits": [{"chunk_id": h.chunk_id, "score": h.score, "rank": h.rank, "text": h.text} for h in self.hits],
            "prompt_final": self.prompt_final,
            "chat_model": self.chat_model,
        }


@dataclass
class QaLogEntry:
    qa_id: str
    question: str
    prompt_final: str
    answer_model: str
    answer_reference: str | None
    collection: str
    retrieved_ids: list[str]
    retrieved_texts: list[str]
    chat_model: str
    embedding_model: str
    timestamp: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> QaLogEntry:
        entry = cls(**data)
        if not isinstance(entry.retrieved_ids, list) or not isinstance(entry.retrieved_texts, list):
            raise TypeError("retrieved_ids and retrieved_texts must be lists")
        if len(entry.retrieved_ids) != len(entry.retrieved_texts):
            raise ValueError("retrieved_ids and retrieved_texts differ in length")
        return entry


@dataclass
class IngestReport:
    files_processed: int = 0
    chunks_written: int = 0
    chunks_skipped: int = 0
    embedding_batches: int = 0
    resumed_from_checkpoint: bool = False
    per_file: list[dict] = field(default_factory=list)


# ingestion ------------------------------------------------------------------

def settings_fingerprint(collection: str, strategy: str, chunk_size: int, chunk_overlap: int,
                         embedding_model: str) -> str:
    settings = {
        "collection": collection,
        "chunking_strategy": strategy,
        "chunk_size": chunk_size,
        "chunk_overlap": chunk_overlap,
        "embedding_model": embedding_model,
    }
    return hashlib.sha256(json.dumps(settings, sort_keys=True).encode("utf-8")).hexdigest()[:32]


def _read_checkpoint(path: Path) -> dict:
    if not path.exists():
        return {"format_version": 1, "runs": {}}
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        data["runs"]
        return data
    except (ValueError, KeyError, TypeError):
        log.warning("ignoring unreadable checkpoint %s", path)
        return {"format_version": 1, "runs": {}}


def _file_digest(path: str) -> str | None:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def _write_checkpoint(path: Path, data: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def ingest_documents(paths: Sequence[str | os.PathLike], collection: str, *, store: VectorStore,
                     provider: ProviderConfig | Gateway, chunk_size: int = 3200, chunk_overlap: int = 960,
                     chunking_strategy: str = "character", embedding_model: str = "text-embedding-3-small",
                     embedding_batch_size: int = 128, embedding_max_chars: int = 8000, resume: bool = True,
                     checkpoint_path: str | os.PathLike | None = None, extractor_command: str | None = None,
                     lossy: bool = False) -> IngestReport:
    """Load, clean, chunk, embed and store every file in ``paths``.

    A checkpoint is written after each file. With ``resume`` set, files the
    checkpoint already lists as complete under the same settings fingerprint
    are skipped. Chunks whose identical text is already stored are not
    re-embedded and count as skipped. A failing file is recorded in
    ``per_file`` and does not stop the others.
    """
    if not paths:
        raise PreconditionError("ingest_documents needs at least one path")
    if chunking_strategy not in STRATEGIES:
        raise UnknownStrategy(f"unknown chunking strategy {chunking_strategy!r}")
    if chunking_strategy == "character":
        _validate_chunking(chunk_size, chunk_overlap)
    if embedding_batch_size <= 0 or embedding_max_chars <= 0:
        raise PreconditionError("embedding_batch_size and embedding_max_chars must be positive")
    gateway = as_gateway(provider)

    ckpt_path = Path(checkpoint_path) if checkpoint_path else store.root / "ingest.ckpt"
    ckpt = _read_checkpoint(ckpt_path)
    fp = settings_fingerprint(collection, chunking_strategy, chunk_size, chunk_overlap, embedding_model)
    run = ckpt["runs"].setdefault(fp, {
        "settings": {"collection": collection, "chunking_strategy": chunking_strategy, "chunk_size": chunk_size,
                     "chunk_overlap": chunk_overlap, "embedding_model": embedding_model},
        "completed": {},
    })

    report = IngestReport()
    for raw_path in paths:
        source = os.path.abspath(os.fspath(raw_path))
        done = run["completed"].get(source)
        if resume and done is not None and done.get("sha256") == _file_digest(source):
            report.resumed_from_checkpoint = True
            report.per_file.append({"path": source, "chunk_count": run["completed"][source]["chunk_count"],
                                    "status": "skipped"})
            continue
        try:
            written, skipped, batches = _ingest_one(
                source, collection, store, gateway, chunking_strategy, chunk_size, chunk_overlap,
                embedding_model, embedding_batch_size, embedding_max_chars, extractor_command, lossy)
        except (RagkitError, OSError) as exc:
            log.warning("ingestion of %s failed: %s", source, exc)
            report.per_file.append({"path": source, "chunk_count": 0, "status": "failed", "error": str(exc)})
            continue
        report.files_processed += 1
        report.chunks_written += written
        report.chunks_skipped += skipped
        report.embedding_batches += batches
        report.per_file.append({"path": source, "chunk_count": written + skipped, "status": "ok"})
        run["completed"][source] = {"chunk_count": written + skipped, "completed_at": utc_now(),
                                    "sha256": _file_digest(source)}
        # the store now holds this file's chunks under the current settings only
        for other_fp, other in ckpt["runs"].items():
            if other_fp != fp and other["settings"]["collection"] == collection:
                other["completed"].pop(source, None)
        _write_checkpoint(ckpt_path, ckpt)
    return report


def _ingest_one(source, collection, store, gateway, strategy, chunk_size, chunk_overlap, embedding_model,
                batch_size, max_chars, extractor_command, lossy) -> tuple[int, int, int]:
    doc = load_document(source, extractor_command=extractor_command, lossy=lossy)
    spans = chunk_document(doc, strategy, chunk_size, chunk_overlap)
    ids = [make_chunk_id(source, s.index) for s in spans]

    todo = []
    existing_for_source = set()
    if store.has_collection(collection):
        for rec in store.records(collection):
            if rec.source_path == source:
                existing_for_source.add(rec.chunk_id)
        for span, cid in zip(spans, ids):
            old = store.get(collection, cid) if cid in existing_for_source else None
            if (old is not None and old.text == span.text and old.start == span.start
                    and old.end == span.end and old.embedding_model == embedding_model):
                continue
            todo.append((span, cid))
    else:
        todo = list(zip(spans, ids))

    vectors: list[list[float]] = []
    batches = 0
    for lo in range(0, len(todo), batch_size):
        texts = [span.text for span, _ in todo[lo:lo + batch_size]]
        try:
            vectors.extend(gateway.embed_texts(EmbeddingBatch(texts, embedding_model, max_chars, batch_size)))
        except ProviderError as exc:
            exc.stage = "embed"
            raise
        batches += 1

    now = utc_now()
    records = [
        ChunkRecord(collection=collection, chunk_id=cid, text=span.text, embedding=list(vec),
                    source_path=source, source_index=span.index, start=span.start, end=span.end,
                    created_at=now, embedding_model=embedding_model)
        for (span, cid), vec in zip(todo, vectors)
    ]
    store.upsert_chunks(records)
    stale = existing_for_source - set(ids)
    if stale:
        store.delete_chunks(collection, stale)
    return len(records), len(spans) - len(records), batches


# query ----------------------------------------------------------------------

def build_prompt(question: str, hits: Sequence[SearchHit]) -> str:
    """Render the grounded user prompt.

    The system prompt is not part of this text; it travels as the chat
    system message.
    """
    lines = ["TASK: RAG_ANSWER", "", "Context:"]
    if hits:
        lines.extend(f"[{h.rank}] {h.text}" for h in hits)
    else:
        lines.append("[none]")
    lines += ["", f"Question: {question}", "", GROUNDING_INSTRUCTION]
    return "\n".join(lines)


def query_rag(question: str, params: RagParams, store: VectorStore,
              provider: ProviderConfig | Gateway) -> RagResult:
    if not question or not question.strip():
        raise PreconditionError("question must be non-empty")
    if not store.has_collection(params.collection):
        raise UnknownCollection(f"unknown collection {params.collection!r}")
    gateway = as_gateway(provider)
    try:
        qvec = gateway.embed_texts(EmbeddingBatch([question], params.embedding_model))[0]
    except ProviderError as exc:
        exc.stage = "embed"
        raise
    hits = store.similarity_search(params.collection, qvec, params.top_k, params.score_threshold)
    prompt = build_prompt(question, hits)
    req = ChatRequest(user_prompt=prompt, system_prompt=params.system_prompt, temperature=params.temperature,
                      max_output_tokens=params.max_output_tokens, model=params.chat_model)
    try:
        answer = gateway.chat_complete(req)
    except ProviderError as exc:
        exc.stage = "chat"
        raise
    return RagResult(answer=answer, hits=hits, prompt_final=prompt, chat_model=params.chat_model)


_HIT_LINE = re.compile(r"^\[(\d+)\] ", re.MULTILINE)


@register_mock_task("RAG_ANSWER")
def _mock_rag_answer(prompt: str) -> str:
    """Answer with the context sentence sharing most content words with the question.

    Ties go to the earlier hit, then the earlier sentence; with no overlap at
    all the first sentence of the first hit is used.
    """
    head, _, rest = prompt.partition("\nContext:\n")
    context, _, tail = rest.rpartition("\n\nQuestion: ")
    question = tail.rsplit("\n\n" + GROUNDING_INSTRUCTION, 1)[0]
    if context.strip() == "[none]" or not context.strip():
        return INSUFFICIENT_CONTEXT_ANSWER
    pieces = _HIT_LINE.split(context)
    hit_texts = [pieces[i + 1] for i in range(1, len(pieces) - 1, 2)]
    q_tokens = content_tokens(question)
    best, best_overlap = None, -1
    for text in hit_texts:
        for sentence in split_sentences(clean_text(text)):
            overlap = len(q_tokens & content_tokens(sentence))
            if overlap > best_overlap:
                best, best_overlap = sentence, overlap
    return best if best is not None else INSUFFICIENT_CONTEXT_ANSWER


# QA log ---------------------------------------------------------------------

@contextlib.contextmanager
def _log_lock(log_path: Path) -> Iterator[None]:
    lock_path = log_path.with_name(log_path.name + ".lock")
    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(lock_path, "a+")
    except OSError as exc:
        raise IoFailure(f"cannot lock {log_path}: {exc}") from exc
    try:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        fh.close()


def read_qa_log(log_path: str | os.PathLike) -> list[QaLogEntry]:
    path = Path(log_path)
    if not path.is_file():
        raise MissingFile(f"no such QA log: {path}")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(QaLogEntry.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise MalformedLog(f"{path}:{lineno}: {exc}", line=lineno) from exc
    return entries


def write_qa_log(log_path: str | os.PathLike, entries: Sequence[QaLogEntry]) -> None:
    """Atomically replace the log with ``entries``."""
    path = Path(log_path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(e.to_json() + "\n" for e in entries))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def log_rag_interaction(log_path: str | os.PathLike, question: str, result: RagResult, params: RagParams,
                        answer_reference: str | None = None, qa_id: str | None = None) -> QaLogEntry:
    """Append one interaction to the QA log and return the entry.

    ``qa_id`` defaults to a random UUID4. A caller-supplied id that is
    already present raises DuplicateQaId.
    """
    path = Path(log_path)
    with _log_lock(path):
        if qa_id is not None and path.exists():
            if any(e.qa_id == qa_id for e in read_qa_log(path)):
                raise DuplicateQaId(f"qa_id {qa_id!r} already present in {path}")
        entry = QaLogEntry(
            qa_id=qa_id or str(uuid.uuid4()),
            question=question,
            prompt_final=result.prompt_final,
            answer_model=result.answer,
            answer_reference=answer_reference,
            collection=params.collection,
            retrieved_ids=[h.chunk_id for h in result.hits],
            retrieved_texts=[h.text for h in result.hits],
            chat_model=result.chat_model,
            embedding_model=params.embedding_model,
            timestamp=utc_now(),
        )
        try:
            with open(path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(entry.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise IoFailure(f"cannot append to {path}: {exc}") from exc
    return entry


def merge_reference_answers(log_path: str | os.PathLike, csv_path: str | os.PathLike) -> dict:
    """Copy ``answer_reference`` values from a ``qa_id,answer_reference`` CSV into the log."""
    path, cpath = Path(log_path), Path(csv_path)
    if not cpath.is_file():
        raise MissingFile(f"no such CSV: {cpath}")
    with open(cpath, encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"qa_id", "answer_reference"} <= set(reader.fieldnames):
            raise MalformedCsv(f"{cpath} must have header columns qa_id,answer_reference")
        refs = {row["qa_id"]: row["answer_reference"] for row in reader}

    with _log_lock(path):
        entries = read_qa_log(path)
        known = {e.qa_id for e in entries}
        updated = 0
        for e in entries:
            if e.qa_id in refs:
                e.answer_reference = refs[e.qa_id]
                updated += 1
        write_qa_log(path, entries)
    return {"updated": updated, "unmatched": [q for q in refs if q not in known]}
