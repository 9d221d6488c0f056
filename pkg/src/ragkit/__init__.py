"""Retrieval-augmented generation pipelines with LLM-judged evaluation."""

from .errors import RagkitError
from .llmgw import ChatRequest, EmbeddingBatch, Gateway, ProviderConfig
from .ragas import EvalConfig, MetricsRow, average_precision, compute_ragas_metrics
from .ragflow import (
    QaLogEntry,
    RagParams,
    RagResult,
    build_prompt,
    ingest_documents,
    log_rag_interaction,
    merge_reference_answers,
    query_rag,
    read_qa_log,
)
from .reportkit import (
    SweepConfig,
    correlate_against,
    pearson,
    run_chunk_sweep,
    summarize_runs,
)
from .textprep import (
    chunk_characters,
    chunk_document,
    clean_text,
    load_document,
    split_sentences,
)
from .vecstore import ChunkRecord, SearchHit, VectorStore, cosine_similarity, open_store

__version__ = "0.1.0"

__all__ = [
    "ChatRequest", "ChunkRecord", "EmbeddingBatch", "EvalConfig", "Gateway", "MetricsRow", "ProviderConfig",
    "QaLogEntry", "RagParams", "RagResult", "RagkitError", "SearchHit", "SweepConfig", "VectorStore",
    "average_precision", "build_prompt", "chunk_characters", "chunk_document", "clean_text",
    "compute_ragas_metrics", "correlate_against", "cosine_similarity", "ingest_documents", "load_document",
    "log_rag_interaction", "merge_reference_answers", "open_store", "pearson", "query_rag", "read_qa_log",
    "run_chunk_sweep", "split_sentences", "summarize_runs",
]
